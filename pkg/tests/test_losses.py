import math

import numpy as np
import pytest
import torch
from scipy.optimize import brentq

from coopt.fields import FieldSamples, Mode
from coopt.losses import (LossBreakdown, ManufacturingLimits, active_terms, collision_curvature, loss_local_collision,
                          loss_motion, loss_orientation, loss_strength, loss_thickness, loss_volume,
                          loss_volume_objective, loss_yield, manufacturing_losses, path_curvature,
                          principal_curvatures, sample_set, surface_curvatures, total_loss, validate_weights)
from coopt.material import PRESETS, hoffman_coeffs


def T(a):
    return torch.tensor(np.array(a, float), dtype=torch.float64)


def sphere(x):
    r = np.linalg.norm(x, axis=-1)
    g = x / r[:, None]
    H = (np.eye(3)[None] - g[:, :, None] * g[:, None, :]) / r[:, None, None]
    return g, H


def random_directions(n, seed):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# strength and volume
# ----------------------------------------------------------------------------
def test_strength_loss_examples():
    assert float(loss_strength([2.0, 4.0], 6)) == pytest.approx(-(2.0 ** -6 + 4.0 ** -6) ** (-1 / 6), rel=1e-14)
    assert float(loss_strength([2.0, 4.0], 6)) == pytest.approx(-1.9948, abs=1e-4)
    assert float(loss_strength([3.0], 6)) == pytest.approx(-3.0, rel=1e-14)
    n, g = 50, 1.7
    assert float(loss_strength(np.full(n, g), 6)) == pytest.approx(-g * n ** (-1 / 6), rel=1e-13)
    with pytest.raises(ValueError):
        loss_strength([1.0, 0.0])


def test_strength_loss_is_a_lower_bound_that_tightens():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = rng.uniform(0.1, 10.0, size=30)
        vals = [-float(loss_strength(g, p)) for p in (2, 6, 12, 24)]
        assert all(v <= g.min() * (1 + 1e-12) for v in vals)
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_strength_loss_no_overflow():
    assert math.isfinite(float(loss_strength([1e-60, 1e60], 6)))


def test_volume_loss_examples():
    V_e, n = 2.0, 10
    assert float(loss_volume(np.zeros(n), V_e, 5.0)) == 0.0
    assert float(loss_volume(np.full(n, 0.25), V_e, 5.0)) == pytest.approx(0.0)
    assert float(loss_volume(np.full(n, 0.25 * 1.25), V_e, 5.0)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        loss_volume(np.ones(2), 1.0, 0.0)


def test_yield_and_volume_objective():
    c = hoffman_coeffs(PRESETS["PLA-CF"])
    s = np.zeros((3, 6))
    assert float(loss_yield(s, c)) == 0.0
    s[0, 0] = 67.6  # exactly at tensile strength: index 1
    assert float(loss_yield(s, c)) == pytest.approx(0.0, abs=1e-12)
    # one element at index 1.5
    A, B = float(c.Q[0, 0]), float(c.q[0])
    sx = (-B + math.sqrt(B * B + 4 * A * 1.5)) / (2 * A)
    s[1, 0] = sx
    assert float(loss_yield(s, c)) == pytest.approx(0.5, rel=1e-10)
    assert float(loss_volume_objective(np.ones(8), 0.125)) == pytest.approx(1.0)


# ----------------------------------------------------------------------------
# curvature oracles
# ----------------------------------------------------------------------------
@pytest.mark.parametrize("r", [2.0, 10.0, 37.5])
def test_sphere_curvatures_analytic(r):
    x = r * random_directions(50, 1)
    g, H = sphere(x)
    c = surface_curvatures(T(g), T(H))
    np.testing.assert_allclose(c.K_M.numpy(), -1 / r, rtol=1e-12)
    np.testing.assert_allclose(c.K_G.numpy(), 1 / r ** 2, rtol=1e-12)
    np.testing.assert_allclose(np.abs(c.K_max.numpy()), 1 / r, atol=1e-6)
    np.testing.assert_allclose(collision_curvature(c, "abs").numpy(), 1 / r, atol=1e-6)
    # flipping the field flips the mean curvature only
    c2 = surface_curvatures(T(-g), T(-H))
    np.testing.assert_allclose(c2.K_M.numpy(), 1 / r, rtol=1e-12)
    np.testing.assert_allclose(c2.K_G.numpy(), 1 / r ** 2, rtol=1e-12)


def test_plane_curvatures_exactly_zero():
    g = np.tile([0.3, -0.4, 1.2], (20, 1))
    c = surface_curvatures(T(g), torch.zeros(20, 3, 3, dtype=torch.float64))
    for v in (c.K_M, c.K_G, c.K_max, collision_curvature(c, "abs")):
        assert float(v.abs().max()) == 0.0


def graph_curvature_oracle(m, p, h=1e-3):
    """Curvatures from the local height function of the level set through ``p``.

    The surface is written as ``w(u, v)`` along the unit normal; at ``p`` the
    height has zero slope so its Hessian is the second fundamental form.
    """
    c = m(p)
    eps = 1e-6
    grad = np.array([(m(p + eps * e) - m(p - eps * e)) / (2 * eps) for e in np.eye(3)])
    n = grad / np.linalg.norm(grad)
    t1 = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)

    def w(u, v):
        q = p + u * t1 + v * t2
        return brentq(lambda s: m(q + s * n) - c, -0.5, 0.5, xtol=1e-15, rtol=1e-15)

    w0 = w(0, 0)
    wuu = (w(h, 0) - 2 * w0 + w(-h, 0)) / h ** 2
    wvv = (w(0, h) - 2 * w0 + w(0, -h)) / h ** 2
    wuv = (w(h, h) - w(h, -h) - w(-h, h) + w(-h, -h)) / (4 * h ** 2)
    return (wuu + wvv) / 2, wuu * wvv - wuv ** 2


def test_random_quadric_matches_height_function_oracle():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 3)) * 0.05
    A = A + A.T
    b = rng.normal(size=3)
    m = lambda x: x @ A @ x + b @ x  # noqa: E731
    pts = rng.uniform(-2, 2, size=(8, 3))
    g = pts @ (2 * A) + b
    H = np.broadcast_to(2 * A, (8, 3, 3))
    c = surface_curvatures(T(g), T(H))
    for k, p in enumerate(pts):
        KM, KG = graph_curvature_oracle(m, p)
        assert float(c.K_M[k]) == pytest.approx(KM, abs=1e-3)
        assert float(c.K_G[k]) == pytest.approx(KG, abs=1e-3)
    k1, k2 = principal_curvatures(c)
    np.testing.assert_allclose((k1 * k2).numpy(), c.K_G.numpy(), atol=1e-10)
    np.testing.assert_allclose(((k1 + k2) / 2).numpy(), c.K_M.numpy(), atol=1e-12)


def test_degenerate_gradient_excluded():
    g = np.array([[0.0, 0, 0], [0, 0, 1.0]])
    c = surface_curvatures(T(g), torch.ones(2, 3, 3, dtype=torch.float64))
    assert c.valid.tolist() == [False, True]
    assert c.degenerate_count == 1
    assert float(c.K_M[0]) == 0.0


# ----------------------------------------------------------------------------
# path curvature
# ----------------------------------------------------------------------------
def test_straight_fibers_have_zero_path_curvature():
    n = 10
    ga, gm = np.tile([0, 1.0, 0], (n, 1)), np.tile([0, 0, 1.0], (n, 1))
    K, valid = path_curvature(T(ga), T(gm), torch.zeros(n, 3, 3, dtype=torch.float64),
                              torch.zeros(n, 3, 3, dtype=torch.float64))
    assert valid.all()
    assert float(K.max()) < 1e-12


def unit_fiber(ga_fn, gm_fn, x):
    f = np.cross(ga_fn(x), gm_fn(x))
    return f / np.linalg.norm(f)


def fd_path_curvature(ga_fn, gm_fn, x, eps=1e-5):
    f = unit_fiber(ga_fn, gm_fn, x)
    d = (unit_fiber(ga_fn, gm_fn, x + eps * f) - unit_fiber(ga_fn, gm_fn, x - eps * f)) / (2 * eps)
    return np.linalg.norm(d)


def test_circular_fibers():
    # m = z, a = -(x^2 + y^2)/2 gives fibers on circles around the z axis
    r = 5.0
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    x = np.stack([r * np.cos(th), r * np.sin(th), np.zeros_like(th)], 1)
    ga = np.stack([-x[:, 0], -x[:, 1], np.zeros_like(th)], 1)
    Ha = np.broadcast_to(np.diag([-1.0, -1.0, 0.0]), (12, 3, 3))
    gm = np.tile([0, 0, 1.0], (12, 1))
    K, _ = path_curvature(T(ga), T(gm), T(Ha), torch.zeros(12, 3, 3, dtype=torch.float64))
    oracle = [fd_path_curvature(lambda p: np.array([-p[0], -p[1], 0.0]), lambda p: np.array([0, 0, 1.0]), p)
              for p in x]
    np.testing.assert_allclose(K.numpy(), oracle, rtol=0.05)
    np.testing.assert_allclose(K.numpy(), 1 / r, rtol=1e-10)


def test_path_curvature_general_fields_match_oracle():
    rng = np.random.default_rng(11)
    Aa, Am = rng.normal(size=(2, 3, 3)) * 0.1
    Aa, Am = Aa + Aa.T, Am + Am.T
    ba, bm = rng.normal(size=(2, 3))
    ga_fn = lambda p: 2 * Aa @ p + ba  # noqa: E731
    gm_fn = lambda p: 2 * Am @ p + bm  # noqa: E731
    pts = rng.uniform(-1, 1, size=(10, 3))
    K, valid = path_curvature(T([ga_fn(p) for p in pts]), T([gm_fn(p) for p in pts]),
                              T(np.broadcast_to(2 * Aa, (10, 3, 3))), T(np.broadcast_to(2 * Am, (10, 3, 3))))
    assert valid.all()
    np.testing.assert_allclose(K.numpy(), [fd_path_curvature(ga_fn, gm_fn, p) for p in pts], rtol=1e-5)


# ----------------------------------------------------------------------------
# manufacturing losses
# ----------------------------------------------------------------------------
def test_local_collision_examples():
    r = 5.0
    x = r * random_directions(40, 2)
    g, H = sphere(x)
    # inward-pointing field: the convex side faces the nozzle, K_max = +1/r
    c = surface_curvatures(T(-g), T(-H))
    solid = torch.ones(40, dtype=torch.float64)
    assert float(loss_local_collision(solid, c, 0.1)) == pytest.approx(0.1, abs=1e-6)
    assert float(loss_local_collision(solid * 1e-12, c, 0.1)) == 0.0
    plane = surface_curvatures(T(np.tile([0, 0, 1.0], (40, 1))), torch.zeros(40, 3, 3, dtype=torch.float64))
    assert float(loss_local_collision(solid, plane, 0.1)) == 0.0
    # the magnitude measure sees the outward sphere too
    c_out = surface_curvatures(T(g), T(H))
    assert float(loss_local_collision(solid, c_out, 0.1)) == 0.0
    assert float(loss_local_collision(solid, c_out, 0.1, measure="abs")) == pytest.approx(0.1, abs=1e-6)


def test_thickness_examples():
    H = torch.ones(10, dtype=torch.float64)
    for norm, want in ((0.6, 0.0), (0.2, 0.2), (1.0, 0.2)):
        g = T(np.tile([0, 0, norm], (10, 1)))
        assert float(loss_thickness(H, g, 0.4, 0.8)) == pytest.approx(want, abs=1e-12)


def test_orientation_examples():
    H = torch.ones(5, dtype=torch.float64)
    n = T([0, 0, 2.0])
    beta = math.radians(30)
    parallel = T(np.tile([0, 0, 3.0], (5, 1)))
    assert float(loss_orientation(H, parallel, n, beta)) == pytest.approx(1 - math.cos(beta), abs=1e-12)
    assert float(loss_orientation(H, parallel, n, beta)) == pytest.approx(0.134, abs=1e-3)
    perp = T(np.tile([1.0, 0, 0], (5, 1)))
    assert float(loss_orientation(H, perp, n, beta)) == 0.0
    assert float(loss_orientation(H * 0, parallel, n, beta)) == 0.0
    # the reversed reading penalizes tilt instead
    assert float(loss_orientation(H, parallel, n, beta, sense="deviation")) == 0.0
    assert float(loss_orientation(H, perp, n, beta, sense="deviation")) == pytest.approx(math.cos(beta))


def test_motion_loss():
    H = torch.ones(4, dtype=torch.float64)
    K = T([0.1, 0.3, 0.5, 0.0])
    assert float(loss_motion(H, K, torch.ones(4, dtype=torch.bool), 0.2)) == pytest.approx((0.1 + 0.3) / 4)


def fake_samples(n=16, seed=0):
    rng = np.random.default_rng(seed)
    Hm = rng.normal(size=(n, 3, 3)) * 0.2
    Ha = rng.normal(size=(n, 3, 3)) * 0.2
    return FieldSamples(x=T(rng.normal(size=(n, 3))), rho_raw=T(rng.normal(size=n)),
                        rho=T(rng.uniform(0.1, 1, n)), m=T(rng.normal(size=n)), a=T(rng.normal(size=n)),
                        grad_m=T(rng.normal(size=(n, 3))), grad_a=T(rng.normal(size=(n, 3))),
                        hess_m=T(Hm + Hm.transpose(0, 2, 1)), hess_a=T(Ha + Ha.transpose(0, 2, 1)))


def test_mode_rules():
    s = fake_samples()
    lim = ManufacturingLimits()
    five = manufacturing_losses(s, Mode.FIVE_AXIS, lim)
    three = manufacturing_losses(s, Mode.THREE_AXIS, lim, n=T([0, 0, 1.0]))
    planar = manufacturing_losses(s, Mode.PLANAR, lim)
    assert five["evaluated"] == ("lc", "lt", "mo") and float(five["ort"]) == 0.0
    assert "mo" not in three["evaluated"] and float(three["mo"]) == 0.0
    assert planar["evaluated"] == () and all(float(planar[k]) == 0.0 for k in ("lc", "mo", "ort", "lt"))
    assert active_terms(Mode.PLANAR) == ("obj", "vol")
    assert active_terms("3axis", "lightweight") == ("obj", "yd", "lc", "ort", "lt")


def breakdown(values):
    return LossBreakdown(*(torch.tensor(float(v), dtype=torch.float64) for v in values))


def test_total_loss_examples():
    bd = breakdown([1, 2, 3, 4, 0, 5, 0, 1])  # obj vol lc mo ort lt yd psi
    w = dict.fromkeys(("obj", "vol", "lc", "mo", "lt"), 1.0)
    assert float(total_loss(Mode.FIVE_AXIS, bd, w)) == 15.0
    assert float(total_loss(Mode.FIVE_AXIS, bd, {})) == 0.0
    # 2.5-axis ignores curvature terms even when they are nonzero
    assert float(total_loss(Mode.PLANAR, bd, {"obj": 1.0, "vol": 1.0})) == 3.0
    with pytest.raises(ValueError, match="not defined"):
        total_loss(Mode.PLANAR, bd, {"obj": 1.0, "lc": 1.0})
    with pytest.raises(ValueError):
        validate_weights(Mode.FIVE_AXIS, {"ort": 1.0})


def test_limits_validation_and_spacing():
    lim = ManufacturingLimits()
    assert lim.delta_c == pytest.approx(0.32)
    assert ManufacturingLimits.from_dict({"beta_deg": 45}).beta == pytest.approx(math.pi / 4)
    with pytest.raises(ValueError) as info:
        ManufacturingLimits(t_min=1.0, t_max=0.5, K_lc=-1).validate()
    assert "t_min" in str(info.value) and "K_lc" in str(info.value)


def test_sample_set_is_seeded_and_fills_box():
    a = sample_set((0, 0, 0), (10, 5, 2), 100, 2, seed=3)
    b = sample_set((0, 0, 0), (10, 5, 2), 100, 2, seed=3)
    assert a.count == 200
    assert torch.equal(a.points, b.points)
    p = a.points.numpy()
    assert (p >= 0).all() and (p <= [10, 5, 2]).all()
