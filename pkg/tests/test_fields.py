import numpy as np
import pytest
import torch

from coopt.fields import FieldTriple, Mode, NetworkSpec, evaluate, heaviside_project, init_networks

SPEC = NetworkSpec(2, 16, "silu", (0.0, 0.0, 0.0), (30.0, 10.0, 20.0), 5.0)


def perturbed(spec=SPEC, mode=Mode.FIVE_AXIS, seed=0, scale=0.3):
    t = init_networks(spec, mode, seed)
    rng = np.random.default_rng(seed + 100)
    flat = t.to_flat()
    t.load_flat(flat + scale * rng.normal(size=flat.shape))
    return t


def points(n, seed=1, spec=SPEC):
    rng = np.random.default_rng(seed)
    return rng.uniform(spec.lo, spec.hi, size=(n, 3))


def test_initial_fields():
    t = init_networks(NetworkSpec(lo=(0, 0, 0), hi=(135, 45, 45)), Mode.FIVE_AXIS, 0)
    s = evaluate(t, points(100, spec=t.spec), order=2)
    assert float((s.rho.detach() - 0.5).abs().max()) < 0.05
    np.testing.assert_allclose(s.grad_m.detach().numpy(), np.tile([0, 0, 1.0], (100, 1)), atol=1e-12)
    f = s.fiber.detach().numpy()
    np.testing.assert_allclose(f / np.linalg.norm(f, axis=1, keepdims=True), np.tile([1.0, 0, 0], (100, 1)),
                               atol=1e-12)


def test_gradient_and_hessian_match_finite_differences():
    t = perturbed()
    x = points(8)
    s = evaluate(t, x, order=2, hess_a=True)
    h = 1e-4
    for name, grad, hess in (("m", s.grad_m, s.hess_m), ("a", s.grad_a, s.hess_a)):
        fd_g = np.zeros((8, 3))
        fd_H = np.zeros((8, 3, 3))
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            p, m = evaluate(t, x + dx, order=1), evaluate(t, x - dx, order=1)
            fd_g[:, k] = (getattr(p, name) - getattr(m, name)).detach().numpy() / (2 * h)
            fd_H[:, :, k] = (getattr(p, "grad_" + name) - getattr(m, "grad_" + name)).detach().numpy() / (2 * h)
        np.testing.assert_allclose(grad.detach().numpy(), fd_g, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(hess.detach().numpy(), fd_H, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(hess.detach().numpy(), np.swapaxes(hess.detach().numpy(), 1, 2), atol=1e-14)


def test_jet_matches_autograd():
    t = perturbed(seed=3)
    x = torch.as_tensor(points(5), dtype=torch.float64).requires_grad_(True)
    s = evaluate(t, x, order=1)
    (g,) = torch.autograd.grad(s.m.sum(), x, create_graph=True)
    np.testing.assert_allclose(g.detach().numpy(), s.grad_m.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_planar_mode_uses_setup_orientation():
    t = init_networks(SPEC, Mode.PLANAR, 0)
    with torch.no_grad():
        t.n.copy_(torch.tensor([1.0, 1.0, 0.0]))
    s = evaluate(t, points(10), order=2)
    n = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
    np.testing.assert_allclose(s.grad_m.detach().numpy(), np.tile(n, (10, 1)), atol=1e-15)
    assert float(s.hess_m.abs().max()) == 0.0
    np.testing.assert_allclose(s.m.detach().numpy(), (points(10) - SPEC.center) @ n, atol=1e-12)


def test_out_of_domain_flag():
    t = init_networks(SPEC)
    s = evaluate(t, [[-1.0, 5, 5], [15, 5, 10], [30.0, 10.0, 20.0]], order=0)
    assert s.out_of_domain.tolist() == [True, False, False]


def test_heaviside_projection():
    assert float(heaviside_project(torch.tensor(0.0))) == 0.5
    v = heaviside_project(torch.linspace(-5, 5, 11, dtype=torch.float64), 5.0)
    assert bool((v[1:] > v[:-1]).all())
    with pytest.raises(ValueError):
        heaviside_project(torch.tensor(0.0), 0.0)


def test_save_load_roundtrip(tmp_path):
    t = perturbed(seed=7, mode=Mode.THREE_AXIS)
    t.save(tmp_path / "x.fields")
    u = FieldTriple.load(tmp_path / "x.fields")
    assert u.mode is Mode.THREE_AXIS
    np.testing.assert_array_equal(t.to_flat(), u.to_flat())
    x = points(6)
    np.testing.assert_array_equal(evaluate(t, x).m.detach().numpy(), evaluate(u, x).m.detach().numpy())
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        FieldTriple.load(tmp_path / "bad")


def test_seeded_initialization_is_deterministic():
    a, b, c = init_networks(SPEC, seed=4), init_networks(SPEC, seed=4), init_networks(SPEC, seed=5)
    np.testing.assert_array_equal(a.to_flat(), b.to_flat())
    assert not np.array_equal(a.to_flat(), c.to_flat())


def test_spec_validation():
    with pytest.raises(ValueError):
        init_networks(NetworkSpec(hidden_width=0))
    with pytest.raises(ValueError):
        Mode.parse("4axis")
    assert Mode.parse("2.5axis") is Mode.PLANAR
