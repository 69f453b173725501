"""Design and manufacturability losses evaluated on sampled field values.

Every constraint loss is a ReLU aggregate weighted by the projected density
``H(rho)`` and normalized by the solid mass ``Psi = sum_p H(rho(x_p))`` of the
sample set, so void regions never contribute.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from scipy.stats import qmc

from .fields import FieldSamples, Mode
from .material import DTYPE, HoffmanCoeffs, as_tensor, hoffman_index

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-6
PSI_FLOOR = 1e-9
TERMS = ("obj", "vol", "lc", "mo", "ort", "lt", "yd")
OBJECTIVES = ("strength", "stiffness", "lightweight")


@dataclass(frozen=True)
class ManufacturingLimits:
    """Bounds for the manufacturability terms (lengths in mm, angles in rad)."""

    K_lc: float = 0.1
    K_f_max: float = 0.2
    t_min: float = 0.4
    t_max: float = 0.8
    beta: float = math.radians(60.0)
    iso_spacing: float | None = None
    curvature_measure: str = "signed"
    orientation_sense: str = "printed"

    def validate(self) -> None:
        errors = []
        if not 0 < self.t_min < self.t_max:
            errors.append(f"limits.t_min/t_max: need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.K_lc <= 0:
            errors.append(f"limits.K_lc must be > 0, got {self.K_lc}")
        if self.K_f_max <= 0:
            errors.append(f"limits.K_f_max must be > 0, got {self.K_f_max}")
        if not 0 < self.beta < math.pi / 2:
            errors.append(f"limits.beta must lie in (0, pi/2), got {self.beta}")
        if self.iso_spacing is not None and self.iso_spacing <= 0:
            errors.append(f"limits.iso_spacing must be > 0, got {self.iso_spacing}")
        if self.curvature_measure not in ("signed", "abs"):
            errors.append(f"limits.curvature_measure must be 'signed' or 'abs', got {self.curvature_measure!r}")
        if self.orientation_sense not in ("printed", "deviation"):
            errors.append(f"limits.orientation_sense must be 'printed' or 'deviation', got {self.orientation_sense!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def delta_c(self) -> float:
        """Isovalue spacing; ``t_min * t_max`` maps the gradient band onto the thickness band."""
        return self.iso_spacing if self.iso_spacing is not None else self.t_min * self.t_max

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ManufacturingLimits":
        d = dict(d)
        if "beta_deg" in d:
            d["beta"] = math.radians(d.pop("beta_deg"))
        return cls(**d)


@dataclass
class SampleSet:
    points: torch.Tensor
    void: torch.Tensor | None = None

    @property
    def count(self) -> int:
        return len(self.points)


def sample_set(lo, hi, n_elems: int, multiplier: int = 2, seed: int = 0) -> SampleSet:
    """Scrambled Halton points filling the box, ``multiplier * n_elems`` of them."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = int(multiplier * n_elems)
    u = qmc.Halton(d=3, scramble=True, seed=seed).random(n)
    return SampleSet(torch.as_tensor(lo + u * (hi - lo), dtype=DTYPE))


# ----------------------------------------------------------------------------
# geometric quantities
# ----------------------------------------------------------------------------
def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp((v * v).sum(-1), min=1e-30))


def adjugate3(H: torch.Tensor) -> torch.Tensor:
    """Adjugate of batched 3x3 matrices (transpose of the cofactor matrix)."""
    c0 = torch.linalg.cross(H[..., 1, :], H[..., 2, :], dim=-1)
    c1 = torch.linalg.cross(H[..., 2, :], H[..., 0, :], dim=-1)
    c2 = torch.linalg.cross(H[..., 0, :], H[..., 1, :], dim=-1)
    return torch.stack([c0, c1, c2], dim=-1)


def _root_disc(K_M, K_G, eps: float = 1e-12):
    # sqrt(max(K_M^2 - K_G, 0)) smoothed by eps so umbilic points keep finite gradients
    disc = torch.clamp(K_M**2 - K_G, min=0.0)
    return torch.sqrt(disc + eps * eps) - eps


@dataclass
class Curvatures:
    K_M: torch.Tensor
    K_G: torch.Tensor
    K_max: torch.Tensor
    valid: torch.Tensor

    @property
    def degenerate_count(self) -> int:
        return int((~self.valid).sum())


def surface_curvatures(grad_m, hess_m, grad_floor: float = GRAD_FLOOR) -> Curvatures:
    """Mean, Gaussian and larger principal curvature of the level sets of m.

    The level-set normal is taken along ``+grad m``; with this sign the field
    ``m = |x|`` has ``K_M = -1/r``.  Points with ``|grad m| < grad_floor`` are
    flagged invalid and their curvatures set to zero.
    """
    g, H = as_tensor(grad_m), as_tensor(hess_m)
    gn = _safe_norm(g)
    valid = gn >= grad_floor
    gn = torch.where(valid, gn, torch.ones_like(gn))
    gHg = torch.einsum("...i,...ij,...j->...", g, H, g)
    trace = H.diagonal(dim1=-2, dim2=-1).sum(-1)
    K_M = (gHg - gn**2 * trace) / (2 * gn**3)
    K_G = torch.einsum("...i,...ij,...j->...", g, adjugate3(H), g) / gn**4
    K_max = K_M + _root_disc(K_M, K_G)
    zero = torch.zeros_like(K_M)
    return Curvatures(torch.where(valid, K_M, zero), torch.where(valid, K_G, zero),
                      torch.where(valid, K_max, zero), valid)


def principal_curvatures(c: Curvatures) -> tuple[torch.Tensor, torch.Tensor]:
    disc = _root_disc(c.K_M, c.K_G)
    return c.K_M + disc, c.K_M - disc


def collision_curvature(c: Curvatures, measure: str = "signed") -> torch.Tensor:
    """The curvature compared against ``K_lc``: the larger principal value, or the larger magnitude."""
    if measure == "signed":
        return c.K_max
    return c.K_M.abs() + _root_disc(c.K_M, c.K_G)


def fiber_jacobian(grad_a, grad_m, hess_a, hess_m) -> torch.Tensor:
    """``d f_i / d x_j`` for ``f = grad a x grad m``."""
    ga, gm = as_tensor(grad_a), as_tensor(grad_m)
    Ha, Hm = as_tensor(hess_a), as_tensor(hess_m)
    gm_b = gm[..., None, :].expand_as(Ha)
    ga_b = ga[..., None, :].expand_as(Hm)
    # column j of the Hessians is d(grad)/dx_j; Hessians are symmetric so rows work too
    J = torch.linalg.cross(Ha, gm_b, dim=-1) + torch.linalg.cross(ga_b, Hm, dim=-1)
    return J.transpose(-1, -2)


def path_curvature(grad_a, grad_m, hess_a, hess_m, grad_floor: float = GRAD_FLOOR):
    """Curvature of the integral curves of the unit fiber field.

    Returns ``(K_f, valid)`` where ``K_f = |(grad f_hat) f_hat|``; the
    directional derivative of the unit field along itself is the curvature
    vector of the fiber path.
    """
    f = torch.linalg.cross(as_tensor(grad_a), as_tensor(grad_m), dim=-1)
    fn = _safe_norm(f)
    valid = fn >= grad_floor
    fn = torch.where(valid, fn, torch.ones_like(fn))
    f_hat = f / fn[..., None]
    J = fiber_jacobian(grad_a, grad_m, hess_a, hess_m)
    Jf = (J @ f_hat[..., None])[..., 0]
    d = (Jf - (Jf * f_hat).sum(-1, keepdim=True) * f_hat) / fn[..., None]
    K_f = _safe_norm(d)
    return torch.where(valid, K_f, torch.zeros_like(K_f)), valid


# ----------------------------------------------------------------------------
# individual losses
# ----------------------------------------------------------------------------
def loss_strength(gamma_e, p_bar: float = 6.0) -> torch.Tensor:
    """Negative p-norm of inverse safety factors, a smooth stand-in for ``-min(gamma)``."""
    g = as_tensor(gamma_e)
    if bool((g <= 0).any()):
        raise ValueError("safety factors must be positive")
    inv = 1.0 / g
    m = inv.detach().max()
    return -1.0 / (m * ((inv / m) ** p_bar).sum() ** (1.0 / p_bar))


def loss_volume(H_e, V_e, V_star) -> torch.Tensor:
    if V_star <= 0:
        raise ValueError("V_star must be positive")
    return torch.relu((as_tensor(H_e) * V_e).sum() / V_star - 1.0)


def solid_mass(H) -> torch.Tensor:
    return as_tensor(H).sum()


def _gated_mean(H, values, psi, flags: dict | None = None, name: str = "") -> torch.Tensor:
    if float(as_tensor(psi).detach()) < PSI_FLOOR:
        if flags is not None:
            flags["empty_solid"] = True
        log.warning("solid mass below %.0e; %s loss set to 0", PSI_FLOOR, name or "constraint")
        return torch.zeros((), dtype=DTYPE)
    return (H * values).sum() / psi


def loss_local_collision(H, curv: Curvatures, K_lc: float, measure: str = "signed", psi=None,
                         flags=None) -> torch.Tensor:
    H = as_tensor(H)
    psi = solid_mass(H) if psi is None else psi
    K = collision_curvature(curv, measure)
    return _gated_mean(H, torch.relu(K - K_lc) * curv.valid, psi, flags, "local collision")


def loss_motion(H, K_f, valid, K_f_max: float, psi=None, flags=None) -> torch.Tensor:
    H = as_tensor(H)
    psi = solid_mass(H) if psi is None else psi
    return _gated_mean(H, torch.relu(K_f.abs() - K_f_max) * valid, psi, flags, "motion")


def orientation_cosine(grad_m, n) -> tuple[torch.Tensor, torch.Tensor]:
    g, n = as_tensor(grad_m), as_tensor(n)
    gn = _safe_norm(g)
    valid = gn >= GRAD_FLOOR
    cos = (g @ n) / (torch.where(valid, gn, torch.ones_like(gn)) * torch.linalg.vector_norm(n))
    return cos, valid


def loss_orientation(H, grad_m, n, beta: float, sense: str = "printed", psi=None, flags=None) -> torch.Tensor:
    """Solid-weighted penalty on the angle between layer normals and the setup orientation.

    ``sense="printed"`` penalizes ``cos(angle) > cos(beta)``; ``"deviation"``
    penalizes ``cos(angle) < cos(beta)``, i.e. tilts beyond ``beta``.
    """
    H = as_tensor(H)
    psi = solid_mass(H) if psi is None else psi
    cos, valid = orientation_cosine(grad_m, n)
    excess = cos - math.cos(beta) if sense == "printed" else math.cos(beta) - cos
    return _gated_mean(H, torch.relu(excess) * valid, psi, flags, "orientation")


def loss_thickness(H, grad_m, t_min: float, t_max: float, psi=None, flags=None) -> torch.Tensor:
    H = as_tensor(H)
    psi = solid_mass(H) if psi is None else psi
    g = _safe_norm(as_tensor(grad_m))
    return _gated_mean(H, torch.relu(t_min - g) + torch.relu(g - t_max), psi, flags, "thickness")


def loss_yield(sigma_e, coeffs: HoffmanCoeffs) -> torch.Tensor:
    return torch.relu(hoffman_index(sigma_e, coeffs) - 1.0).sum()


def loss_volume_objective(H_e, V_e) -> torch.Tensor:
    return (as_tensor(H_e) * V_e).sum()


def loss_stiffness(solution) -> torch.Tensor:
    return solution.compliance


# ----------------------------------------------------------------------------
# totals
# ----------------------------------------------------------------------------
def active_terms(mode, objective: str = "strength") -> tuple[str, ...]:
    mode = Mode.parse(mode)
    design = ("obj", "yd") if objective == "lightweight" else ("obj", "vol")
    if mode is Mode.PLANAR:
        return design
    if mode is Mode.THREE_AXIS:
        return design + ("lc", "ort", "lt")
    return design + ("lc", "mo", "lt")


def validate_weights(mode, weights: dict, objective: str = "strength") -> None:
    """Reject nonzero weights for terms the mode/objective does not define."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    allowed = set(active_terms(mode, objective))
    bad = sorted(k for k, w in weights.items() if k not in TERMS or (w and k not in allowed))
    if bad:
        raise ValueError(f"weights {bad} are not defined for mode {Mode.parse(mode).value} "
                         f"with objective {objective}")


@dataclass
class LossBreakdown:
    l_obj: torch.Tensor
    l_vol: torch.Tensor
    l_lc: torch.Tensor
    l_mo: torch.Tensor
    l_ort: torch.Tensor
    l_lt: torch.Tensor
    l_yd: torch.Tensor
    psi: torch.Tensor
    weighted_total: torch.Tensor | None = None
    degenerate: int = 0
    evaluated: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def term(self, name: str) -> torch.Tensor:
        return getattr(self, f"l_{name}")

    def as_floats(self) -> dict[str, float]:
        out = {f"l_{k}": float(self.term(k)) for k in TERMS}
        out["psi"] = float(self.psi)
        if self.weighted_total is not None:
            out["total"] = float(self.weighted_total)
        out["degenerate"] = self.degenerate
        return out


def zero() -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def total_loss(mode, breakdown: LossBreakdown, weights: dict, objective: str = "strength") -> torch.Tensor:
    """Weighted sum of the terms defined for ``mode``; other terms never enter."""
    validate_weights(mode, weights, objective)
    total = zero()
    for k in active_terms(mode, objective):
        w = weights.get(k, 0.0)
        if w:
            total = total + w * breakdown.term(k)
    breakdown.weighted_total = total
    return total


def manufacturing_losses(samples: FieldSamples, mode, limits: ManufacturingLimits, n=None) -> dict:
    """Evaluate the manufacturability terms that ``mode`` defines.

    Terms outside the mode are returned as exact zeros and listed as not
    evaluated, so e.g. the path-curvature computation is never run for
    3-axis or planar designs.
    """
    mode = Mode.parse(mode)
    H = samples.rho
    psi = solid_mass(H)
    flags: dict = {}
    out = {"lc": zero(), "mo": zero(), "ort": zero(), "lt": zero(), "psi": psi, "evaluated": (), "degenerate": 0}
    if mode is Mode.PLANAR:
        out["flags"] = flags
        return out
    curv = surface_curvatures(samples.grad_m, samples.hess_m)
    out["lc"] = loss_local_collision(H, curv, limits.K_lc, limits.curvature_measure, psi, flags)
    out["lt"] = loss_thickness(H, samples.grad_m, limits.t_min, limits.t_max, psi, flags)
    degenerate = ~curv.valid
    evaluated = ["lc", "lt"]
    if mode is Mode.FIVE_AXIS:
        K_f, valid = path_curvature(samples.grad_a, samples.grad_m, samples.hess_a, samples.hess_m)
        out["mo"] = loss_motion(H, K_f, valid, limits.K_f_max, psi, flags)
        degenerate = degenerate | ~valid
        evaluated.append("mo")
    else:
        out["ort"] = loss_orientation(H, samples.grad_m, n, limits.beta, limits.orientation_sense, psi, flags)
        evaluated.append("ort")
    out["evaluated"] = tuple(evaluated)
    out["degenerate"] = int(degenerate.sum())
    out["flags"] = flags
    return out
