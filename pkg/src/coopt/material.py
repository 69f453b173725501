"""Orthotropic elasticity, Voigt rotations and the Hoffman failure criterion.

Voigt order used throughout the package is ``(xx, yy, zz, xy, yz, zx)``.
Strains are engineering strains (shear slots hold ``2 * eps_ij``), so the
stress-strain energy pairing ``sigma . eps`` is exact in this notation.

Units: moduli are stored in GPa on :class:`MaterialSpec` (as they are
usually quoted) and converted to MPa when the stiffness matrix is built, so
that stresses come out in MPa for lengths in mm and forces in N.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch

DTYPE = torch.float64

#: Voigt slot -> tensor index pair
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0))

EPS_A = 1e-9
GAMMA_CAP = 1e4
FRAME_EPS = 1e-8


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


@dataclass(frozen=True)
class MaterialSpec:
    """Orthotropic elastic constants and strengths in the material frame.

    Axis 1 is the fiber direction, axis 2 the in-layer transverse direction
    and axis 3 the layer normal.  ``nu = (nu_xy, nu_yz, nu_xz)`` are major
    Poisson ratios (``nu_ij / E_i = nu_ji / E_j``) and ``G = (G_xy, G_yz,
    G_zx)`` follows the Voigt shear order.
    """

    name: str
    E: tuple[float, float, float]
    nu: tuple[float, float, float]
    G: tuple[float, float, float]
    tensile: tuple[float, float, float]
    compressive: tuple[float, float, float]
    shear_strength: tuple[float, float, float]
    E_min_ratio: float = 1e-4
    notes: str = ""

    def validate(self) -> None:
        for label, values in (("E", self.E), ("G", self.G)):
            if min(values) <= 0:
                raise ValueError(f"material.{label}: moduli must be strictly positive, got {values}")
        for label, values in (
            ("tensile", self.tensile),
            ("compressive", self.compressive),
            ("shear_strength", self.shear_strength),
        ):
            if min(values) <= 0:
                raise ValueError(f"material.{label}: strengths must be strictly positive, got {values}")
        if not 0.0 < self.E_min_ratio < 1.0:
            raise ValueError(f"material.E_min_ratio must lie in (0, 1), got {self.E_min_ratio}")
        eig = np.linalg.eigvalsh(orthotropic_stiffness(self).numpy())
        if eig.min() <= 0:
            raise ValueError("material: orthotropic stiffness matrix is not positive definite")

    @property
    def E_max(self) -> float:
        """Largest Young's modulus (GPa), the reference for the SIMP floor."""
        return max(self.E)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MaterialSpec":
        data = dict(data)
        for key in ("E", "nu", "G", "tensile", "compressive", "shear_strength"):
            data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


# Moduli and strengths are the measured filament values.  Poisson ratios and
# shear moduli are not measured values; they are placeholders required to
# build the stiffness matrix.
_PLACEHOLDER = "nu and G are placeholder values, not measured"

PLA_CF = MaterialSpec(
    name="PLA-CF",
    E=(7.68, 3.24, 3.16),
    nu=(0.35, 0.35, 0.35),
    G=(2.4, 1.2, 2.4),
    tensile=(67.6, 33.7, 28.3),
    compressive=(85.2, 61.3, 63.3),
    shear_strength=(49.1, 14.4, 45.1),
    notes=_PLACEHOLDER,
)

PLA = MaterialSpec(
    name="PLA",
    E=(2.86, 2.92, 2.94),
    nu=(0.35, 0.35, 0.35),
    G=(1.06, 1.06, 1.06),
    tensile=(42.4, 31.8, 27.9),
    compressive=(53.7, 44.4, 47.4),
    shear_strength=(24.2, 15.4, 20.2),
    notes=_PLACEHOLDER,
)

PRESETS = {"PLA-CF": PLA_CF, "PLA": PLA}


def orthotropic_stiffness(spec: MaterialSpec) -> torch.Tensor:
    """6x6 stiffness of the solid material in its own frame (MPa)."""
    Ex, Ey, Ez = (1000.0 * e for e in spec.E)
    nu_xy, nu_yz, nu_xz = spec.nu
    S = np.zeros((6, 6))
    S[0, 0], S[1, 1], S[2, 2] = 1 / Ex, 1 / Ey, 1 / Ez
    S[0, 1] = S[1, 0] = -nu_xy / Ex
    S[1, 2] = S[2, 1] = -nu_yz / Ey
    S[0, 2] = S[2, 0] = -nu_xz / Ex
    for k, g in enumerate(spec.G):
        S[3 + k, 3 + k] = 1 / (1000.0 * g)
    C = np.linalg.inv(S)
    return torch.as_tensor(0.5 * (C + C.T), dtype=DTYPE)


def isotropic_stiffness(E: float, nu: float) -> torch.Tensor:
    """Isotropic 6x6 stiffness for modulus ``E`` (same units as returned)."""
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    C = torch.zeros(6, 6, dtype=DTYPE)
    C[:3, :3] = lam
    C[range(3), range(3)] = lam + 2 * mu
    C[range(3, 6), range(3, 6)] = mu
    return C


@dataclass(frozen=True)
class HoffmanCoeffs:
    Q: torch.Tensor = field(repr=False)
    q: torch.Tensor = field(repr=False)


def hoffman_coeffs(spec: MaterialSpec) -> HoffmanCoeffs:
    """Expand the Hoffman criterion into ``Gamma = s^T Q s + q^T s``."""
    strengths = np.array([*spec.tensile, *spec.compressive, *spec.shear_strength], dtype=float)
    if np.any(strengths <= 0):
        raise ValueError("Hoffman criterion needs strictly positive strengths")
    (Xt, Yt, Zt), (Xc, Yc, Zc) = spec.tensile, spec.compressive
    Sxy, Syz, Szx = spec.shear_strength
    ixx, iyy, izz = 1 / (Xt * Xc), 1 / (Yt * Yc), 1 / (Zt * Zc)
    c1 = 0.5 * (iyy + izz - ixx)  # (sy - sz)^2
    c2 = 0.5 * (izz + ixx - iyy)  # (sz - sx)^2
    c3 = 0.5 * (ixx + iyy - izz)  # (sx - sy)^2
    Q = np.zeros((6, 6))
    Q[:3, :3] = [
        [c2 + c3, -c3, -c2],
        [-c3, c1 + c3, -c1],
        [-c2, -c1, c1 + c2],
    ]
    Q[3, 3], Q[4, 4], Q[5, 5] = 1 / Sxy**2, 1 / Syz**2, 1 / Szx**2
    q = np.array([1 / Xt - 1 / Xc, 1 / Yt - 1 / Yc, 1 / Zt - 1 / Zc, 0.0, 0.0, 0.0])
    return HoffmanCoeffs(torch.as_tensor(Q, dtype=DTYPE), torch.as_tensor(q, dtype=DTYPE))


def hoffman_index(sigma, coeffs: HoffmanCoeffs) -> torch.Tensor:
    """Failure index for stresses ``(..., 6)`` given in the material frame."""
    s = as_tensor(sigma)
    return torch.einsum("...i,ij,...j->...", s, coeffs.Q, s) + s @ coeffs.q


def safety_factor(sigma, coeffs: HoffmanCoeffs, gamma_cap: float = GAMMA_CAP,
                  eps_A: float = EPS_A) -> torch.Tensor:
    """Load multiplier that brings each stress onto the failure surface.

    Solves ``A g^2 + B g = 1`` for the positive root.  When ``A <= eps_A``
    the stress is (numerically) zero and ``gamma_cap`` is returned instead of
    infinity.  Both root forms are used so that neither sign of ``B``
    suffers from cancellation; gradients stay finite on the capped branch.
    """
    s = as_tensor(sigma)
    A = torch.einsum("...i,ij,...j->...", s, coeffs.Q, s)
    B = s @ coeffs.q
    active = A > eps_A
    A_safe = torch.where(active, A, torch.ones_like(A))
    B_safe = torch.where(active, B, torch.ones_like(B))
    root = torch.sqrt(B_safe * B_safe + 4.0 * A_safe)
    gamma = torch.where(B_safe >= 0, 2.0 / (B_safe + root), (root - B_safe) / (2.0 * A_safe))
    return torch.where(active, gamma, torch.full_like(gamma, gamma_cap))


@dataclass
class MaterialFrame:
    """Batch of rotation matrices; column k is material axis k in global coordinates."""

    R: torch.Tensor
    degenerate: torch.Tensor

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())


def _normalize(v: torch.Tensor, eps: float = 1e-300) -> tuple[torch.Tensor, torch.Tensor]:
    norm = torch.sqrt(torch.clamp((v * v).sum(-1), min=eps))
    return v / norm[..., None], norm


def material_frame(f, grad_a, grad_m, eps: float = FRAME_EPS) -> MaterialFrame:
    """Orthonormal right-handed frame (fiber, in-layer transverse, layer normal).

    ``grad_a`` is accepted for interface symmetry; the second axis is rebuilt
    as ``n x f`` because ``grad_a`` is in general not orthogonal to ``grad_m``.
    Degenerate points (``|grad_m|`` or ``|f|`` below ``eps``) get the identity
    frame and are flagged.
    """
    f, grad_m = as_tensor(f), as_tensor(grad_m)
    n_hat, n_norm = _normalize(grad_m)
    f_perp = f - (f * n_hat).sum(-1, keepdim=True) * n_hat
    f_hat, f_norm = _normalize(f_perp)
    degenerate = (n_norm < eps) | (torch.linalg.vector_norm(f, dim=-1) < eps) | (f_norm < eps)
    t_hat = torch.linalg.cross(n_hat, f_hat, dim=-1)
    R = torch.stack([f_hat, t_hat, n_hat], dim=-1)
    eye = torch.eye(3, dtype=DTYPE).expand_as(R)
    R = torch.where(degenerate[..., None, None], eye, R)
    return MaterialFrame(R, degenerate)


_I = [p[0] for p in VOIGT_PAIRS]
_J = [p[1] for p in VOIGT_PAIRS]


def voigt_rotation(frame) -> torch.Tensor:
    """Bond stress transformation from the material frame to global axes.

    For a stress ``s`` in the material frame, ``T @ s`` is the Voigt packing
    of ``R S R^T``.  Accepts a :class:`MaterialFrame` or raw ``(..., 3, 3)``
    rotation matrices.
    """
    R = frame.R if isinstance(frame, MaterialFrame) else as_tensor(frame)
    Ri = R[..., _I, :]  # (..., 6, 3): row i of each output pair
    Rj = R[..., _J, :]
    # normal columns: R_ik R_jk ; shear columns (k, l): R_ik R_jl + R_il R_jk
    normal = Ri * Rj
    Rik, Ril = Ri[..., _I[3:]], Ri[..., _J[3:]]
    Rjk, Rjl = Rj[..., _I[3:]], Rj[..., _J[3:]]
    shear = Rik * Rjl + Ril * Rjk
    return torch.cat([normal, shear], dim=-1)


def rotated_constitutive(C: torch.Tensor, T: torch.Tensor, scale=1.0) -> torch.Tensor:
    """Global-frame stiffness ``scale * T C T^T`` for material stiffness ``C``.

    ``T^T`` is the inverse of the engineering-strain transform, so this is
    the energy-consistent form of ``T C T^-1`` and stays symmetric.
    """
    C = as_tensor(C)
    if not torch.allclose(C, C.T, rtol=1e-10, atol=0.0):
        raise ValueError("constitutive matrix must be symmetric")
    if torch.linalg.eigvalsh(C).min() <= 0:
        raise ValueError("constitutive matrix must be positive definite")
    T = as_tensor(T)
    out = T @ C @ T.transpose(-1, -2)
    scale = as_tensor(scale)
    return out * scale[..., None, None] if scale.dim() else out * scale


def mandel(C: torch.Tensor) -> torch.Tensor:
    """Mandel (Kelvin) form of a Voigt stiffness; its spectrum is rotation invariant."""
    w = torch.tensor([1.0, 1.0, 1.0, 2**0.5, 2**0.5, 2**0.5], dtype=DTYPE)
    return C * w[:, None] * w[None, :]


def tensor_to_voigt(S: torch.Tensor) -> torch.Tensor:
    """Pack a symmetric stress tensor ``(..., 3, 3)`` into Voigt form."""
    return S[..., _I, _J]


def voigt_to_tensor(s: torch.Tensor) -> torch.Tensor:
    s = as_tensor(s)
    S = torch.zeros(*s.shape[:-1], 3, 3, dtype=DTYPE)
    for k, (i, j) in enumerate(VOIGT_PAIRS):
        S[..., i, j] = s[..., k]
        S[..., j, i] = s[..., k]
    return S
