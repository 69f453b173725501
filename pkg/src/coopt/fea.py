"""Voxel-grid finite element analysis with per-element orthotropic frames.

Elements are 8-node trilinear hexahedra on a regular grid with cubic cells.
Element stiffness matrices are linear in the rotated constitutive matrix, so
they are formed by contracting ``C_rot`` against precomputed quadrature
tensors.  The displacement solve is wrapped as an autograd function whose
backward pass is the adjoint solve: ``K lam = dL/dU`` followed by
``dL/dK_e = -lam_e u_e^T``, so gradients flow to every quantity that built
``K`` without ever forming ``K^-1``.
"""
from __future__ import annotations

import glob
import logging
import os
import site
import sys
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

from .fields import FieldTriple, evaluate
from .material import (DTYPE, HoffmanCoeffs, MaterialSpec, as_tensor, hoffman_coeffs, hoffman_index,
                       material_frame, orthotropic_stiffness, rotated_constitutive, safety_factor,
                       voigt_rotation)

log = logging.getLogger(__name__)

PENALTY = 3.0
_CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                     (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])


class FEAError(RuntimeError):
    """Raised when the equilibrium system cannot be solved."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# ----------------------------------------------------------------------------
# grid and boundary conditions
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    h: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.dims) < 1 or self.h <= 0:
            raise ValueError(f"invalid grid dims={self.dims} h={self.h}")

    @classmethod
    def for_box(cls, lo, hi, dims) -> "VoxelGrid":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        h = (hi - lo) / np.asarray(dims)
        if not np.allclose(h, h[0], rtol=1e-9):
            raise ValueError(f"grid {dims} over box {lo}-{hi} does not give cubic cells")
        return cls(tuple(int(d) for d in dims), float(h[0]), tuple(lo))

    @property
    def n_elems(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.dims
        return (nx + 1) * (ny + 1) * (nz + 1)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def elem_volume(self) -> float:
        return self.h**3

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.origin, float)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.h * np.asarray(self.dims)

    def node_id(self, i, j, k):
        _, ny, nz = self.dims
        return (np.asarray(i) * (ny + 1) + np.asarray(j)) * (nz + 1) + np.asarray(k)

    @cached_property
    def elem_ijk(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1).reshape(-1, 3)

    @cached_property
    def elem_nodes(self) -> np.ndarray:
        ijk = self.elem_ijk
        return np.stack([self.node_id(*(ijk + c).T) for c in _CORNERS], 1)

    @cached_property
    def edof(self) -> np.ndarray:
        return (3 * self.elem_nodes[:, :, None] + np.arange(3)).reshape(-1, 24)

    @cached_property
    def nodes(self) -> np.ndarray:
        nx, ny, nz = self.dims
        ijk = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"), -1)
        return self.lo + self.h * ijk.reshape(-1, 3)

    @cached_property
    def centers(self) -> np.ndarray:
        return self.lo + self.h * (self.elem_ijk + 0.5)

    def nodes_in_box(self, lo, hi, tol=None) -> np.ndarray:
        tol = 1e-6 * self.h if tol is None else tol
        x = self.nodes
        inside = np.all((x >= np.asarray(lo) - tol) & (x <= np.asarray(hi) + tol), axis=1)
        return np.flatnonzero(inside)

    def refined(self, factor: float) -> "VoxelGrid":
        """Finer grid over the same box, about ``factor`` times as many cells per axis.

        The count along the shortest axis is rounded up until every axis gets
        a whole number of cubic cells.
        """
        if factor <= 0:
            raise ValueError(f"refinement factor must be positive, got {factor}")
        d0 = min(self.dims)
        n = max(1, int(round(d0 * factor)))
        while any(d * n % d0 for d in self.dims):
            n += 1
        return VoxelGrid.for_box(self.lo, self.hi, tuple(d * n // d0 for d in self.dims))


@dataclass
class BoundaryConditions:
    """Fixed DOFs and nodal loads.  ``F`` is stored in N (input helpers take kN)."""

    fixed_dofs: np.ndarray
    F: np.ndarray

    def validate(self, grid: VoxelGrid) -> None:
        fixed = np.unique(self.fixed_dofs)
        if len(self.F) != grid.n_dofs:
            raise ValueError(f"load vector has {len(self.F)} entries, grid has {grid.n_dofs} dofs")
        loaded = np.flatnonzero(self.F)
        if np.intersect1d(fixed, loaded).size:
            raise ValueError("fixed and loaded dofs overlap")
        # the six rigid-body modes must all be restrained
        x = grid.nodes - grid.nodes.mean(0)
        modes = np.zeros((grid.n_dofs, 6))
        for a in range(3):
            modes[a::3, a] = 1.0
        for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
            modes[a::3, 3 + k] = -x[:, b]
            modes[b::3, 3 + k] = x[:, a]
        if np.linalg.matrix_rank(modes[fixed]) < 6:
            raise ValueError("boundary conditions leave rigid-body modes unconstrained")

    @property
    def total_force(self) -> np.ndarray:
        """Resultant applied force vector (N)."""
        return self.F.reshape(-1, 3).sum(0)

    @property
    def load_magnitude_kN(self) -> float:
        return float(np.linalg.norm(self.total_force)) / 1000.0

    def scaled(self, factor: float) -> "BoundaryConditions":
        return BoundaryConditions(self.fixed_dofs, self.F * factor)


@dataclass(frozen=True)
class Region:
    """Axis-aligned box in mm, used to pick grid nodes for supports and loads."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


def bc_from_regions(grid: VoxelGrid, supports, loads) -> BoundaryConditions:
    """Build boundary conditions from region descriptions.

    ``supports`` is a list of ``(Region, axes)`` with axes a subset of
    ``"xyz"``; ``loads`` is a list of ``(Region, force_kN)`` where the total
    force vector is shared equally by the nodes of the region.
    """
    fixed = []
    for region, axes in supports:
        nodes = grid.nodes_in_box(region.lo, region.hi)
        if nodes.size == 0:
            raise ValueError(f"support region {region} selects no nodes on grid {grid.dims}")
        for ax in axes:
            fixed.append(3 * nodes + "xyz".index(ax))
    F = np.zeros(grid.n_dofs)
    for region, force in loads:
        nodes = grid.nodes_in_box(region.lo, region.hi)
        if nodes.size == 0:
            raise ValueError(f"load region {region} selects no nodes on grid {grid.dims}")
        for ax in range(3):
            F[3 * nodes + ax] += 1000.0 * force[ax] / nodes.size
    bc = BoundaryConditions(np.unique(np.concatenate(fixed)) if fixed else np.zeros(0, int), F)
    bc.validate(grid)
    return bc


# ----------------------------------------------------------------------------
# element level
# ----------------------------------------------------------------------------
def modulus_interpolation(rho_projected, p: float = PENALTY, E_max: float = 1.0, E_min_ratio: float = 1e-4):
    """SIMP modulus ``E_min + H^p (E_max - E_min)`` with ``E_min = E_min_ratio * E_max``."""
    H = as_tensor(rho_projected)
    E_min = E_min_ratio * E_max
    return E_min + H**p * (E_max - E_min)


def _shape_grads(xi) -> np.ndarray:
    """dN/dxi (8, 3) of the trilinear shape functions at reference point ``xi``."""
    s = 2 * _CORNERS - 1
    xi = np.asarray(xi, float)
    g = np.empty((8, 3))
    for d in range(3):
        o1, o2 = [k for k in range(3) if k != d]
        g[:, d] = s[:, d] * (1 + s[:, o1] * xi[o1]) * (1 + s[:, o2] * xi[o2]) / 8
    return g


def strain_matrix(xi, h: float) -> np.ndarray:
    """Engineering-strain matrix B (6, 24) at reference point ``xi`` for cell size ``h``."""
    dN = _shape_grads(xi) * (2.0 / h)
    B = np.zeros((6, 24))
    for a in range(8):
        dx, dy, dz = dN[a]
        c = 3 * a
        B[0, c], B[1, c + 1], B[2, c + 2] = dx, dy, dz
        B[3, c], B[3, c + 1] = dy, dx
        B[4, c + 1], B[4, c + 2] = dz, dy
        B[5, c], B[5, c + 2] = dz, dx
    return B


_GAUSS = np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)]) / np.sqrt(3)


def stiffness_basis(h: float) -> np.ndarray:
    """Tensor ``M`` (36, 576) with ``vec(K_e) = vec(C_rot) @ M`` (2x2x2 Gauss)."""
    detJ = (h / 2) ** 3
    M = np.zeros((6, 6, 24, 24))
    for xi in _GAUSS:
        B = strain_matrix(xi, h)
        M += detJ * np.einsum("ia,jb->ijab", B, B)
    return M.reshape(36, 576)


def element_stiffness(C_rot, h: float) -> torch.Tensor:
    """Hexahedral stiffness (..., 24, 24) for constitutive matrices (..., 6, 6)."""
    C = as_tensor(C_rot)
    M = torch.as_tensor(stiffness_basis(h), dtype=DTYPE)
    return (C.reshape(*C.shape[:-2], 36) @ M).reshape(*C.shape[:-2], 24, 24)


# ----------------------------------------------------------------------------
# global system
# ----------------------------------------------------------------------------
def _find_mkl() -> str | None:
    if os.environ.get("PYPARDISO_MKL_RT"):
        return os.environ["PYPARDISO_MKL_RT"]
    roots = [sys.prefix, os.path.join(sys.prefix, "local"), site.getuserbase(), *site.getsitepackages()]
    for root in roots:
        hits = sorted(glob.glob(os.path.join(root, "**", "libmkl_rt.so*"), recursive=True), key=len)
        if hits:
            return hits[0]
    return None


def _pardiso_solver():
    lib = _find_mkl()
    if lib:
        os.environ.setdefault("PYPARDISO_MKL_RT", lib)
    try:
        import pypardiso
    except (ImportError, OSError):
        return None
    return pypardiso.PyPardisoSolver(mtype=2)


class LinearSystem:
    """Sparse stiffness on the free DOFs of a grid, with a reusable factorization.

    ``backend`` is ``"pardiso"`` (MKL, symmetric positive definite), ``"splu"``
    (SuperLU), ``"cg"`` (Jacobi-preconditioned conjugate gradients) or
    ``"auto"`` which prefers pardiso and falls back to splu.
    """

    def __init__(self, grid: VoxelGrid, fixed_dofs, backend: str = "auto", tol: float = 1e-8,
                 maxiter: int = 20000):
        self.grid, self.tol, self.maxiter = grid, tol, maxiter
        ndof = grid.n_dofs
        free = np.ones(ndof, bool)
        free[np.asarray(fixed_dofs, int)] = False
        self.free = np.flatnonzero(free)
        self.n_free = len(self.free)
        fmap = -np.ones(ndof, np.int64)
        fmap[self.free] = np.arange(self.n_free)
        fe = fmap[grid.edof]  # (E, 24)
        rows = np.repeat(fe, 24, axis=1).ravel()
        cols = np.tile(fe, (1, 24)).ravel()
        self._upper = backend in ("pardiso", "auto")
        self._solver = None
        if backend in ("pardiso", "auto"):
            self._solver = _pardiso_solver()
            if self._solver is None:
                if backend == "pardiso":
                    raise FEAError("pardiso backend requested but MKL/pypardiso is not available")
                self._upper = False
        self.backend = "pardiso" if self._solver is not None else ("splu" if backend == "auto" else backend)
        keep = (rows >= 0) & (cols >= 0)
        if self._upper:
            keep &= rows <= cols
        self._entries = np.flatnonzero(keep)
        key = rows[keep] * self.n_free + cols[keep]
        uniq, self._slot = np.unique(key, return_inverse=True)
        self._rows, self._cols = uniq // self.n_free, uniq % self.n_free
        indptr = np.zeros(self.n_free + 1, np.int64)
        np.add.at(indptr, self._rows + 1, 1)
        self._indptr = np.cumsum(indptr)
        self.K = None
        self._lu = None

    def assemble(self, ke: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._slot, weights=ke.reshape(-1)[self._entries], minlength=len(self._rows))
        self.K = sp.csr_matrix((data, self._cols.astype(np.int32), self._indptr.astype(np.int32)),
                               shape=(self.n_free, self.n_free))
        self.K.has_sorted_indices = True
        self._lu = None
        if self.backend == "pardiso":
            try:
                self._solver.factorize(self.K)
            except Exception as exc:  # pypardiso raises its own error type
                raise FEAError(f"stiffness factorization failed (singular system?): {exc}") from exc
        elif self.backend == "splu":
            K = self._full()
            try:
                self._lu = spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise FEAError(f"stiffness matrix is singular: {exc}") from exc
        return self.K

    def _full(self) -> sp.csr_matrix:
        if not self._upper:
            return self.K
        diag = sp.diags(self.K.diagonal())
        return (self.K + self.K.T - diag).tocsr()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if not self._upper:
            return self.K @ x
        return self.K @ x + self.K.T @ x - self.K.diagonal() * x

    def solve_free(self, b: np.ndarray) -> np.ndarray:
        if not np.any(b):
            return np.zeros_like(b)
        if self.backend == "pardiso":
            try:
                x = self._solver.solve(self.K, b)
            except Exception as exc:
                raise FEAError(f"pardiso solve failed: {exc}") from exc
        elif self.backend == "splu":
            x = self._lu.solve(b)
        else:
            K = self._full()
            M = sp.diags(1.0 / K.diagonal())
            x, info = spla.cg(K, b, rtol=self.tol, maxiter=self.maxiter, M=M)
            if info != 0:
                res = np.linalg.norm(K @ x - b) / np.linalg.norm(b)
                raise FEAError(f"CG did not converge in {self.maxiter} iterations", residual=res)
        if not np.all(np.isfinite(x)):
            raise FEAError("linear solve produced non-finite values (singular system?)")
        return x

    def solve(self, F: np.ndarray) -> np.ndarray:
        U = np.zeros(self.grid.n_dofs)
        U[self.free] = self.solve_free(F[self.free])
        return U

    def residual(self, U: np.ndarray, F: np.ndarray) -> float:
        r = self.matvec(U[self.free]) - F[self.free]
        nf = np.linalg.norm(F[self.free])
        return float(np.linalg.norm(r) / nf) if nf > 0 else float(np.linalg.norm(r))


class _Equilibrium(torch.autograd.Function):
    @staticmethod
    def forward(ctx, ke, F, system):
        system.assemble(ke.detach().numpy())
        U = system.solve(F.detach().numpy())
        ctx.system = system
        U_t = torch.as_tensor(U, dtype=DTYPE)
        ctx.save_for_backward(U_t)
        return U_t

    @staticmethod
    def backward(ctx, grad_U):
        (U,) = ctx.saved_tensors
        system = ctx.system
        lam = torch.as_tensor(system.solve(grad_U.detach().numpy()), dtype=DTYPE)
        edof = torch.as_tensor(system.grid.edof)
        lam_e, u_e = lam[edof], U[edof]
        grad_ke = -lam_e[:, :, None] * u_e[:, None, :]
        return grad_ke, lam, None


def solve_equilibrium(ke: torch.Tensor, F, system: LinearSystem) -> torch.Tensor:
    """Differentiable ``U = K(ke)^-1 F`` with zero displacement on fixed DOFs."""
    return _Equilibrium.apply(ke, as_tensor(F), system)


@dataclass
class SystemSolution:
    U: torch.Tensor
    strain: torch.Tensor          # (E, 6) engineering strain at element centers, global axes
    sigma_global: torch.Tensor    # (E, 6)
    sigma_e: torch.Tensor         # (E, 6) in the material frame
    compliance: torch.Tensor
    gamma_e: torch.Tensor | None = None
    residual: float = 0.0
    system: LinearSystem | None = field(default=None, repr=False)


def center_strain_matrix(h: float) -> torch.Tensor:
    return torch.as_tensor(strain_matrix((0.0, 0.0, 0.0), h), dtype=DTYPE)


def assemble_and_solve(grid: VoxelGrid, C_rot, bc: BoundaryConditions, T=None,
                       coeffs: HoffmanCoeffs | None = None, system: LinearSystem | None = None,
                       backend: str = "auto", tol: float = 1e-8, gamma_cap: float = 1e4) -> SystemSolution:
    """Assemble the global stiffness, solve for displacements and recover stresses.

    ``C_rot`` (E, 6, 6) are the global-frame constitutive matrices (already
    scaled by the interpolated modulus).  When the Bond matrices ``T`` are
    given, element stresses are rotated back into the material frame, and
    with ``coeffs`` the per-element safety factors are returned as well.
    """
    C_rot = as_tensor(C_rot)
    if system is None:
        system = LinearSystem(grid, bc.fixed_dofs, backend=backend, tol=tol)
    ke = element_stiffness(C_rot, grid.h)
    F = torch.as_tensor(bc.F, dtype=DTYPE)
    U = solve_equilibrium(ke, F, system)
    residual = system.residual(U.detach().numpy(), bc.F)
    if residual > max(tol, 1e-6) * 10 and system.backend == "cg":
        raise FEAError(f"solver residual {residual:.2e} above tolerance", residual=residual)
    u_e = U[torch.as_tensor(grid.edof)]
    strain = u_e @ center_strain_matrix(grid.h).T
    sigma_g = torch.einsum("eij,ej->ei", C_rot, strain)
    sigma_m = sigma_g if T is None else torch.linalg.solve(as_tensor(T), sigma_g)
    sol = SystemSolution(U=U, strain=strain, sigma_global=sigma_g, sigma_e=sigma_m,
                         compliance=F @ U, residual=residual, system=system)
    if coeffs is not None:
        sol.gamma_e = safety_factor(sigma_m, coeffs, gamma_cap=gamma_cap)
    return sol


# ----------------------------------------------------------------------------
# fields -> structure
# ----------------------------------------------------------------------------
SOLID = 0.5
STRESS_EXPONENT = 1.0
STRESS_FLOOR = 0.01
YIELD_TOL = 1e-9


@dataclass
class StructuralResponse:
    solution: SystemSolution
    H_e: torch.Tensor
    T: torch.Tensor
    degenerate: int
    mask: torch.Tensor | None = None

    @property
    def solid(self) -> torch.Tensor:
        return self.H_e.detach() >= SOLID

    @property
    def gamma_min(self) -> float:
        return float(self.solution.gamma_e.detach().min())

    @property
    def gamma_min_solid(self) -> float:
        g = self.solution.gamma_e.detach()[self.solid]
        return float(g.min()) if g.numel() else float("inf")


def structural_response(triple: FieldTriple, material: MaterialSpec, grid: VoxelGrid, bc: BoundaryConditions,
                        system: LinearSystem | None = None, void_mask=None, penalty: float = PENALTY,
                        stress_exponent: float | None = STRESS_EXPONENT, coeffs: HoffmanCoeffs | None = None,
                        gamma_cap: float = 1e4, stress_floor: float = STRESS_FLOOR) -> StructuralResponse:
    """Evaluate the fields at element centers and run the anisotropic analysis.

    Element stresses in the material frame are ``h^q C0 T^T eps`` with
    ``h = s + (1 - s) H``: the solid material stress at the element strain,
    relaxed by ``h^q``.  With ``q = penalty`` and ``s = 0`` this is the
    physical SIMP stress; smaller ``q`` makes intermediate densities look
    overstressed, which is what drives the strength objective towards crisp
    solid/void designs.  The floor ``s`` (well above ``E_min^(1/q)``) keeps
    void elements that would have to carry load overstressed, so an empty
    domain cannot pose as a safe one.  ``None`` selects the physical stress.
    ``void_mask`` (E,) marks passive void elements whose density is forced
    to zero.
    """
    s = evaluate(triple, grid.centers, order=1)
    H_e = s.rho
    mask = None
    if void_mask is not None:
        mask = torch.as_tensor(void_mask, dtype=torch.bool)
        H_e = torch.where(mask, torch.zeros_like(H_e), H_e)
    frame = material_frame(s.fiber, s.grad_a, s.grad_m)
    T = voigt_rotation(frame)
    scale = modulus_interpolation(H_e, penalty, 1.0, material.E_min_ratio)
    C0 = orthotropic_stiffness(material)
    C_rot = rotated_constitutive(C0, T, scale)
    coeffs = hoffman_coeffs(material) if coeffs is None else coeffs
    sol = assemble_and_solve(grid, C_rot, bc, system=system)
    relax = scale if stress_exponent is None else (stress_floor + (1 - stress_floor) * H_e)**stress_exponent
    eps_m = torch.einsum("ei,eij->ej", sol.strain, T)  # T^T eps, material-frame engineering strain
    sol.sigma_e = relax[:, None] * (eps_m @ C0)
    sol.gamma_e = safety_factor(sol.sigma_e, coeffs, gamma_cap=gamma_cap)
    return StructuralResponse(sol, H_e, T, frame.degenerate_count, mask)


@dataclass
class VerifyReport:
    grid: VoxelGrid
    load_scale: float
    gamma_index: np.ndarray      # (E,) failure index per element
    sigma: np.ndarray            # (E, 6) material-frame stresses
    solid: np.ndarray            # (E,) bool
    V_yd: float                  # yielded fraction of solid volume
    max_gamma_solid: float
    gamma_min_solid: float       # load multiplier at first yield (unit load)


def verify_structure(triple: FieldTriple, material: MaterialSpec, grid: VoxelGrid, bc: BoundaryConditions,
                     load_scale: float = 1.0, void_mask=None, backend: str = "auto",
                     stress_exponent: float | None = STRESS_EXPONENT,
                     stress_floor: float = STRESS_FLOOR) -> VerifyReport:
    """Failure-index map and yielded solid volume at ``load_scale`` times the design load."""
    with torch.no_grad():
        resp = structural_response(triple, material, grid, bc, void_mask=void_mask,
                                   system=LinearSystem(grid, bc.fixed_dofs, backend=backend),
                                   stress_exponent=stress_exponent, stress_floor=stress_floor)
    coeffs = hoffman_coeffs(material)
    sigma = resp.solution.sigma_e * load_scale
    gamma_index = hoffman_index(sigma, coeffs).numpy()
    solid = resp.solid.numpy()
    n_solid = int(solid.sum())
    yielded = (gamma_index > 1 + YIELD_TOL) & solid
    return VerifyReport(
        grid=grid, load_scale=load_scale, gamma_index=gamma_index, sigma=sigma.numpy(), solid=solid,
        V_yd=float(yielded.sum() / n_solid) if n_solid else 0.0,
        max_gamma_solid=float(gamma_index[solid].max()) if n_solid else 0.0,
        gamma_min_solid=resp.gamma_min_solid,
    )


# ----------------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------------
def write_gamma_csv(path, grid: VoxelGrid, sigma, gamma_index, solid=None) -> None:
    sigma = np.asarray(sigma)
    cols = ["element", "x", "y", "z", "s_xx", "s_yy", "s_zz", "s_xy", "s_yz", "s_zx", "gamma_index"]
    if solid is not None:
        cols.append("solid")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for e in range(grid.n_elems):
            row = [str(e), *(f"{v:.6g}" for v in grid.centers[e]), *(f"{v:.8g}" for v in sigma[e]),
                   f"{float(gamma_index[e]):.8g}"]
            if solid is not None:
                row.append(str(int(solid[e])))
            fh.write(",".join(row) + "\n")


def write_vtk_cells(path, grid: VoxelGrid, **cell_data) -> None:
    """Legacy-ASCII structured-points file with scalar cell data."""
    nx, ny, nz = grid.dims
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\ncoopt cell data\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n")
        fh.write("ORIGIN {} {} {}\n".format(*grid.origin))
        fh.write(f"SPACING {grid.h} {grid.h} {grid.h}\n")
        fh.write(f"CELL_DATA {grid.n_elems}\n")
        # VTK orders cells with x fastest; our element index has z fastest
        order = np.arange(grid.n_elems).reshape(nx, ny, nz).transpose(2, 1, 0).ravel()
        for name, values in cell_data.items():
            values = np.asarray(values, float)[order]
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(f"{v:.8g}" for v in values) + "\n")


__all__ = [
    "FEAError", "VoxelGrid", "BoundaryConditions", "Region", "bc_from_regions", "modulus_interpolation",
    "strain_matrix", "stiffness_basis", "element_stiffness", "LinearSystem", "solve_equilibrium",
    "SystemSolution", "assemble_and_solve", "write_gamma_csv", "write_vtk_cells", "StructuralResponse",
    "structural_response", "VerifyReport", "verify_structure",
]
