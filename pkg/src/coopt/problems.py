"""Problem definitions and the built-in desk-scale presets."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import torch

from .fea import BoundaryConditions, LinearSystem, Region, VoxelGrid, bc_from_regions
from .fields import Mode, NetworkSpec
from .losses import ManufacturingLimits, SampleSet, sample_set
from .material import PRESETS, MaterialSpec, hoffman_coeffs


def _region(d) -> Region:
    if isinstance(d, Region):
        return d
    return Region(tuple(map(float, d["lo"])), tuple(map(float, d["hi"])))


@dataclass
class ProblemDef:
    """A design domain with supports, loads, material and manufacturing limits.

    ``supports`` holds ``(Region, axes)`` pairs, ``loads`` holds
    ``(Region, (Fx, Fy, Fz) kN)`` pairs and ``voids`` lists passive regions
    that are kept empty.
    """

    name: str
    size: tuple[float, float, float]
    dims: tuple[int, int, int]
    volume_fraction: float
    supports: list
    loads: list
    material: MaterialSpec
    mode: Mode = Mode.FIVE_AXIS
    limits: ManufacturingLimits = field(default_factory=ManufacturingLimits)
    voids: list = field(default_factory=list)
    sample_multiplier: int = 2
    sample_seed: int = 0

    def validate(self) -> None:
        errors = []
        if not 0 < self.volume_fraction <= 1:
            errors.append(f"problem.volume_fraction must lie in (0, 1], got {self.volume_fraction}")
        if any(s <= 0 for s in self.size):
            errors.append(f"problem.size must be positive, got {self.size}")
        if any(int(d) < 1 for d in self.dims):
            errors.append(f"problem.dims must be >= 1, got {self.dims}")
        if not self.supports:
            errors.append("problem.supports is empty")
        if not self.loads:
            errors.append("problem.loads is empty")
        try:
            self.limits.validate()
        except ValueError as exc:
            errors.append(str(exc))
        try:
            self.material.validate()
        except ValueError as exc:
            errors.append(f"material: {exc}")
        if not errors:
            try:
                VoxelGrid.for_box((0, 0, 0), self.size, self.dims)
                self.bc
            except ValueError as exc:
                errors.append(f"problem: {exc}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def lo(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.size, float)

    @cached_property
    def grid(self) -> VoxelGrid:
        return VoxelGrid.for_box(self.lo, self.hi, self.dims)

    def grid_at(self, factor: float) -> VoxelGrid:
        return self.grid.refined(factor)

    def bc_on(self, grid: VoxelGrid) -> BoundaryConditions:
        return bc_from_regions(grid, [(_region(r), ax) for r, ax in self.supports],
                               [(_region(r), tuple(f)) for r, f in self.loads])

    @cached_property
    def bc(self) -> BoundaryConditions:
        return self.bc_on(self.grid)

    @cached_property
    def system(self) -> LinearSystem:
        return LinearSystem(self.grid, self.bc.fixed_dofs)

    @cached_property
    def coeffs(self):
        return hoffman_coeffs(self.material)

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def V_star(self) -> float:
        return self.volume_fraction * self.domain_volume

    def void_mask(self, points) -> np.ndarray | None:
        if not self.voids:
            return None
        x = np.asarray(points)
        mask = np.zeros(len(x), bool)
        for r in self.voids:
            r = _region(r)
            mask |= np.all((x >= np.asarray(r.lo)) & (x <= np.asarray(r.hi)), axis=1)
        return mask

    def elem_void_mask(self, grid: VoxelGrid | None = None):
        return self.void_mask((grid or self.grid).centers)

    @cached_property
    def samples(self) -> SampleSet:
        s = sample_set(self.lo, self.hi, self.grid.n_elems, self.sample_multiplier, self.sample_seed)
        mask = self.void_mask(s.points.numpy())
        if mask is not None:
            s.void = torch.as_tensor(mask)
        return s

    def network_spec(self, hidden_layer_count=2, hidden_width=64, sharpness=5.0, init_scale=1.0) -> NetworkSpec:
        return NetworkSpec(hidden_layer_count, hidden_width, "silu", tuple(self.lo), tuple(self.hi), sharpness,
                           init_scale)

    def with_overrides(self, **kw) -> "ProblemDef":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        def reg(r):
            r = _region(r)
            return {"lo": list(r.lo), "hi": list(r.hi)}
        return {
            "name": self.name,
            "size": list(self.size),
            "dims": list(self.dims),
            "volume_fraction": self.volume_fraction,
            "supports": [{"region": reg(r), "axes": ax} for r, ax in self.supports],
            "loads": [{"region": reg(r), "force_kN": list(f)} for r, f in self.loads],
            "voids": [reg(r) for r in self.voids],
            "mode": Mode.parse(self.mode).value,
            "sample_multiplier": self.sample_multiplier,
            "sample_seed": self.sample_seed,
        }

    @classmethod
    def from_dict(cls, d: dict, material: MaterialSpec, limits: ManufacturingLimits) -> "ProblemDef":
        return cls(
            name=d.get("name", "custom"),
            size=tuple(map(float, d["size"])),
            dims=tuple(map(int, d["dims"])),
            volume_fraction=float(d["volume_fraction"]),
            supports=[(_region(s["region"]), s["axes"]) for s in d["supports"]],
            loads=[(_region(s["region"]), tuple(map(float, s["force_kN"]))) for s in d["loads"]],
            material=material,
            mode=Mode.parse(d.get("mode", "5axis")),
            limits=limits,
            voids=[_region(r) for r in d.get("voids", [])],
            sample_multiplier=int(d.get("sample_multiplier", 2)),
            sample_seed=int(d.get("sample_seed", 0)),
        )


def _box(lo, hi) -> Region:
    return Region(tuple(map(float, lo)), tuple(map(float, hi)))


# Load magnitudes below were chosen so the untrained design (uniform H = 0.5,
# fibers along +x) starts with a minimum safety factor of roughly one.
def mbb_desk(**kw) -> ProblemDef:
    L, W, Ht = 135.0, 45.0, 45.0
    h = L / 36
    return ProblemDef(
        name="mbb-desk", size=(L, W, Ht), dims=(36, 12, 12), volume_fraction=0.25,
        supports=[(_box((0, 0, 0), (2 * h, W, 0)), "xyz"),
                  (_box((L - 2 * h, 0, 0), (L, W, 0)), "yz")],
        loads=[(_box((L / 2 - h, 0, Ht), (L / 2 + h, W, Ht)), (0.0, 0.0, -MBB_LOAD_KN))],
        material=PRESETS["PLA-CF"], **kw)


def cantilever_desk(**kw) -> ProblemDef:
    L, W, Ht = 120.0, 40.0, 40.0
    h = L / 30
    return ProblemDef(
        name="cantilever-desk", size=(L, W, Ht), dims=(30, 10, 10), volume_fraction=0.3,
        supports=[(_box((0, 0, 0), (0, W, Ht)), "xyz")],
        loads=[(_box((L, W / 2 - h, 0), (L, W / 2 + h, 2 * h)), (0.0, 0.0, -CANTILEVER_LOAD_KN))],
        material=PRESETS["PLA-CF"], **kw)


def l_bracket_desk(**kw) -> ProblemDef:
    S, T = 80.0, 20.0
    h = S / 20
    return ProblemDef(
        name="l-bracket-desk", size=(S, T, S), dims=(20, 5, 20), volume_fraction=0.3,
        supports=[(_box((0, 0, S), (S / 2 - h, T, S)), "xyz")],
        loads=[(_box((S, 0, S / 2 - 2 * h), (S, T, S / 2 - 2 * h)), (0.0, 0.0, -L_BRACKET_LOAD_KN))],
        voids=[_box((S / 2, -1, S / 2), (S + 1, T + 1, S + 1))],
        material=PRESETS["PLA-CF"], **kw)


MBB_LOAD_KN = 7.0
CANTILEVER_LOAD_KN = 0.75
L_BRACKET_LOAD_KN = 0.5

PRESET_PROBLEMS = {
    "mbb-desk": mbb_desk,
    "cantilever-desk": cantilever_desk,
    "l-bracket-desk": l_bracket_desk,
}


def get_problem(name: str, **kw) -> ProblemDef:
    try:
        return PRESET_PROBLEMS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; presets are {sorted(PRESET_PROBLEMS)}") from None
