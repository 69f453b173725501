"""Training loop for the field triple.

Each iteration evaluates the fields on the sample set and at element
centers, solves the anisotropic equilibrium problem, forms the weighted loss
and takes one Adam step.  Constraint weights ramp up linearly from zero,
the objective weight is calibrated from an unconstrained pre-pass and kept
inside a fixed band, and a plateau scheduler halves the learning rate.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .fea import FEAError, StructuralResponse, structural_response
from .fields import FieldTriple, Mode, evaluate, init_networks
from .losses import (OBJECTIVES, TERMS, LossBreakdown, active_terms, loss_strength, loss_volume,
                     loss_volume_objective, loss_yield, manufacturing_losses, total_loss,
                     validate_weights)
from .material import DTYPE
from .problems import ProblemDef

log = logging.getLogger(__name__)

MANUFACTURING_TERMS = ("lc", "mo", "ort", "lt")


@dataclass
class OptimConfig:
    max_iterations: int = 400
    initial_lr: float = 1.0e-3
    min_lr: float = 1.0e-6
    plateau_patience: int = 50
    plateau_factor: float = 0.5
    weight_ramp: float = 0.05
    weight_cap: float = 10.0
    objective_band: tuple[float, float] = (0.0, 10.0)
    objective_rescale: str = "pin"
    correction_threshold: float = 1.0e-5
    p_bar: float = 6.0
    mode: Mode = Mode.FIVE_AXIS
    seed: int = 0
    sequential: bool = False
    phase2_iterations: int | None = None
    objective: str = "strength"
    disabled_terms: tuple[str, ...] = ()
    weight_caps: dict = field(default_factory=dict)
    hidden_layer_count: int = 2
    hidden_width: int = 64
    sharpness: float = 5.0
    init_scale: float = 3.0
    gamma_cap: float = 1.0e4
    stress_exponent: float | None = 1.0
    stress_floor: float = 0.01
    stop_window: int = 100
    stop_tol: float = 1.0e-7
    checkpoint_every: int = 0

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        self.objective_band = tuple(self.objective_band)
        self.disabled_terms = tuple(self.disabled_terms)

    def validate(self) -> None:
        errors = []
        if self.max_iterations < 0:
            errors.append(f"optimizer.max_iterations must be >= 0, got {self.max_iterations}")
        if not 0 < self.min_lr <= self.initial_lr:
            errors.append(f"optimizer.min_lr must lie in (0, initial_lr], got {self.min_lr}")
        if self.weight_ramp <= 0:
            errors.append(f"optimizer.weight_ramp must be > 0, got {self.weight_ramp}")
        if self.objective_band[0] < 0 or self.objective_band[1] <= self.objective_band[0]:
            errors.append(f"optimizer.objective_band must be [lo >= 0, hi > lo], got {self.objective_band}")
        if self.objective_rescale not in ("pin", "shrink"):
            errors.append(f"optimizer.objective_rescale must be 'pin' or 'shrink', got {self.objective_rescale!r}")
        if not 0 < self.plateau_factor < 1:
            errors.append(f"optimizer.plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not 0 <= self.stress_floor < 1:
            errors.append(f"optimizer.stress_floor must lie in [0, 1), got {self.stress_floor}")
        if self.p_bar <= 0:
            errors.append(f"optimizer.p_bar must be > 0, got {self.p_bar}")
        if self.objective not in OBJECTIVES:
            errors.append(f"optimizer.objective must be one of {OBJECTIVES}, got {self.objective!r}")
        bad = [t for t in self.disabled_terms if t not in TERMS]
        if bad:
            errors.append(f"optimizer.disabled_terms has unknown terms {bad}")
        try:
            validate_weights(self.mode, {k: v for k, v in self.weight_caps.items() if k != "obj"},
                             self.objective)
        except ValueError as exc:
            errors.append(f"optimizer.weights: {exc}")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["objective_band"] = list(self.objective_band)
        d["disabled_terms"] = list(self.disabled_terms)
        d["weight_caps"] = dict(self.weight_caps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"optimizer: unknown keys {unknown}")
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    phase: int
    losses: dict
    weights: dict
    total: float
    psi: float
    degenerate: int
    gamma_min: float
    gamma_min_solid: float
    max_load_kN: float
    volume_fraction: float
    lr: float
    correction: bool
    grad_norm: float
    wall_time: float

    def row(self) -> dict:
        out = {"iteration": self.iteration, "phase": self.phase}
        out.update({f"l_{k}": self.losses[k] for k in TERMS})
        out.update({f"w_{k}": self.weights.get(k, 0.0) for k in TERMS})
        out.update(total=self.total, psi=self.psi, degenerate=self.degenerate, gamma_min=self.gamma_min,
                   gamma_min_solid=self.gamma_min_solid, max_load_kN=self.max_load_kN,
                   volume_fraction=self.volume_fraction, lr=self.lr, correction=int(self.correction),
                   grad_norm=self.grad_norm, wall_time=self.wall_time)
        return out


@dataclass
class ConvergenceRecord:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([r.row()[name] for r in self.records], dtype=float)

    def write_csv(self, path) -> None:
        rows = [r.row() for r in self.records]
        if not rows:
            Path(path).write_text("iteration\n", encoding="utf-8")
            return
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


@dataclass
class Evaluation:
    """One forward pass: all raw losses plus the structural response."""

    breakdown: LossBreakdown
    response: StructuralResponse
    volume_fraction: float

    @property
    def gamma_min(self) -> float:
        return self.response.gamma_min

    @property
    def gamma_min_solid(self) -> float:
        return self.response.gamma_min_solid


@dataclass
class OptimResult:
    triple: FieldTriple
    record: ConvergenceRecord
    final: dict
    converged: bool
    phase_ends: list[int] = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    omega_obj: float = 1.0


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------
def evaluate_design(triple: FieldTriple, problem: ProblemDef, config: OptimConfig) -> Evaluation:
    """Raw loss terms of ``triple`` for the configured objective and mode."""
    mode = triple.mode
    samples = evaluate(triple, problem.samples.points, order=0 if mode is Mode.PLANAR else 2,
                       hess_a=mode is Mode.FIVE_AXIS)
    if problem.samples.void is not None:
        samples.rho = torch.where(problem.samples.void, torch.zeros_like(samples.rho), samples.rho)
    manuf = manufacturing_losses(samples, mode, problem.limits, n=triple.n)

    grid = problem.grid
    resp = structural_response(triple, problem.material, grid, problem.bc, system=problem.system,
                               void_mask=problem.elem_void_mask(), coeffs=problem.coeffs,
                               stress_exponent=config.stress_exponent, gamma_cap=config.gamma_cap,
                               stress_floor=config.stress_floor)
    V_e = grid.elem_volume
    zero = torch.zeros((), dtype=DTYPE)
    l_vol = l_yd = zero
    if config.objective == "strength":
        l_obj = loss_strength(resp.solution.gamma_e, config.p_bar)
        l_vol = loss_volume(resp.H_e, V_e, problem.V_star)
    elif config.objective == "stiffness":
        l_obj = resp.solution.compliance
        l_vol = loss_volume(resp.H_e, V_e, problem.V_star)
    else:
        l_obj = loss_volume_objective(resp.H_e, V_e) / problem.domain_volume
        l_yd = loss_yield(resp.solution.sigma_e, problem.coeffs)
    bd = LossBreakdown(l_obj=l_obj, l_vol=l_vol, l_lc=manuf["lc"], l_mo=manuf["mo"], l_ort=manuf["ort"],
                       l_lt=manuf["lt"], l_yd=l_yd, psi=manuf["psi"], degenerate=manuf["degenerate"],
                       evaluated=("obj", "vol" if config.objective != "lightweight" else "yd") + manuf["evaluated"],
                       extra={"flags": manuf.get("flags", {}), "frame_degenerate": resp.degenerate})
    vf = float(resp.H_e.detach().sum()) * V_e / problem.domain_volume
    return Evaluation(bd, resp, vf)


# ----------------------------------------------------------------------------
# weighting scheme
# ----------------------------------------------------------------------------
def calibrate_objective_weight(l_obj: float, band_hi: float = 10.0) -> float:
    """``band_hi / |L_obj|`` from the unconstrained pre-pass (1.0 if the objective vanishes)."""
    if abs(l_obj) < 1e-12:
        log.warning("objective is ~0 at calibration; using omega_obj = 1")
        return 1.0
    return band_hi / abs(l_obj)


def rescale_objective_weight(omega: float, l_obj: float, band: tuple[float, float], how: str = "pin") -> float:
    """Keep ``|omega * L_obj|`` inside the band.

    ``pin`` holds the product at the upper edge, so the objective keeps its
    pull when L_obj shrinks; ``shrink`` only ever lowers ``omega``.
    """
    if abs(l_obj) < 1e-12:
        return omega
    if how == "pin" or abs(omega * l_obj) > band[1]:
        return band[1] / abs(l_obj)
    return omega


def constraint_weights(k: int, terms, config: OptimConfig) -> dict:
    ramp = config.weight_ramp * k
    return {t: (0.0 if t in config.disabled_terms else min(ramp, config.weight_caps.get(t, config.weight_cap)))
            for t in terms}


def ramp_finished(k: int, weights: dict, config: OptimConfig) -> bool:
    caps = [config.weight_caps.get(t, config.weight_cap) for t in weights
            if t != "obj" and t not in config.disabled_terms]
    return not caps or config.weight_ramp * k >= max(caps)


# ----------------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------------
def trainable_parameters(triple: FieldTriple, freeze_rho: bool = False) -> dict[str, list[torch.Tensor]]:
    groups = triple.parameter_groups()
    if freeze_rho:
        groups.pop("rho")
    if triple.mode is Mode.PLANAR:
        groups.pop("m")
    if triple.mode is Mode.FIVE_AXIS:
        groups.pop("n")
    return groups


@dataclass
class _State:
    triple: FieldTriple
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    groups: dict
    omega_obj: float
    k: int = 0
    prev_obj: float | None = None


def _new_state(triple, config, freeze_rho, omega_obj) -> _State:
    for name, params in triple.parameter_groups().items():
        for p in params:
            p.requires_grad_(not (freeze_rho and name == "rho"))
    groups = trainable_parameters(triple, freeze_rho)
    params = [p for ps in groups.values() for p in ps]
    opt = torch.optim.Adam(params, lr=config.initial_lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=config.plateau_factor,
                                                       patience=config.plateau_patience, min_lr=config.min_lr)
    return _State(triple, opt, sched, groups, omega_obj)


def step(state: _State, problem: ProblemDef, config: OptimConfig, disabled=(), phase: int = 1,
         t0: float | None = None) -> IterationRecord:
    """One optimization iteration; returns the record of the pre-update design."""
    t0 = time.perf_counter() if t0 is None else t0
    triple = state.triple
    ev = evaluate_design(triple, problem, config)
    bd = ev.breakdown
    l_obj = float(bd.l_obj.detach())

    terms = [t for t in active_terms(triple.mode, config.objective) if t != "obj"]
    cfg = config if not disabled else _with_disabled(config, disabled)
    weights = constraint_weights(state.k, terms, cfg)
    state.omega_obj = rescale_objective_weight(state.omega_obj, l_obj, config.objective_band,
                                               config.objective_rescale)
    # a stalled objective hands the step to the constraints, but only while one of them is active;
    # otherwise the update would be zero and the stall permanent
    violated = any(weights[t] > 0 and float(bd.term(t).detach()) > 0 for t in terms)
    correction = (violated and state.prev_obj is not None
                  and abs(l_obj - state.prev_obj) < config.correction_threshold)
    weights["obj"] = 0.0 if correction else state.omega_obj
    total = total_loss(triple.mode, bd, weights, config.objective)

    state.optimizer.zero_grad(set_to_none=False)
    if total.requires_grad:
        total.backward()
    grad_sq = 0.0
    for name, params in state.groups.items():
        for p in params:
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name} parameters at iteration {state.k}")
            grad_sq += float((g * g).sum())
    state.optimizer.step()
    # the total is only comparable across iterations once the ramp has stopped
    if ramp_finished(state.k, weights, cfg):
        state.scheduler.step(float(total.detach()))

    force = float(np.linalg.norm(problem.bc.total_force)) / 1000.0
    rec = IterationRecord(
        iteration=state.k, phase=phase, losses={k: float(bd.term(k).detach()) for k in TERMS},
        weights=dict(weights), total=float(total.detach()), psi=float(bd.psi.detach()), degenerate=bd.degenerate,
        gamma_min=ev.gamma_min, gamma_min_solid=ev.gamma_min_solid, max_load_kN=ev.gamma_min * force,
        volume_fraction=ev.volume_fraction, lr=state.optimizer.param_groups[0]["lr"], correction=correction,
        grad_norm=math.sqrt(grad_sq), wall_time=time.perf_counter() - t0,
    )
    state.prev_obj = l_obj
    state.k += 1
    return rec


def _with_disabled(config: OptimConfig, extra) -> OptimConfig:
    d = config.to_dict()
    d["disabled_terms"] = sorted(set(config.disabled_terms) | set(extra))
    return OptimConfig.from_dict(d)


def final_metrics(triple: FieldTriple, problem: ProblemDef, config: OptimConfig) -> dict:
    with torch.no_grad():
        ev = evaluate_design(triple, problem, config)
    force = float(np.linalg.norm(problem.bc.total_force)) / 1000.0
    out = {f"l_{k}": float(ev.breakdown.term(k)) for k in TERMS}
    out.update(gamma_min=ev.gamma_min, gamma_min_solid=ev.gamma_min_solid, max_load_kN=ev.gamma_min * force,
               volume_fraction=ev.volume_fraction, compliance=float(ev.response.solution.compliance),
               degenerate=ev.breakdown.degenerate)
    return out


def _checkpoint(out_dir, triple, record, tag="checkpoint") -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    triple.save(out_dir / f"{tag}.fields")
    record.write_csv(out_dir / "convergence.csv")


def _phase(triple, problem, config, record, iterations, phase, freeze_rho=False, disabled=(),
           out_dir=None, start_k=0) -> tuple[_State, bool]:
    with torch.no_grad():
        pre = evaluate_design(triple, problem, config)
    omega = calibrate_objective_weight(float(pre.breakdown.l_obj), config.objective_band[1])
    state = _new_state(triple, config, freeze_rho, omega)
    history = []
    converged = False
    for i in range(iterations):
        t0 = time.perf_counter()
        try:
            rec = step(state, problem, config, disabled=disabled, phase=phase, t0=t0)
        except (FEAError, FloatingPointError):
            _checkpoint(out_dir, triple, record)
            raise
        rec.iteration = start_k + i
        record.append(rec)
        history.append(rec.total)
        if config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            _checkpoint(out_dir, triple, record)
        if rec.lr <= config.min_lr * (1 + 1e-12) and len(history) > config.stop_window:
            if history[-config.stop_window - 1] - min(history[-config.stop_window:]) < config.stop_tol:
                converged = True
                break
    return state, converged


def run(problem: ProblemDef, config: OptimConfig, triple: FieldTriple | None = None, out_dir=None) -> OptimResult:
    """Co-optimize density, layers and fibers (or run the sequential baseline)."""
    config.validate()
    if config.sequential:
        return run_sequential(problem, config, triple, out_dir)
    torch.manual_seed(config.seed)
    if triple is None:
        triple = init_networks(problem.network_spec(config.hidden_layer_count, config.hidden_width,
                                                    config.sharpness, config.init_scale),
                                 config.mode, config.seed)
    record = ConvergenceRecord()
    state, converged = _phase(triple, problem, config, record, config.max_iterations, 1, out_dir=out_dir)
    result = OptimResult(triple, record, final_metrics(triple, problem, config), converged,
                         [len(record)], weights=_last_weights(record), omega_obj=state.omega_obj)
    _checkpoint(out_dir, triple, record, tag="final")
    return result


def run_sequential(problem: ProblemDef, config: OptimConfig, triple: FieldTriple | None = None,
                   out_dir=None) -> OptimResult:
    """Phase I: design terms only.  Phase II: density frozen, full loss."""
    config.validate()
    torch.manual_seed(config.seed)
    if triple is None:
        triple = init_networks(problem.network_spec(config.hidden_layer_count, config.hidden_width,
                                                    config.sharpness, config.init_scale),
                                 config.mode, config.seed)
    record = ConvergenceRecord()
    _phase(triple, problem, config, record, config.max_iterations, 1, disabled=MANUFACTURING_TERMS,
           out_dir=out_dir)
    n1 = len(record)
    phase1 = final_metrics(triple, problem, config)
    phase1_triple = triple.clone()
    n2 = config.max_iterations if config.phase2_iterations is None else config.phase2_iterations
    state, converged = _phase(triple, problem, config, record, n2, 2, freeze_rho=True, out_dir=out_dir,
                              start_k=n1)
    for p in triple.parameter_groups()["rho"]:
        p.requires_grad_(True)
    final = final_metrics(triple, problem, config)
    final["phase1"] = phase1
    result = OptimResult(triple, record, final, converged, [n1, len(record)],
                         weights=_last_weights(record), omega_obj=state.omega_obj)
    result.phase1_triple = phase1_triple
    _checkpoint(out_dir, triple, record, tag="final")
    return result


def _last_weights(record: ConvergenceRecord) -> dict:
    return dict(record[-1].weights) if len(record) else {}
