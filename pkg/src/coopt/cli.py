"""Command-line front end: ``optimize``, ``slice``, ``verify`` and ``report``.

Every command writes into a run directory and records what it wrote in
``manifest.json``.  Exit codes: 0 success, 2 configuration or input error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .fea import FEAError, verify_structure, write_gamma_csv, write_vtk_cells
from .fields import FieldTriple, Mode
from .losses import TERMS, active_terms
from .optimizer import run
from .slicer import (TripleSource, alignment_over_layers, export_layers, extract_layers, iso_fidelity,
                     layer_statistics, sample_statistics, write_histograms)

log = logging.getLogger("coopt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
GAMMA_BINS = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, np.inf])


class InputError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# run-directory helpers
# ----------------------------------------------------------------------------
def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, default=_jsonable), encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Mode):
        return o.value
    return str(o)


def _update_manifest(run_dir: Path, section: str, files, info: dict | None = None) -> dict:
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {"files": []}
    rel = [str(Path(f).relative_to(run_dir)) if Path(f).is_absolute() else str(f) for f in files]
    manifest["files"] = sorted(set(manifest.get("files", [])) | set(rel) | {"manifest.json"})
    if info is not None:
        manifest[section] = info
    _write_json(path, manifest)
    return manifest


def load_run(run_dir) -> tuple[RunConfig, FieldTriple, dict]:
    """Config, trained fields and summary of a finished ``optimize`` run."""
    run_dir = Path(run_dir)
    cfg_path, fields_path = run_dir / "config.json", run_dir / "final.fields"
    if not cfg_path.exists():
        raise InputError(f"{run_dir}: no config.json (not a run directory?)")
    if not fields_path.exists():
        raise InputError(f"{run_dir}: trained fields {fields_path.name} missing")
    cfg = load_config(cfg_path)
    triple = FieldTriple.load(fields_path)
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}
    return cfg, triple, summary


def effective_weights(mode, objective: str, applied: dict, disabled=()) -> tuple[dict, list]:
    """Weights for every loss term; terms the mode does not define are forced to zero."""
    active = set(active_terms(mode, objective))
    out = {t: (float(applied.get(t, 0.0)) if t in active and t not in disabled else 0.0) for t in TERMS}
    return out, sorted(set(TERMS) - active)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------
def cmd_optimize(config_path=None, overrides=(), out_dir=None) -> Path:
    cfg = load_config(config_path, overrides)
    run_dir = Path(out_dir or cfg.output["dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.snapshot()
    _write_json(run_dir / "config.json", cfg.document)
    _write_json(run_dir / "config.resolved.json", snapshot)
    opt, problem = cfg.optimizer, cfg.problem
    log.info("optimizing %s (%s, %s objective, seed %d, %d iterations) into %s", problem.name,
             opt.mode.value if isinstance(opt.mode, Mode) else opt.mode, opt.objective, opt.seed,
             opt.max_iterations, run_dir)

    t0 = time.perf_counter()
    files = ["config.json", "config.resolved.json"]
    try:
        result = run(problem, opt, out_dir=run_dir)
    except (FEAError, FloatingPointError):
        files += [f for f in ("checkpoint.fields", "convergence.csv") if (run_dir / f).exists()]
        _update_manifest(run_dir, "failure", files, {"config_hash": cfg.hash})
        raise
    wall = time.perf_counter() - t0
    result.record.write_csv(run_dir / "convergence.csv")
    files += ["final.fields", "convergence.csv"]
    if getattr(result, "phase1_triple", None) is not None:
        result.phase1_triple.save(run_dir / "phase1.fields")
        files.append("phase1.fields")
    if opt.checkpoint_every and (run_dir / "checkpoint.fields").exists():
        files.append("checkpoint.fields")

    weights, forced = effective_weights(problem.mode, opt.objective, result.weights, opt.disabled_terms)
    weights["obj"] = result.weights.get("obj", result.omega_obj)
    rec = result.record
    summary = {
        "problem": problem.name,
        "mode": Mode.parse(problem.mode).value,
        "objective": opt.objective,
        "sequential": opt.sequential,
        "seed": opt.seed,
        "iterations": len(rec),
        "phase_ends": result.phase_ends,
        "converged": result.converged,
        "wall_time_s": wall,
        "load_kN": problem.bc.load_magnitude_kN,
        "volume_target": problem.volume_fraction,
        "initial": {"gamma_min": rec[0].gamma_min, "gamma_min_solid": rec[0].gamma_min_solid,
                    "max_load_kN": rec[0].max_load_kN, "volume_fraction": rec[0].volume_fraction}
        if len(rec) else None,
        "final": result.final,
    }
    _write_json(run_dir / "summary.json", summary)
    files.append("summary.json")
    _update_manifest(run_dir, "optimize", files, {
        "config_hash": cfg.hash,
        "seed": opt.seed,
        "load_kN": problem.bc.load_magnitude_kN,
        "weights": weights,
        "forced_zero": forced,
        "disabled": list(opt.disabled_terms),
    })
    return run_dir


def cmd_slice(run_dir, resolution: int = 128, spacing: float | None = None, out_name: str = "layers") -> dict:
    run_dir = Path(run_dir)
    cfg, triple, _ = load_run(run_dir)
    problem = cfg.problem
    source = TripleSource(triple, problem.void_mask)
    layers, schedule, h = extract_layers(source, problem.lo, problem.hi, resolution, problem.limits,
                                         spacing=spacing)
    stats = layer_statistics(layers, problem.limits)
    e_avg, e_std = alignment_over_layers(layers)
    fidelity = max((iso_fidelity(l, h) for l in layers), default=0.0)
    planar = None
    if Mode.parse(triple.mode) is Mode.PLANAR and layers:
        n_hat = triple.n_hat().detach().numpy()
        planar = max(float(np.degrees(np.arccos(np.clip(np.abs(l.vertex_normals() @ n_hat), 0, 1))).max())
                     for l in layers)
    extra = {
        "resolution": resolution, "cell_size": h, "layer_count": len(layers),
        "expected_count": schedule.expected_count, "fiber_angle_mean_deg": e_avg,
        "fiber_angle_std_deg": e_std, "iso_fidelity": fidelity, "planar_normal_deviation_deg": planar,
    }
    out = run_dir / out_name
    manifest = export_layers(out, layers, schedule, stats, extra)
    _update_manifest(run_dir, out_name, [f"{out_name}/{f}" for f in manifest["files"]],
                     {k: manifest[k] for k in ("spacing", "violations")} | extra)
    return manifest


def cmd_verify(run_dir, load_scale="1", refine: float = 1.0, out_name: str = "verify") -> dict:
    """Failure-index map at ``load_scale`` times the design load.

    ``load_scale`` may be a number or ``"gamma"`` for the run's own
    minimum safety factor on the optimization grid.
    """
    run_dir = Path(run_dir)
    cfg, triple, summary = load_run(run_dir)
    problem, opt = cfg.problem, cfg.optimizer
    grid = problem.grid if refine == 1 else problem.grid_at(refine)
    bc = problem.bc_on(grid)
    if str(load_scale) == "gamma":
        base = verify_structure(triple, problem.material, problem.grid, problem.bc, 1.0,
                                problem.elem_void_mask(), stress_exponent=opt.stress_exponent,
                                stress_floor=opt.stress_floor)
        scale = base.gamma_min_solid
    else:
        scale = float(load_scale)
    rep = verify_structure(triple, problem.material, grid, bc, scale, problem.void_mask(grid.centers),
                           stress_exponent=opt.stress_exponent, stress_floor=opt.stress_floor)
    out = run_dir / out_name
    out.mkdir(parents=True, exist_ok=True)
    write_gamma_csv(out / "gamma.csv", grid, rep.sigma, rep.gamma_index, rep.solid)
    write_vtk_cells(out / "gamma.vtk", grid, gamma_index=rep.gamma_index, solid=rep.solid.astype(float))
    info = {"load_scale": scale, "refine": refine, "dims": list(grid.dims), "V_yd": rep.V_yd,
            "max_gamma_solid": rep.max_gamma_solid, "gamma_min_solid": rep.gamma_min_solid,
            "solid_elements": int(rep.solid.sum())}
    _write_json(out / "verify.json", info)
    _update_manifest(run_dir, out_name, [f"{out_name}/{f}" for f in ("gamma.csv", "gamma.vtk", "verify.json")],
                     info)
    return info


def _gamma_histogram(cfg: RunConfig, triple: FieldTriple) -> tuple[np.ndarray, int]:
    """Failure indices of solid elements at the run's own first-yield load."""
    p, q, s = cfg.problem, cfg.optimizer.stress_exponent, cfg.optimizer.stress_floor
    rep = verify_structure(triple, p.material, p.grid, p.bc, 1.0, p.elem_void_mask(), stress_exponent=q,
                           stress_floor=s)
    if np.isfinite(rep.gamma_min_solid):
        # the criterion has a linear part, so rescale the load and re-evaluate
        rep = verify_structure(triple, p.material, p.grid, p.bc, rep.gamma_min_solid, p.elem_void_mask(),
                               stress_exponent=q, stress_floor=s)
    vals = rep.gamma_index[rep.solid]
    over = vals > 1.0 + 1e-9
    counts = np.zeros(len(GAMMA_BINS) - 1, np.int64)
    counts[:-1], _ = np.histogram(np.clip(vals[~over], 0.0, 1.0), bins=GAMMA_BINS[:-1])
    counts[-1] = int(over.sum())
    return counts, int(rep.solid.sum())


def cmd_report(run_dirs, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for d in run_dirs:
        d = Path(d)
        cfg, triple, summary = load_run(d)
        conv = list(csv.DictReader(open(d / "convergence.csv", encoding="utf-8")))
        runs.append((d.name, d, cfg, triple, summary, conv))

    iterations = sorted({int(r["iteration"]) for *_, conv in runs for r in conv})
    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"{name}:{c}" for name, *_ in runs for c in ("max_load_kN", "phase")])
        by_run = [{int(r["iteration"]): r for r in conv} for *_, conv in runs]
        for it in iterations:
            row = [it]
            for rows in by_run:
                r = rows.get(it)
                row += [r["max_load_kN"], r["phase"]] if r else ["", ""]
            w.writerow(row)

    hist_rows, gamma_rows, table = [], [], []
    for name, d, cfg, triple, summary, conv in runs:
        layers_json = d / "layers" / "layers.json"
        if layers_json.exists():
            source = "layers"
            hist_path = d / "layers" / "histograms.csv"
            rows = list(csv.DictReader(open(hist_path, encoding="utf-8")))
            layer_count = json.loads(layers_json.read_text(encoding="utf-8"))["layer_count"]
        else:
            source = "samples"
            p = cfg.problem
            stats = sample_statistics(triple, p.samples.points.numpy(), p.limits, p.void_mask)
            tmp = out / f".{name}.hist.csv"
            write_histograms(tmp, stats)
            rows = list(csv.DictReader(open(tmp, encoding="utf-8")))
            tmp.unlink()
            layer_count = None
        hist_rows += [{"run": name, "source": source, **r} for r in rows]
        counts, n_solid = _gamma_histogram(cfg, triple)
        for lo, hi, c in zip(GAMMA_BINS[:-1], GAMMA_BINS[1:], counts):
            gamma_rows.append({"run": name, "bin_lo": lo, "bin_hi": hi, "count": int(c)})
        final = summary.get("final", {})
        table.append({
            "run": name, "problem": summary.get("problem"), "mode": summary.get("mode"),
            "objective": summary.get("objective"), "sequential": summary.get("sequential"),
            "iterations": summary.get("iterations"), "wall_time_s": summary.get("wall_time_s"),
            "layer_count": layer_count, "gamma_min_initial": (summary.get("initial") or {}).get("gamma_min"),
            "gamma_min_final": final.get("gamma_min"), "max_load_kN": final.get("max_load_kN"),
            "volume_fraction": final.get("volume_fraction"), "solid_elements": n_solid,
        })

    def dump(path, rows, header):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            w.writerows(rows)

    dump(out / "histograms.csv", hist_rows, ["run", "source", "quantity", "bin_lo", "bin_hi", "count"])
    dump(out / "gamma_histogram.csv", gamma_rows, ["run", "bin_lo", "bin_hi", "count"])
    dump(out / "summary.csv", table, list(table[0]) if table else ["run"])
    manifest = {"runs": [str(d) for _, d, *_ in runs],
                "files": ["convergence.csv", "histograms.csv", "gamma_histogram.csv", "summary.csv",
                          "report.json"]}
    _write_json(out / "report.json", manifest)
    return manifest


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--threads", type=int, default=None, help="torch intra-op threads (1 for bit-stable runs)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="train the density, layer and fiber fields")
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--problem", help="built-in problem preset (mbb-desk, cantilever-desk, l-bracket-desk)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config leaf by dotted path, e.g. optimizer.max_iterations=50")
    p.add_argument("--sequential", action="store_true", help="two-phase baseline instead of co-optimization")
    p.add_argument("--objective", choices=("strength", "stiffness", "lightweight"))
    p.add_argument("--mode", help="5axis, 3axis or 2.5axis")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="run directory (default: output.dir)")

    p = sub.add_parser("slice", help="extract curved layers from a trained run")
    p.add_argument("run_dir")
    p.add_argument("--resolution", type=int, default=128, help="cells along the longest axis")
    p.add_argument("--spacing", type=float, help="isovalue spacing (default t_min * t_max)")
    p.add_argument("--out-name", default="layers")

    p = sub.add_parser("verify", help="yield analysis of a trained run")
    p.add_argument("run_dir")
    p.add_argument("--load-scale", default="1", help="load multiplier, or 'gamma' for the run's own safety factor")
    p.add_argument("--refine", type=float, default=1.0, help="grid refinement factor per axis")
    p.add_argument("--out-name", default="verify")

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    return ap


def _optimize_overrides(args) -> list[str]:
    ov = list(args.overrides)
    if args.problem:
        ov.append(f"problem.preset={json.dumps(args.problem)}")
    if args.sequential:
        ov.append("optimizer.sequential=true")
    if args.objective:
        ov.append(f"optimizer.objective={json.dumps(args.objective)}")
    if args.mode:
        ov.append(f"optimizer.mode={json.dumps(args.mode)}")
    if args.seed is not None:
        ov.append(f"optimizer.seed={args.seed}")
    if args.iterations is not None:
        ov.append(f"optimizer.max_iterations={args.iterations}")
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        if args.command == "optimize":
            run_dir = cmd_optimize(args.config, _optimize_overrides(args), args.out)
            print(run_dir)
        elif args.command == "slice":
            m = cmd_slice(args.run_dir, args.resolution, args.spacing, args.out_name)
            print(f"{m['layer_count']} layers -> {Path(args.run_dir) / args.out_name}")
        elif args.command == "verify":
            info = cmd_verify(args.run_dir, args.load_scale, args.refine, args.out_name)
            print(json.dumps(info))
        else:
            cmd_report(args.run_dirs, args.out)
            print(args.out)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FEAError as exc:
        print(f"numerical failure: {exc} (residual {exc.residual})", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
