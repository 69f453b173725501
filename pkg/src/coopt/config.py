"""Run configuration: one JSON document plus dotted-path overrides.

Schema (all sections optional)::

    {
      "problem":   {"preset": "mbb-desk", ...ProblemDef fields...},
      "material":  {"preset": "PLA-CF", ...MaterialSpec fields...},
      "network":   {"hidden_layer_count": 2, "hidden_width": 64, "sharpness": 5.0, "init_scale": 3.0},
      "optimizer": {...OptimConfig fields...},
      "limits":    {"K_lc": 0.1, "K_f_max": 0.2, "t_min": 0.4, "t_max": 0.8, "beta_deg": 60, ...},
      "output":    {"dir": "runs/mbb", "checkpoint_every": 50}
    }

A problem preset supplies every problem field; keys given next to it
override the preset.  Overrides such as ``optimizer.max_iterations=10``
replace any leaf (values are parsed as JSON when possible).
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .fields import Mode
from .losses import ManufacturingLimits
from .material import PRESETS, MaterialSpec
from .optimizer import OptimConfig
from .problems import PRESET_PROBLEMS, ProblemDef, get_problem

SECTIONS = ("problem", "material", "network", "optimizer", "limits", "output")


class ConfigError(ValueError):
    """Configuration problems; the message lists every violated rule."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form section.key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        if parts[0] not in SECTIONS:
            raise ConfigError([f"override {key!r}: unknown section {parts[0]!r}"])
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key!r}: {p!r} is not a section"])
        node[parts[-1]] = value
    return doc


@dataclass
class RunConfig:
    problem: ProblemDef
    optimizer: OptimConfig
    output: dict
    document: dict

    @property
    def hash(self) -> str:
        return content_hash(self.document)

    def snapshot(self) -> dict:
        snap = copy.deepcopy(self.document)
        snap["resolved"] = {
            "problem": self.problem.to_dict(),
            "material": self.problem.material.to_dict(),
            "limits": self.problem.limits.to_dict(),
            "optimizer": self.optimizer.to_dict(),
        }
        return snap


def content_hash(doc: dict) -> str:
    raw = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(raw).hexdigest()


def _material(section: dict, errors: list) -> MaterialSpec | None:
    section = dict(section or {})
    preset = section.pop("preset", "PLA-CF")
    if preset not in PRESETS:
        errors.append(f"material.preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return None
    base = PRESETS[preset].to_dict()
    unknown = sorted(set(section) - set(base))
    if unknown:
        errors.append(f"material: unknown keys {unknown}")
        return None
    base.update(section)
    try:
        spec = MaterialSpec.from_dict(base)
        spec.validate()
        return spec
    except (ValueError, TypeError) as exc:
        errors.append(f"material: {exc}")
        return None


def _limits(section: dict, errors: list) -> ManufacturingLimits | None:
    try:
        lim = ManufacturingLimits.from_dict(section or {})
    except TypeError as exc:
        errors.append(f"limits: {exc}")
        return None
    try:
        lim.validate()
    except ValueError as exc:
        errors.extend(str(exc).split("; "))
    return lim


def build_config(doc: dict, overrides=()) -> RunConfig:
    """Validate a config document (after overrides) and resolve it into run objects."""
    doc = apply_overrides(doc or {}, overrides)
    errors = [f"unknown section {k!r}" for k in doc if k not in SECTIONS]
    material = _material(doc.get("material"), errors)
    limits = _limits(doc.get("limits"), errors)

    opt_doc = dict(doc.get("optimizer") or {})
    if "weights" in opt_doc:
        opt_doc["weight_caps"] = opt_doc.pop("weights")
    net = dict(doc.get("network") or {})
    for key in ("hidden_layer_count", "hidden_width", "sharpness", "init_scale"):
        if key in net:
            opt_doc[key] = net.pop(key)
    net.pop("activation", None)
    if net:
        errors.append(f"network: unknown keys {sorted(net)}")
    opt = None
    try:
        opt = OptimConfig.from_dict(opt_doc)
        opt.validate()
        if opt.hidden_layer_count < 1 or opt.hidden_width < 1:
            errors.append("network: hidden_layer_count and hidden_width must be >= 1")
    except ValueError as exc:
        errors.extend(str(exc).split("; "))
    except TypeError as exc:
        errors.append(f"optimizer: {exc}")

    problem = None
    pdoc = dict(doc.get("problem") or {})
    if material is not None and limits is not None:
        preset = pdoc.pop("preset", None if "size" in pdoc else "mbb-desk")
        try:
            if preset is not None:
                if preset not in PRESET_PROBLEMS:
                    raise ValueError(f"problem.preset: unknown preset {preset!r}; choose from "
                                     f"{sorted(PRESET_PROBLEMS)}")
                base = get_problem(preset).to_dict()
                base.update(pdoc)
                pdoc = base
            problem = ProblemDef.from_dict(pdoc, material, limits)
            if opt is not None:
                problem.mode = opt.mode
            problem.validate()
        except (KeyError, TypeError) as exc:
            errors.append(f"problem: missing or malformed field {exc}")
        except ValueError as exc:
            errors.extend(str(exc).split("; "))
    if errors:
        raise ConfigError(errors)

    output = {"dir": "runs/" + problem.name, "checkpoint_every": 0}
    output.update(doc.get("output") or {})
    opt.checkpoint_every = int(output.get("checkpoint_every", 0))
    return RunConfig(problem, opt, output, doc)


def load_config(path=None, overrides=()) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return build_config(doc, overrides)


def default_document(preset: str = "mbb-desk") -> dict:
    return {
        "problem": {"preset": preset},
        "material": {"preset": "PLA-CF"},
        "network": {"hidden_layer_count": 2, "hidden_width": 64, "sharpness": 5.0, "init_scale": 3.0},
        "optimizer": {"max_iterations": 400, "mode": Mode.FIVE_AXIS.value, "seed": 0},
        "limits": {"K_lc": 0.1, "K_f_max": 0.2, "t_min": 0.4, "t_max": 0.8, "beta_deg": 60.0},
        "output": {"dir": f"runs/{preset}", "checkpoint_every": 50},
    }


__all__ = ["ConfigError", "RunConfig", "build_config", "load_config", "apply_overrides", "content_hash",
           "default_document"]
