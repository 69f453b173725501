"""Short end-to-end run: train a desk cantilever, slice it, check it for yield.

    python demos/quickstart.py [out_dir] [iterations]
"""
import json
import sys
from pathlib import Path

from coopt.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart")
iterations = sys.argv[2] if len(sys.argv) > 2 else "60"

steps = [
    ["optimize", "--problem", "cantilever-desk", "--iterations", iterations, "--out", str(out)],
    ["slice", str(out), "--resolution", "96"],
    ["verify", str(out), "--load-scale", "gamma"],
    ["report", str(out), "--out", str(out / "report")],
]
for argv in steps:
    code = main(argv)
    if code:
        sys.exit(code)

summary = json.loads((out / "summary.json").read_text())
layers = json.loads((out / "layers" / "layers.json").read_text())
print(f"gamma_min {summary['initial']['gamma_min']:.3f} -> {summary['final']['gamma_min']:.3f}, "
      f"volume fraction {summary['final']['volume_fraction']:.3f}")
print(f"{layers['layer_count']} layers, fiber off-plane angle {layers['fiber_angle_mean_deg']:.2f} deg, "
      f"violations {layers['violations']}")
