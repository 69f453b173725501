import numpy as np
import torch

from coopt.fea import Region
from coopt.fields import Mode, init_networks
from coopt.losses import ManufacturingLimits
from coopt.material import PRESETS
from coopt.problems import ProblemDef


def tiny_problem(mode="5axis", limits=None):
    """A 4x2x2 cantilever small enough for finite differences and quick loops."""
    return ProblemDef(
        name="tiny", size=(8.0, 4.0, 4.0), dims=(4, 2, 2), volume_fraction=0.4,
        supports=[(Region((0, 0, 0), (0, 4, 4)), "xyz")],
        loads=[(Region((8, 0, 0), (8, 4, 4)), (0.0, -0.1, -0.2))],
        material=PRESETS["PLA-CF"], mode=Mode.parse(mode),
        # limits sized so every term is active on perturbed fields
        limits=limits or ManufacturingLimits(K_lc=1e-3, K_f_max=1e-3, t_min=0.5, t_max=0.7,
                                             curvature_measure="abs"),
        sample_multiplier=4)


def perturbed_triple(problem, mode, seed, width=16):
    t = init_networks(problem.network_spec(2, width), mode, seed)
    flat = t.to_flat()
    t.load_flat(flat + 0.3 * np.random.default_rng(seed).normal(size=flat.shape))
    with torch.no_grad():
        t.n.copy_(torch.tensor([0.3, -0.2, 1.0]))
    return t
