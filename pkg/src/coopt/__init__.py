"""Neural co-optimization of density, curved printing layers and fiber paths for composite parts."""
from .config import build_config, load_config
from .fea import VoxelGrid, verify_structure
from .fields import FieldTriple, Mode, NetworkSpec, evaluate, init_networks
from .losses import ManufacturingLimits
from .material import PRESETS, MaterialSpec, hoffman_coeffs
from .optimizer import OptimConfig, run
from .problems import PRESET_PROBLEMS, ProblemDef, get_problem
from .slicer import extract_layers

__version__ = "0.1.0"
