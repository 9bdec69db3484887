"""Motion-compensated reconstruction of free-breathing radial MRI with a
generative motion model, plus a motion-resolved baseline and a synthetic
benchmark with known ground truth."""

__version__ = "0.1.0"

from .baseline import BaselineConfig, xdgrasp
from .benchmark import preset, simulate
from .data import Dataset
from .engine import ReconConfig, ReconState, progressive_solve
from .metrics import Estimate, Metrics, compute_metrics
from .nudft import NUDFT, make_trajectory
from .phantom import PhantomSpec, make_ground_truth

__all__ = [
    "BaselineConfig", "Dataset", "Estimate", "Metrics", "NUDFT", "PhantomSpec",
    "ReconConfig", "ReconState", "compute_metrics", "make_ground_truth",
    "make_trajectory", "preset", "progressive_solve", "simulate", "xdgrasp",
]
