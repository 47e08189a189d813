"""Motor unit decomposition of high-density EMG and linear decoding of joint kinematics."""

from __future__ import annotations

__version__ = "0.1.0"

from .bss import decompose
from .config import RunConfig, load_config
from .decode import fit_decoder, project
from .errors import MyoDecodeError
from .evaluation import multivariate_r2, mux_study, reduced_set_sweep, thresholding_comparison
from .sim import build_scene

__all__ = [
    "MyoDecodeError",
    "RunConfig",
    "build_scene",
    "decompose",
    "fit_decoder",
    "load_config",
    "multivariate_r2",
    "mux_study",
    "project",
    "reduced_set_sweep",
    "thresholding_comparison",
]
