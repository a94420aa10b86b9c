"""Policy decomposition: enumerate, estimate and verify lower-dimensional control policies."""

from .decomp import Decomposition, SubPolicyNode, count_pure, enumerate_pure, estimate_compute_time
from .lqr import err_lqr, lqr_saturated_error
from .systems import ControlSystem, load_benchmark, load_system

__all__ = [
    "ControlSystem", "Decomposition", "SubPolicyNode", "count_pure", "enumerate_pure",
    "err_lqr", "estimate_compute_time", "load_benchmark", "load_system", "lqr_saturated_error",
]
__version__ = "0.1.0"
