"""Online sparse GP learning of control-barrier discrepancies with a robust safety filter.

The learner is a variational sparse GP with exponential forgetting and an
adaptive inducing set; its affine-in-control predictions tighten a
high-order control barrier constraint that a small second-order cone
program enforces at every control step.
"""

from .estimator import AFVSGPRegressor, DenseGPRegressor, SparseGPRegressor
from .kernels import BaseKernel, CompositeKernel
from .safety_filter import BetaConfig, compute_beta, filter_control, solve
from .sparse_gp import ModelState, NumericalError

__version__ = "0.1.0"

__all__ = [
    "AFVSGPRegressor",
    "BaseKernel",
    "BetaConfig",
    "CompositeKernel",
    "DenseGPRegressor",
    "ModelState",
    "NumericalError",
    "SparseGPRegressor",
    "compute_beta",
    "filter_control",
    "solve",
]
