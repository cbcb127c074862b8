"""Forward-only two-stage optimization: sharpness-aware CMA-ES warm-up
followed by sparse zeroth-order SGD."""

from .core import (InvalidArgumentError, InvalidDimensionError, ObjectiveFunction,
                   QueryCounter, RngStream, axpy, dot, gaussian_vector, norm2)
from .driver import RunConfig, RunLog, fit_linear_rate, run, transition_check
from .estimators import cge_estimate, rge_estimate, sam_perturbation
from .objectives import make_prompt_task, make_quadratic, make_two_basin
from .pruning import PruneMask, build_mask, fisher_diag, magnitude_mask, zscore

__version__ = "0.1.0"

__all__ = [
    "InvalidArgumentError", "InvalidDimensionError", "ObjectiveFunction", "QueryCounter",
    "RngStream", "axpy", "dot", "gaussian_vector", "norm2",
    "RunConfig", "RunLog", "fit_linear_rate", "run", "transition_check",
    "cge_estimate", "rge_estimate", "sam_perturbation",
    "make_prompt_task", "make_quadratic", "make_two_basin",
    "PruneMask", "build_mask", "fisher_diag", "magnitude_mask", "zscore",
]
