"""Coordinate masks for sparse zeroth-order updates.

The Z-pruning score of coordinate i is ``w[i]**2 * z(F)[i]`` where ``F`` is a
diagonal Fisher estimate (mean squared CGE gradient over a few minibatches)
and ``z`` standardizes a vector to zero mean / unit population std.  The
lowest-scoring fraction of coordinates is switched off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InvalidArgumentError, ObjectiveFunction, RngStream, Vector
from .estimators import MU_CGE, cge_estimate

DEFAULT_SPARSITY = 0.5


@dataclass(frozen=True)
class PruneMask:
    active: np.ndarray  # bool, length d
    scores: Vector
    sparsity: float
    built_at_step: int = 0

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    @classmethod
    def dense(cls, d: int, step: int = 0) -> "PruneMask":
        return cls(np.ones(d, dtype=bool), np.zeros(d), 0.0, step)


def zscore(v) -> Vector:
    """(v - mean) / std with the population std; zeros if v is constant."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 1:
        raise InvalidArgumentError("zscore needs a non-empty vector")
    centered = v - v.mean()
    sd = float(np.sqrt(np.mean(centered * centered)))
    if sd == 0.0:
        return np.zeros_like(v)
    return centered / sd


def _literal_zscore(g2: Vector, g: Vector) -> Vector:
    # standardizes g^2 with the statistics of g itself
    sd = float(np.std(g))
    if sd == 0.0:
        return np.zeros_like(g2)
    return (g2 - float(np.mean(g))) / sd


def fisher_diag(obj: ObjectiveFunction, w, mu_cge: float = MU_CGE, batches: int = 1,
                stream: Optional[RngStream] = None, *, return_grads: bool = False):
    """Mean of squared CGE gradients over ``batches`` minibatch draws.

    Batch ``b`` uses ``stream.child(b)``; costs ``batches * 2d`` queries.
    With ``return_grads`` the mean (unsquared) gradient is returned as well.
    """
    if int(batches) != batches or batches < 1:
        raise InvalidArgumentError(f"batches must be >= 1, got {batches}")
    w = np.asarray(w, dtype=np.float64)
    sq = np.zeros(w.size)
    mean_g = np.zeros(w.size)
    for b in range(batches):
        sub = stream.child(b) if stream is not None else None
        g = cge_estimate(obj, w, mu_cge, sub).grad
        sq += g * g
        mean_g += g
    sq /= batches
    mean_g /= batches
    return (sq, mean_g) if return_grads else sq


def _select(scores: Vector, sparsity: float) -> np.ndarray:
    if not 0.0 <= sparsity < 1.0:
        raise InvalidArgumentError(f"sparsity must be in [0, 1), got {sparsity}")
    d = scores.size
    n_off = int(round(sparsity * d))
    active = np.ones(d, dtype=bool)
    if n_off:
        # stable sort: among equal scores the lower index is pruned first
        order = np.argsort(scores, kind="stable")
        active[order[:n_off]] = False
    return active


def build_mask(w, fisher, sparsity: float = DEFAULT_SPARSITY, step: int = 0, *,
               literal_eq5: bool = False, grad_mean=None) -> PruneMask:
    """Z-pruning mask from weights and a Fisher diagonal.

    ``literal_eq5`` standardizes the squared gradients with the mean/std of
    the raw gradient ``grad_mean`` rather than of the squared vector.
    """
    w = np.asarray(w, dtype=np.float64)
    fisher = np.asarray(fisher, dtype=np.float64)
    if w.shape != fisher.shape:
        raise InvalidArgumentError("w and fisher lengths differ")
    if literal_eq5:
        if grad_mean is None:
            raise InvalidArgumentError("literal_eq5 needs the raw gradient")
        z = _literal_zscore(fisher, np.asarray(grad_mean, dtype=np.float64))
    else:
        z = zscore(fisher)
    scores = w * w * z
    return PruneMask(_select(scores, sparsity), scores, float(sparsity), step)


def magnitude_mask(w, sparsity: float = DEFAULT_SPARSITY, step: int = 0) -> PruneMask:
    """Baseline mask keeping the largest-|w| coordinates."""
    scores = np.abs(np.asarray(w, dtype=np.float64))
    return PruneMask(_select(scores, sparsity), scores, float(sparsity), step)
