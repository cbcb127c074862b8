"""Zeroth-order gradient estimators built from central differences."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (InvalidArgumentError, ObjectiveFunction, RngStream, Vector,
                   gaussian_vector)

# Defaults used throughout the package.
MU_CGE = 1e-5
MU_RGE = 1e-3
SAM_RHO = 0.1
SAM_TAU = 1e-12


class EstimationError(RuntimeError):
    """A probe returned a non-finite loss."""

    def __init__(self, message: str, coordinate: Optional[int] = None) -> None:
        super().__init__(message)
        self.coordinate = coordinate


class Method(str, enum.Enum):
    RGE = "RGE"
    CGE = "CGE"
    MASKED_RGE = "MaskedRGE"


@dataclass(frozen=True)
class GradientEstimate:
    grad: Vector
    method: Method
    mu_smooth: float
    queries_used: int
    q: int = 0


def _check_mu(mu_smooth: float) -> None:
    if not mu_smooth > 0:
        raise InvalidArgumentError(f"mu_smooth must be positive, got {mu_smooth}")


def _quotient(obj: ObjectiveFunction, w: Vector, step: Vector, mu: float,
              stream: Optional[RngStream], coordinate: Optional[int] = None) -> float:
    # + and - probes share one stream so stochastic objectives see the same minibatch
    plus = obj.evaluate(w + step, stream)
    minus = obj.evaluate(w - step, stream)
    if not (math.isfinite(plus) and math.isfinite(minus)):
        where = f" at coordinate {coordinate}" if coordinate is not None else ""
        raise EstimationError(f"non-finite loss{where}", coordinate)
    return (plus - minus) / (2.0 * mu)


def cge_estimate(obj: ObjectiveFunction, w, mu_smooth: float = MU_CGE,
                 stream: Optional[RngStream] = None) -> GradientEstimate:
    """Coordinate-wise estimate; costs exactly 2d queries.

    Coordinate ``i`` is probed with substream ``stream.child(i)`` for both
    the forward and backward evaluation.
    """
    _check_mu(mu_smooth)
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    grad = np.empty(d)
    e = np.zeros(d)
    for i in range(d):
        e[i] = mu_smooth
        sub = stream.child(i) if stream is not None else None
        grad[i] = _quotient(obj, w, e, mu_smooth, sub, coordinate=i)
        e[i] = 0.0
    return GradientEstimate(grad, Method.CGE, mu_smooth, 2 * d)


def rge_estimate(obj: ObjectiveFunction, w, mu_smooth: float = MU_RGE, q: int = 1,
                 stream: Optional[RngStream] = None, mask=None, *,
                 literal_eq4: bool = False, directions=None) -> GradientEstimate:
    """Randomized estimate averaged over ``q`` Gaussian directions (2q queries).

    With a ``mask`` the probe direction is ``mask * u`` and, by default, so is
    the output direction, which keeps inactive coordinates at exactly zero.
    ``literal_eq4=True`` multiplies the difference quotient by the unmasked
    ``u`` instead.  ``directions`` (shape ``(q, d)``) overrides the sampled
    ``u`` draws.

    Draw ``j`` uses ``stream.child(j, 0)`` for ``u`` and ``stream.child(j, 1)``
    for the shared minibatch of its two probes.
    """
    _check_mu(mu_smooth)
    if int(q) != q or q < 1:
        raise InvalidArgumentError(f"q must be >= 1, got {q}")
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    omega = None
    if mask is not None:
        omega = np.asarray(getattr(mask, "active", mask), dtype=np.float64)
        if omega.shape != (d,):
            raise InvalidArgumentError(f"mask length {omega.size} != dimension {d}")
    if directions is not None:
        directions = np.asarray(directions, dtype=np.float64).reshape(q, d)
    if stream is None and directions is None:
        raise InvalidArgumentError("rge_estimate needs a stream or explicit directions")

    grad = np.zeros(d)
    for j in range(q):
        sub = stream.child(j) if stream is not None else None
        u = directions[j] if directions is not None else gaussian_vector(sub.child(0), d)
        pu = u if omega is None else omega * u
        batch = sub.child(1) if sub is not None else None
        coef = _quotient(obj, w, mu_smooth * pu, mu_smooth, batch)
        grad += coef * (u if literal_eq4 else pu)
    grad /= q
    method = Method.RGE if omega is None else Method.MASKED_RGE
    return GradientEstimate(grad, method, mu_smooth, 2 * q, q)


def sam_perturbation(grad, rho: float = SAM_RHO, tau: float = SAM_TAU) -> Vector:
    """Worst-case ascent step of radius ``rho``: rho * g / ||g||.

    Returns zeros when ``rho == 0`` or ``||g|| < tau`` (direction undefined).
    """
    g = np.asarray(grad, dtype=np.float64)
    n = float(np.linalg.norm(g))
    if rho == 0 or n < tau:
        return np.zeros_like(g)
    return (rho / n) * g
