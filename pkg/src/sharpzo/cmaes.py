"""Stage-1 search: (mu/mu_w, lambda)-CMA-ES with a sharpness-aware shift.

Every generation evaluates candidates at ``eps + theta + sigma * B D z``
where ``eps`` is the worst-case SAM perturbation at the current mean
(``eps = 0`` gives plain CMA-ES).  Selection and the distribution update use
the unshifted steps ``y = B D z``, so the mean moves by the weighted step
only: the shift changes *which* candidates win, not where the mean lands.
Parameter defaults follow Hansen's tutorial (positive log-rank weights,
CSA step-size control, rank-one + rank-mu covariance update).
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import ObjectiveFunction, RngStream, Vector, gaussian_vector
from .estimators import MU_CGE, SAM_RHO, cge_estimate, sam_perturbation

POPSIZE = 40
SIGMA0 = 0.4
EIG_FLOOR = 1e-14


class CovarianceDegenerateError(RuntimeError):
    pass


@dataclass(frozen=True)
class CmaParams:
    """Static strategy parameters for dimension ``d`` and population ``S``."""

    d: int
    S: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chiN: float
    eig_interval: int

    @classmethod
    def default(cls, d: int, S: int = POPSIZE) -> "CmaParams":
        if S < 2:
            raise ValueError(f"population size must be >= 2, got {S}")
        mu = S // 2
        raw = math.log(S / 2 + 0.5) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mueff = 1.0 / float(np.sum(weights ** 2))
        cc = (4 + mueff / d) / (d + 4 + 2 * mueff / d)
        cs = (mueff + 2) / (d + mueff + 5)
        c1 = 2 / ((d + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((d + 2) ** 2 + mueff))
        damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (d + 1)) - 1) + cs
        chiN = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))
        eig_interval = max(1, int(1 / (10 * d * (c1 + cmu))))
        return cls(d, S, mu, weights, mueff, cc, cs, c1, cmu, damps, chiN, eig_interval)


@dataclass(frozen=True)
class CmaState:
    theta: Vector
    sigma: float
    C: np.ndarray
    p_sigma: Vector
    p_c: Vector
    generation: int = 0
    # eigen cache: C ~= B diag(D^2) B^T as of generation ``eig_generation``
    B: np.ndarray = field(default=None, repr=False)
    D: Vector = field(default=None, repr=False)
    eig_generation: int = 0
    best_w: Optional[Vector] = None
    best_fitness: float = math.inf

    @classmethod
    def initial(cls, theta, sigma: float = SIGMA0) -> "CmaState":
        theta = np.array(theta, dtype=np.float64)
        d = theta.size
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        return cls(theta, float(sigma), np.eye(d), np.zeros(d), np.zeros(d), 0,
                   np.eye(d), np.ones(d), 0)

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def invsqrt(self) -> np.ndarray:
        return (self.B / self.D) @ self.B.T


@dataclass
class Candidate:
    w: Vector
    z: Vector
    y: Vector  # B D z, the unshifted step
    fitness: float = math.nan


@dataclass(frozen=True)
class StepRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    grad_norm: float
    sigma: float
    queries: int


def _refresh_eigen(state: CmaState) -> CmaState:
    C = 0.5 * (state.C + state.C.T)
    try:
        evals, B = np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        raise CovarianceDegenerateError(str(exc)) from exc
    if not np.all(np.isfinite(evals)):
        raise CovarianceDegenerateError("non-finite eigenvalues in C")
    floor = EIG_FLOOR * max(float(np.trace(C)), 0.0) / state.dim
    if evals.min() <= floor:
        evals = np.maximum(evals, floor if floor > 0 else EIG_FLOOR)
        C = (B * evals) @ B.T
        C = 0.5 * (C + C.T)
    return replace(state, C=C, B=B, D=np.sqrt(evals), eig_generation=state.generation)


def sample_population(state: CmaState, eps_star, S: int, stream: RngStream,
                      params: Optional[CmaParams] = None) -> list[Candidate]:
    """Draw S candidates ``eps_star + theta + sigma * B D z``.

    Candidate i uses ``stream.child(i)``.  The eigen cache must be current
    (``update_state`` keeps it so).
    """
    if S < 2:
        raise ValueError(f"population size must be >= 2, got {S}")
    eps_star = np.asarray(eps_star, dtype=np.float64)
    if eps_star.shape != state.theta.shape:
        raise ValueError("eps_star length differs from dimension")
    if state.B is None or not np.all(np.isfinite(state.D)):
        raise CovarianceDegenerateError("covariance eigendecomposition unavailable")
    center = eps_star + state.theta
    out = []
    for i in range(S):
        z = gaussian_vector(stream.child(i), state.dim)
        y = state.B @ (state.D * z)
        out.append(Candidate(center + state.sigma * y, z, y))
    return out


def evaluate_population(candidates: Sequence[Candidate], obj: ObjectiveFunction,
                        stream: RngStream, executor: Optional[Executor] = None) -> list[Candidate]:
    """Fill in fitness; candidate i is evaluated with ``stream.child(i)``."""
    def one(i: int) -> float:
        return obj.evaluate(candidates[i].w, stream.child(i))

    idx = range(len(candidates))
    values = list(executor.map(one, idx)) if executor is not None else [one(i) for i in idx]
    for cand, f in zip(candidates, values):
        cand.fitness = f
    return list(candidates)


def _rank(candidates: Sequence[Candidate]) -> list[int]:
    # non-finite fitness ranks last; ties keep sampling order
    keyed = [(c.fitness if math.isfinite(c.fitness) else math.inf, i)
             for i, c in enumerate(candidates)]
    return [i for _, i in sorted(keyed)]


def update_state(state: CmaState, candidates: Sequence[Candidate],
                 params: Optional[CmaParams] = None) -> CmaState:
    """One canonical CMA-ES update from evaluated candidates."""
    d = state.dim
    p = params or CmaParams.default(d, len(candidates))
    order = _rank(candidates)
    parents = [candidates[i] for i in order[: p.mu]]
    Y = np.array([c.y for c in parents])
    Z = np.array([c.z for c in parents])
    y_w = p.weights @ Y
    z_w = p.weights @ Z

    theta = state.theta + state.sigma * y_w
    gen = state.generation + 1

    # C^{-1/2} y_w = B z_w while the sampling basis is the cached one
    p_sigma = ((1 - p.cs) * state.p_sigma
               + math.sqrt(p.cs * (2 - p.cs) * p.mueff) * (state.B @ z_w))
    ps_norm = float(np.linalg.norm(p_sigma))
    hsig = (ps_norm / math.sqrt(1 - (1 - p.cs) ** (2 * gen))
            < (1.4 + 2 / (d + 1)) * p.chiN)
    p_c = (1 - p.cc) * state.p_c + hsig * math.sqrt(p.cc * (2 - p.cc) * p.mueff) * y_w

    rank_mu = (Y.T * p.weights) @ Y
    c1a = p.c1 * (1 - (1 - hsig) * p.cc * (2 - p.cc))
    C = ((1 - c1a - p.cmu) * state.C + p.c1 * np.outer(p_c, p_c) + p.cmu * rank_mu)
    C = 0.5 * (C + C.T)

    sigma = state.sigma * math.exp((p.cs / p.damps) * (ps_norm / p.chiN - 1))

    best_w, best_f = state.best_w, state.best_fitness
    top = candidates[order[0]]
    if math.isfinite(top.fitness) and top.fitness < best_f:
        best_w, best_f = top.w.copy(), top.fitness

    new = replace(state, theta=theta, sigma=sigma, C=C, p_sigma=p_sigma, p_c=p_c,
                  generation=gen, best_w=best_w, best_fitness=best_f)
    if gen - state.eig_generation >= p.eig_interval:
        new = _refresh_eigen(new)
    return new


def sharpness_step(state: CmaState, obj: ObjectiveFunction, rho: float = SAM_RHO,
                   mu_cge: float = MU_CGE, S: int = POPSIZE,
                   stream: Optional[RngStream] = None, *, params: Optional[CmaParams] = None,
                   sharp: bool = True, executor: Optional[Executor] = None
                   ) -> tuple[CmaState, StepRecord]:
    """One stage-1 generation.

    With ``sharp=True`` a CGE gradient at the mean (2d queries, substream
    ``stream.child(2)``) sets ``eps = rho * g / |g|``; ``sharp=False`` skips
    that probe and samples around the mean directly.  Sampling draws from
    ``stream.child(0)`` and fitness evaluation from ``stream.child(1)``, so
    with rho = 0 both modes produce bit-identical states.
    """
    if stream is None:
        stream = RngStream(0)
    params = params or CmaParams.default(state.dim, S)
    start = obj.counter.total_evals
    if sharp:
        g = cge_estimate(obj, state.theta, mu_cge, stream.child(2)).grad
        eps = sam_perturbation(g, rho)
        gnorm = float(np.linalg.norm(g))
    else:
        eps = np.zeros(state.dim)
        gnorm = math.nan
    cands = sample_population(state, eps, S, stream.child(0), params)
    cands = evaluate_population(cands, obj, stream.child(1), executor)
    new = update_state(state, cands, params)
    fits = np.array([c.fitness for c in cands])
    finite = fits[np.isfinite(fits)]
    rec = StepRecord(
        generation=new.generation,
        best_fitness=float(finite.min()) if finite.size else math.nan,
        mean_fitness=float(finite.mean()) if finite.size else math.nan,
        grad_norm=gnorm,
        sigma=new.sigma,
        queries=obj.counter.total_evals - start,
    )
    return new, rec
