"""Shared types for forward-only optimization: random substreams, query
accounting, the black-box objective contract and a few vector helpers."""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import numpy.typing as npt

Vector = npt.NDArray[np.float64]


class InvalidDimensionError(ValueError):
    """Raised when a dimension is not a positive integer."""


class InvalidArgumentError(ValueError):
    """Raised on mismatched vector lengths or malformed arguments."""


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random substream.

    A stream is identified by a root ``seed`` and a tuple ``key`` of integer
    labels.  ``child(i)`` appends a label, so a tree of independent streams
    can be derived without ever sharing generator state between consumers.
    Two streams with the same (seed, key) always reproduce the same draws.
    """

    seed: int
    key: tuple[int, ...] = ()

    @property
    def stream_id(self) -> tuple[int, ...]:
        return self.key

    def child(self, *labels: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.key)
        return np.random.default_rng(ss)


def gaussian_vector(stream: RngStream, d: int) -> Vector:
    """Return ``d`` i.i.d. standard-normal draws from ``stream``."""
    if int(d) != d or d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    return stream.generator().standard_normal(int(d))


def as_vector(values, d: Optional[int] = None) -> Vector:
    """Validate and copy ``values`` as a finite float64 parameter vector."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size < 1:
        raise InvalidDimensionError("parameter vector must have length >= 1")
    if d is not None and v.size != d:
        raise InvalidArgumentError(f"expected length {d}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("parameter vector contains non-finite entries")
    return v


def _check_lengths(x: Vector, y: Vector) -> None:
    if np.shape(x) != np.shape(y):
        raise InvalidArgumentError(f"length mismatch: {np.shape(x)} vs {np.shape(y)}")


def axpy(a: float, x, y) -> Vector:
    """a*x + y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_lengths(x, y)
    return a * x + y


def dot(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_lengths(x, y)
    return float(np.dot(x, y))


def norm2(x) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


class QueryCounter:
    """Thread-safe count of objective evaluations, broken down by stage."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._total = 0
        self._per_stage: dict[str, int] = defaultdict(int)
        self._stage = "default"

    @property
    def total_evals(self) -> int:
        return self._total

    @property
    def per_stage(self) -> dict[str, int]:
        with self._lock:
            return dict(self._per_stage)

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self._total += n
            self._per_stage[self._stage] += n

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        prev = self._stage
        self._stage = name
        try:
            yield
        finally:
            self._stage = prev


class ObjectiveFunction:
    """Black-box loss with query accounting.

    Subclasses implement ``_loss(w, rng)``, where ``rng`` is a fresh
    generator for the supplied stream (``None`` means the noise-free,
    full-data loss).  ``evaluate`` is the only counted entry point; the
    monitoring helpers (``loss``, ``validation_metric``) are free.
    """

    name = "objective"
    stochastic = False

    def __init__(self, dim: int, optimum_hint: Optional[float] = None) -> None:
        if int(dim) != dim or dim < 1:
            raise InvalidDimensionError(f"dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.optimum_hint = optimum_hint
        self.counter = QueryCounter()

    def _loss(self, w: Vector, rng: Optional[np.random.Generator]) -> float:
        raise NotImplementedError

    def evaluate(self, w, stream: Optional[RngStream] = None) -> float:
        """One forward pass.  Same (w, stream) gives the same value."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise InvalidArgumentError(f"expected shape ({self.dim},), got {w.shape}")
        self.counter.increment()
        rng = stream.generator() if (stream is not None and self.stochastic) else None
        return float(self._loss(w, rng))

    def loss(self, w) -> float:
        """Noise-free loss; not counted as a query."""
        return float(self._loss(np.asarray(w, dtype=np.float64), None))

    def validation_metric(self, w) -> float:
        """Higher-is-better deterministic score.  Defaults to the negated loss."""
        return -self.loss(w)

    def init_point(self, stream: Optional[RngStream] = None, std: float = 0.02) -> Vector:
        """Starting iterate: zeros, or N(0, std^2) per coordinate from ``stream``."""
        if stream is None:
            return np.zeros(self.dim)
        return std * gaussian_vector(stream, self.dim)

    def descriptor(self) -> dict:
        return {"name": self.name, "dim": self.dim}


class FunctionObjective(ObjectiveFunction):
    """Wraps a plain callable ``f(w) -> float`` as a deterministic objective."""

    def __init__(self, fn, dim: int, optimum_hint: Optional[float] = None) -> None:
        super().__init__(dim, optimum_hint)
        self.fn = fn
        self.name = getattr(fn, "__name__", "function")

    def _loss(self, w, rng):
        return self.fn(w)
