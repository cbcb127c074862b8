"""Synthetic black-box problems with known ground truth."""

from __future__ import annotations

import math

import numpy as np

from .core import InvalidArgumentError, ObjectiveFunction, Vector


class QuadraticObjective(ObjectiveFunction):
    """L(w) = 1/2 (w - w*)^T H (w - w*) plus optional minibatch noise.

    H = Q diag(lam) Q^T with eigenvalues geometrically spaced over
    [1, condition_number] (so pl_constant = 1 and L_smooth = condition_number)
    in a seed-dependent coordinate order; Q = I unless ``rotate``.

    The noisy evaluation adds ``noise_std * (xi_0 + xi^T x)`` with
    x = w - w*, xi ~ N(0, I) drawn from the evaluation stream.  The constant
    term is loss noise; the linear term is gradient noise, which survives
    the matched-minibatch central difference.

    ``skew > 0`` replaces each curvature term 1/2 lam y^2 by
    lam (exp(s y) - 1 - s y) / s^2, a smooth convex function with the same
    minimizer and Hessian at the optimum but a non-zero third derivative.
    """

    name = "quadratic"

    def __init__(self, d: int, condition_number: float = 1.0, noise_std: float = 0.0,
                 seed: int = 0, *, rotate: bool = False, skew: float = 0.0,
                 w_star_scale: float = 1.0) -> None:
        super().__init__(d, optimum_hint=0.0)
        if condition_number < 1:
            raise InvalidArgumentError("condition_number must be >= 1")
        if noise_std < 0:
            raise InvalidArgumentError("noise_std must be >= 0")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x51,)))
        lam = np.geomspace(1.0, condition_number, d) if d > 1 else np.ones(1)
        self.eigenvalues = rng.permutation(lam)
        self.w_star = w_star_scale * rng.standard_normal(d)
        if rotate:
            q, r = np.linalg.qr(rng.standard_normal((d, d)))
            self.Q = q * np.sign(np.diag(r))
        else:
            self.Q = None
        self.condition_number = float(condition_number)
        self.noise_std = float(noise_std)
        self.skew = float(skew)
        self.seed = seed
        self.rotate = rotate
        self.w_star_scale = w_star_scale
        self.stochastic = noise_std > 0

    @property
    def pl_constant(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def L_smooth(self) -> float:
        return float(self.eigenvalues.max())

    @property
    def hessian(self) -> np.ndarray:
        if self.Q is None:
            return np.diag(self.eigenvalues)
        return (self.Q * self.eigenvalues) @ self.Q.T

    def _coords(self, x: Vector) -> Vector:
        return x if self.Q is None else self.Q.T @ x

    def _curvature(self, y: Vector) -> float:
        if self.skew == 0.0:
            return 0.5 * float(np.dot(self.eigenvalues, y * y))
        s = self.skew
        return float(np.dot(self.eigenvalues, np.expm1(s * y) - s * y)) / (s * s)

    def _loss(self, w, rng):
        x = w - self.w_star
        val = self._curvature(self._coords(x))
        if rng is not None and self.noise_std > 0:
            xi = rng.standard_normal(self.dim + 1)
            val += self.noise_std * (xi[0] + float(np.dot(xi[1:], x)))
        return val

    def gradient(self, w) -> Vector:
        """Exact gradient of the noise-free loss."""
        x = np.asarray(w, dtype=np.float64) - self.w_star
        y = self._coords(x)
        if self.skew == 0.0:
            gy = self.eigenvalues * y
        else:
            gy = self.eigenvalues * np.expm1(self.skew * y) / self.skew
        return gy if self.Q is None else self.Q @ gy

    def descriptor(self) -> dict:
        return {"name": self.name, "d": self.dim, "condition_number": self.condition_number,
                "noise_std": self.noise_std, "seed": self.seed, "rotate": self.rotate,
                "skew": self.skew, "w_star_scale": self.w_star_scale}


def make_quadratic(d: int, condition_number: float = 1.0, noise_std: float = 0.0,
                   seed: int = 0, **kwargs) -> QuadraticObjective:
    return QuadraticObjective(d, condition_number, noise_std, seed, **kwargs)


class TwoBasinObjective(ObjectiveFunction):
    """Plateau with a narrow deep well at ``a`` and a wide shallow well at ``b``.

        L(w) = c - alpha * G_a(w) - beta * G_b(w),
        G_x(w) = exp(-|w - x|^2 / (2 s_x^2))

    ``alpha`` and ``beta`` solve the 2x2 system L(a) = -depth_gap, L(b) = 0,
    so the well values hold up to rounding even though the Gaussian tails
    overlap.  The sharp width is chosen so that the Hessian ratio at the two
    centers is ``curvature_ratio`` (with a 1% margin).
    """

    name = "two_basin"

    def __init__(self, d: int, curvature_ratio: float = 100.0, depth_gap: float = 0.1,
                 seed: int = 0, *, separation: float = 3.0, flat_width: float = 1.0,
                 plateau: float = 1.0, center_shift: float = 0.0) -> None:
        super().__init__(d, optimum_hint=-depth_gap)
        if curvature_ratio < 50:
            raise InvalidArgumentError("curvature_ratio must be >= 50")
        if depth_gap <= 0:
            raise InvalidArgumentError("depth_gap must be > 0")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x2B,)))
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        # positive shift moves the origin (and thus the start) toward the sharp well
        self.a = (0.5 * separation - center_shift) * direction
        self.b = (-0.5 * separation - center_shift) * direction
        self.center_shift = float(center_shift)
        self.curvature_ratio = float(curvature_ratio)
        self.depth_gap = float(depth_gap)
        self.separation = float(separation)
        self.plateau = float(plateau)
        self.seed = seed
        self.s_b = float(flat_width)

        # alpha / beta ~ (c + gap) / c; the fixed point settles in a few rounds
        s_a = self.s_b / math.sqrt(1.01 * curvature_ratio * plateau / (plateau + depth_gap))
        for _ in range(20):
            self.s_a = s_a
            self.alpha, self.beta = self._amplitudes()
            s_a = self.s_b * math.sqrt(self.alpha / (1.01 * curvature_ratio * self.beta))
        self.s_a = s_a
        self.alpha, self.beta = self._amplitudes()

    def _amplitudes(self) -> tuple[float, float]:
        gba = self._gauss(self.a, self.b, self.s_b)
        gab = self._gauss(self.b, self.a, self.s_a)
        c = self.plateau
        # c - alpha - beta*gba = -gap ; c - alpha*gab - beta = 0
        m = np.array([[1.0, gba], [gab, 1.0]])
        rhs = np.array([c + self.depth_gap, c])
        alpha, beta = np.linalg.solve(m, rhs)
        return float(alpha), float(beta)

    @staticmethod
    def _gauss(w, center, width) -> float:
        diff = np.asarray(w) - center
        return math.exp(-float(np.dot(diff, diff)) / (2.0 * width * width))

    def _loss(self, w, rng):
        return (self.plateau - self.alpha * self._gauss(w, self.a, self.s_a)
                - self.beta * self._gauss(w, self.b, self.s_b))

    def gradient(self, w) -> Vector:
        w = np.asarray(w, dtype=np.float64)
        ga = self._gauss(w, self.a, self.s_a)
        gb = self._gauss(w, self.b, self.s_b)
        return (self.alpha * ga * (w - self.a) / self.s_a ** 2
                + self.beta * gb * (w - self.b) / self.s_b ** 2)

    def basin(self, w) -> str:
        """'sharp' where the narrow well dominates the loss, else 'flat'."""
        w = np.asarray(w, dtype=np.float64)
        la = math.log(self.alpha) - float(np.sum((w - self.a) ** 2)) / (2 * self.s_a ** 2)
        lb = math.log(self.beta) - float(np.sum((w - self.b) ** 2)) / (2 * self.s_b ** 2)
        return "sharp" if la > lb else "flat"

    def descriptor(self) -> dict:
        return {"name": self.name, "d": self.dim, "curvature_ratio": self.curvature_ratio,
                "depth_gap": self.depth_gap, "seed": self.seed, "separation": self.separation,
                "flat_width": self.s_b, "plateau": self.plateau,
                "center_shift": self.center_shift}


def make_two_basin(d: int, curvature_ratio: float = 100.0, depth_gap: float = 0.1,
                   seed: int = 0, **kwargs) -> TwoBasinObjective:
    return TwoBasinObjective(d, curvature_ratio, depth_gap, seed, **kwargs)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class PromptTaskObjective(ObjectiveFunction):
    """Toy prompt tuning through a fixed random projection.

    The trainable w (length d) is lifted to a prompt offset p = p0 + A w in
    R^m.  Class text features are t_k = normalize(c_k * (1 + p)), i.e. the
    prompt reweights embedding dimensions before the cosine classifier
    logits = scale * <x_n, t_k>.  Class prototypes v_k generate a linearly
    separable point cloud x_n; the "zero-shot" class embeddings c_k are
    copies of the prototypes corrupted along a hidden subset of dimensions, so
    w = 0 gives a mediocre baseline that prompt tuning can improve.

    ``evaluate`` averages cross-entropy over a minibatch of ``batch_size``
    samples drawn from the stream; without a stream the full dataset is used.
    """

    name = "prompt_task"
    stochastic = True

    def __init__(self, d: int = 32, m: int = 256, K: int = 10, n_samples: int = 512,
                 seed: int = 0, *, batch_size: int = 32, sample_noise: float = 1.0,
                 embed_noise: float = 5.0, nuisance_dims: int = 64,
                 logit_scale: float = 10.0) -> None:
        super().__init__(d, optimum_hint=None)
        if not d < m:
            raise InvalidArgumentError("prompt task needs d < m")
        if K < 2:
            raise InvalidArgumentError("prompt task needs K >= 2")
        if not 0 < nuisance_dims <= m:
            raise InvalidArgumentError("nuisance_dims must be in [1, m]")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9A,)))
        self.m, self.K, self.n_samples = m, K, n_samples
        self.batch_size = min(batch_size, n_samples)
        self.seed = seed
        self.sample_noise = sample_noise
        self.embed_noise = embed_noise
        self.nuisance_dims = nuisance_dims
        self.logit_scale = logit_scale

        self.A = rng.standard_normal((m, d))
        self.p0 = 0.01 * rng.standard_normal(m)
        protos = rng.standard_normal((K, m))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.labels = rng.integers(0, K, size=n_samples)
        x = protos[self.labels] + sample_noise * rng.standard_normal((n_samples, m)) / math.sqrt(m)
        self.X = x / np.linalg.norm(x, axis=1, keepdims=True)
        # zero-shot embeddings are off only along a hidden subset of dimensions,
        # which a shared reweighting prompt can learn to suppress
        nuisance = rng.choice(m, size=nuisance_dims, replace=False)
        c = protos.copy()
        c[:, nuisance] += (embed_noise / math.sqrt(nuisance_dims)
                           * rng.standard_normal((K, nuisance_dims)))
        self.class_embed = c / np.linalg.norm(c, axis=1, keepdims=True)

        zero = np.zeros(d)
        self.baseline_loss = self.loss(zero)
        self.baseline_accuracy = self.accuracy(zero)

    def text_features(self, w) -> np.ndarray:
        p = self.p0 + self.A @ np.asarray(w, dtype=np.float64)
        t = self.class_embed * (1.0 + p)
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    def _logits(self, w, X) -> np.ndarray:
        return self.logit_scale * (X @ self.text_features(w).T)

    def _loss(self, w, rng):
        if rng is None:
            X, y = self.X, self.labels
        else:
            idx = rng.choice(self.n_samples, size=self.batch_size, replace=False)
            X, y = self.X[idx], self.labels[idx]
        logp = _log_softmax(self._logits(w, X))
        return float(-logp[np.arange(len(y)), y].mean())

    def accuracy(self, w) -> float:
        pred = np.argmax(self._logits(w, self.X), axis=1)
        return float(np.mean(pred == self.labels))

    def validation_metric(self, w) -> float:
        return self.accuracy(w)

    def descriptor(self) -> dict:
        return {"name": self.name, "d": self.dim, "m": self.m, "K": self.K,
                "n_samples": self.n_samples, "seed": self.seed, "batch_size": self.batch_size,
                "sample_noise": self.sample_noise, "embed_noise": self.embed_noise,
                "nuisance_dims": self.nuisance_dims, "logit_scale": self.logit_scale}


def make_prompt_task(d: int = 32, m: int = 256, K: int = 10, n_samples: int = 512,
                     seed: int = 0, **kwargs) -> PromptTaskObjective:
    return PromptTaskObjective(d, m, K, n_samples, seed, **kwargs)


_MAKERS = {
    "quadratic": make_quadratic,
    "two_basin": make_two_basin,
    "prompt_task": make_prompt_task,
}


def build_objective(descriptor: dict) -> ObjectiveFunction:
    """Rebuild an objective from ``{"name": ..., **params}``."""
    params = dict(descriptor)
    name = params.pop("name")
    if name not in _MAKERS:
        raise KeyError(f"unknown objective {name!r}; known: {sorted(_MAKERS)}")
    if "dim" in params:
        params["d"] = params.pop("dim")
    return _MAKERS[name](**params)


def objective_names() -> list[str]:
    return sorted(_MAKERS)
