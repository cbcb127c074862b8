"""Self-check: estimator exactness and mask sparsity, runnable without a test
framework (``sharpzo verify``)."""

from __future__ import annotations

import time

import numpy as np

from .core import FunctionObjective, RngStream
from .estimators import cge_estimate, rge_estimate
from .pruning import build_mask, magnitude_mask


def check_cge_exact(instances: int = 100, max_dim: int = 64, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(instances):
        d = int(rng.integers(1, max_dim + 1))
        M = rng.standard_normal((d, d))
        H = M @ M.T / d + np.eye(d)
        b = rng.standard_normal(d)
        w = rng.standard_normal(d)
        obj = FunctionObjective(lambda x, H=H, b=b: 0.5 * float(x @ H @ x) + float(b @ x), d)
        exact = H @ w + b
        got = cge_estimate(obj, w, 1e-5).grad
        worst = max(worst, float(np.linalg.norm(got - exact) / max(np.linalg.norm(exact), 1e-300)))
    dt = time.perf_counter() - t0
    return worst < 1e-8, f"CGE on {instances} random quadratics: max rel err {worst:.2e} ({dt:.2f}s)"


def check_rge_unbiased(n: int = 20_000, seed: int = 1) -> tuple[bool, str]:
    H = np.diag([1.0, 3.0, 0.5])
    obj = FunctionObjective(lambda x: 0.5 * float(x @ H @ x), 3)
    w = np.array([1.0, -1.0, 2.0])
    root = RngStream(seed)
    g = np.array([rge_estimate(obj, w, 1e-3, 1, root.child(i)).grad for i in range(n)])
    se = g.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(g.mean(axis=0) - H @ w) / se
    return bool(np.all(z < 5)), f"RGE mean over {n} draws: max |z| {z.max():.2f}"


def check_mask_sparsity(trials: int = 200, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = int(rng.integers(1, 80))
        s = float(rng.uniform(0, 0.99))
        w = rng.standard_normal(d)
        f = rng.exponential(size=d)
        for m in (build_mask(w, f, s), magnitude_mask(w, s)):
            if int((~m.active).sum()) != round(s * d):
                return False, f"mask sparsity wrong for d={d}, sparsity={s}"
    return True, f"mask sparsity exact on {trials} random cases"


CHECKS = (check_cge_exact, check_rge_unbiased, check_mask_sparsity)


def run_all(emit=print) -> bool:
    ok = True
    for check in CHECKS:
        passed, msg = check()
        emit(f"{'PASS' if passed else 'FAIL'}  {msg}")
        ok = ok and passed
    return ok
