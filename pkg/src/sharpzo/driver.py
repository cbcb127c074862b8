"""Two-stage orchestration: CMA-ES warm-up, plateau-triggered hand-off, then
sparse ZO-SGD, with a per-step log and post-hoc rate analysis.

Random streams for a run with seed ``s`` are laid out as::

    RngStream(s).child(0)        initial point
    RngStream(s).child(1, t)     stage-1 generation t (t = 1, 2, ...)
    RngStream(s).child(2, t)     stage-2 step taken from iterate w_t
    RngStream(s).child(3, t)     mask refresh at iterate w_t

so runs can be recomposed by hand from the module-level building blocks.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import cmaes, estimators, pruning, zosgd
from .core import ObjectiveFunction, RngStream, Vector

CSV_COLUMNS = ("step", "stage", "queries", "train_loss", "val_metric", "sigma",
               "active_coords", "wall_ms")

PRUNING_MODES = ("zscore", "magnitude", "none")
STAGE1_MODES = ("sharp", "naive")
STAGE2_INITS = ("mean", "best")
INIT_MODES = ("random", "zeros")


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: Optional[str] = None) -> None:
        super().__init__(message)
        self.field = field_name


class RunError(RuntimeError):
    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


class WindowInvalidError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of a two-stage run.

    ``stage1_cap`` bounds the number of CMA-ES generations (0 skips stage 1,
    i.e. a cold-started ZO-SGD run).  ``max_queries`` optionally stops the
    run before any step that would exceed the query budget.
    """

    d: Optional[int] = None
    T: int = 1000
    S: int = cmaes.POPSIZE
    rho: float = estimators.SAM_RHO
    sigma0: float = cmaes.SIGMA0
    mu_cge: float = estimators.MU_CGE
    mu_rge: float = estimators.MU_RGE
    q: int = 1
    eta: float = zosgd.ETA
    K: int = zosgd.PRUNE_INTERVAL
    sparsity: float = pruning.DEFAULT_SPARSITY
    fisher_batches: Optional[int] = None
    patience: int = 10
    improve_tol: float = 0.01
    seed: int = 0
    stage2_pruning: str = "zscore"
    stage1_mode: str = "sharp"
    literal_eq4: bool = False
    literal_eq5: bool = False
    stage1_cap: int = 500
    max_queries: Optional[int] = None
    stage2_init: str = "mean"
    init: str = "random"
    init_std: float = 0.02
    record_wall_time: bool = False

    def validate(self, obj: Optional[ObjectiveFunction] = None) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})", name)

        if obj is not None:
            if self.d is None:
                self.d = obj.dim
            elif self.d != obj.dim:
                bad("d", f"objective has dimension {obj.dim}")
        if self.d is not None and self.d < 1:
            bad("d", "must be >= 1")
        for name in ("T", "S", "q", "K", "patience"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.S < 2:
            bad("S", "must be >= 2")
        for name in ("sigma0", "mu_cge", "mu_rge", "eta", "init_std"):
            if not getattr(self, name) > 0:
                bad(name, "must be > 0")
        for name in ("rho", "improve_tol"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not 0 <= self.sparsity < 1:
            bad("sparsity", "must be in [0, 1)")
        if self.fisher_batches is not None and self.fisher_batches < 1:
            bad("fisher_batches", "must be >= 1")
        if self.stage1_cap < 0:
            bad("stage1_cap", "must be >= 0")
        if self.max_queries is not None and self.max_queries < 0:
            bad("max_queries", "must be >= 0")
        for name, allowed in (("stage2_pruning", PRUNING_MODES), ("stage1_mode", STAGE1_MODES),
                              ("stage2_init", STAGE2_INITS), ("init", INIT_MODES)):
            if getattr(self, name) not in allowed:
                bad(name, f"must be one of {allowed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class StepLog:
    step: int
    stage: int
    queries: int
    train_loss: float
    val_metric: float
    sigma: float
    active_coords: int
    wall_ms: float
    grad_norm: float = math.nan
    best_fitness: float = math.nan
    mean_fitness: float = math.nan


@dataclass
class RunLog:
    records: list[StepLog]
    T_c: int
    final_w: Vector
    config: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    transition_fired: bool = False
    refreshes: int = 0

    def stage_records(self, stage: int) -> list[StepLog]:
        return [r for r in self.records if r.stage == stage]

    @property
    def total_queries(self) -> int:
        return self.records[-1].queries if self.records else 0

    @property
    def final_loss(self) -> float:
        return self.records[-1].train_loss if self.records else math.nan

    def to_csv(self, include_wall_time: Optional[bool] = None) -> str:
        if include_wall_time is None:
            include_wall_time = bool(self.config.get("record_wall_time", False))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([
                r.step, r.stage, r.queries, _fmt(r.train_loss), _fmt(r.val_metric),
                _fmt(r.sigma), r.active_coords,
                _fmt(r.wall_ms) if include_wall_time else "",
            ])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "T_c": self.T_c,
            "transition_fired": self.transition_fired,
            "refreshes": self.refreshes,
            "final_w": [float(x) for x in self.final_w],
            "config": self.config,
            "objective": self.objective,
            "records": [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                         for k, v in asdict(r).items()
                         if k != "wall_ms" or self.config.get("record_wall_time")}
                        for r in self.records],
        }
        return json.dumps(doc, sort_keys=True)


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def read_csv_log(text: str) -> list[dict]:
    """Parse a CSV log back into typed rows (empty cells become NaN)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"log header must be {','.join(CSV_COLUMNS)}")
    out = []
    for raw in rows[1:]:
        if not raw:
            continue
        row = dict(zip(CSV_COLUMNS, raw))
        out.append({
            "step": int(row["step"]),
            "stage": int(row["stage"]),
            "queries": int(row["queries"]),
            "train_loss": float(row["train_loss"]) if row["train_loss"] else math.nan,
            "val_metric": float(row["val_metric"]) if row["val_metric"] else math.nan,
            "sigma": float(row["sigma"]) if row["sigma"] else math.nan,
            "active_coords": int(row["active_coords"]),
            "wall_ms": float(row["wall_ms"]) if row["wall_ms"] else math.nan,
        })
    return out


def transition_check(history: Sequence[float], improve_tol: float = 0.01,
                     patience: int = 10) -> bool:
    """True when none of the last ``patience`` metrics beat the best value
    recorded before them by more than ``improve_tol``."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    if len(history) <= patience:
        return False
    best_before = max(history[:-patience])
    return all(m - best_before <= improve_tol for m in history[-patience:])


def stage1_cost(config: RunConfig, d: int) -> int:
    return config.S + (2 * d if config.stage1_mode == "sharp" else 0)


def refresh_cost(config: RunConfig, obj: ObjectiveFunction) -> int:
    if config.stage2_pruning != "zscore":
        return 0
    return 2 * obj.dim * zosgd.resolve_fisher_batches(config, obj)


def expected_queries(config: RunConfig, obj: ObjectiveFunction, generations: int,
                     stage2_steps: int) -> int:
    """Closed-form query total for a run with the given stage lengths."""
    refreshes = 0 if stage2_steps == 0 else 1 + (stage2_steps - 1) // config.K
    if config.stage2_pruning == "none":
        refreshes = 0
    return (generations * stage1_cost(config, obj.dim)
            + stage2_steps * 2 * config.q
            + refreshes * refresh_cost(config, obj))


def run(config: RunConfig, obj: ObjectiveFunction) -> RunLog:
    """Execute both stages and return the full trajectory log."""
    config.validate(obj)
    d = obj.dim
    root = RngStream(config.seed)
    counter = obj.counter
    q0 = counter.total_evals
    timed = time.perf_counter

    if config.init == "random":
        w0 = obj.init_point(root.child(0), config.init_std)
    else:
        w0 = np.zeros(d)

    records: list[StepLog] = []
    params = cmaes.CmaParams.default(d, config.S)
    state = cmaes.CmaState.initial(w0, config.sigma0)
    history = [obj.validation_metric(w0)]
    budget = config.max_queries
    sharp = config.stage1_mode == "sharp"
    t = 0
    fired = False
    last = timed()

    stage1_limit = min(config.stage1_cap, config.T)
    with counter.stage("stage1"):
        while t < stage1_limit:
            if budget is not None and counter.total_evals - q0 + stage1_cost(config, d) > budget:
                break
            try:
                state, rec = cmaes.sharpness_step(
                    state, obj, config.rho, config.mu_cge, config.S, root.child(1, t + 1),
                    params=params, sharp=sharp)
            except Exception as exc:  # surface with the failing step
                raise RunError(str(exc), t + 1) from exc
            t += 1
            val = obj.validation_metric(state.theta)
            history.append(val)
            now = timed()
            records.append(StepLog(t, 1, counter.total_evals - q0, obj.loss(state.theta), val,
                                   state.sigma, d, 1000.0 * (now - last), rec.grad_norm,
                                   rec.best_fitness, rec.mean_fitness))
            last = now
            if transition_check(history, config.improve_tol, config.patience):
                fired = True
                break
    T_c = t

    if config.stage2_init == "best" and state.best_w is not None:
        w_start = state.best_w.copy()
    else:
        w_start = state.theta.copy()
    zs = zosgd.ZoState(w_start, T_c, pruning.PruneMask.dense(d, T_c), config.eta)
    refreshes = 0
    r_cost = refresh_cost(config, obj)
    with counter.stage("stage2"):
        while zs.step < config.T:
            due = config.stage2_pruning != "none" and zosgd.refresh_due(zs.step, T_c, config.K)
            cost = 2 * config.q + (r_cost if due else 0)
            if budget is not None and counter.total_evals - q0 + cost > budget:
                break
            try:
                if due:
                    zs = zosgd.maybe_refresh_mask(zs, obj, config, root.child(3, zs.step), T_c=T_c)
                    refreshes += 1
                zs = zosgd.zo_step(zs, obj, config.mu_rge, config.q, root.child(2, zs.step),
                                   literal_eq4=config.literal_eq4)
            except Exception as exc:
                raise RunError(str(exc), zs.step + 1) from exc
            if not np.all(np.isfinite(zs.w)):
                raise RunError("iterate became non-finite", zs.step)
            now = timed()
            records.append(StepLog(zs.step, 2, counter.total_evals - q0, obj.loss(zs.w),
                                   obj.validation_metric(zs.w), math.nan, zs.mask.n_active,
                                   1000.0 * (now - last), zs.last_grad_norm))
            last = now

    final_w = zs.w if zs.step > T_c else state.theta
    return RunLog(records, T_c, np.array(final_w), config.to_dict(), obj.descriptor(),
                  fired, refreshes)


def fit_log_linear(steps, gaps) -> tuple[float, float]:
    """Least-squares slope of log(gap) against step, plus r^2."""
    steps = np.asarray(steps, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if steps.size < 2:
        raise WindowInvalidError("need at least two points to fit a rate")
    if not np.all(gaps > 0) or not np.all(np.isfinite(gaps)):
        raise WindowInvalidError("loss gaps must be positive and finite inside the window")
    y = np.log(gaps)
    x = steps - steps.mean()
    yc = y - y.mean()
    sxx = float(np.dot(x, x))
    if sxx == 0:
        raise WindowInvalidError("window has a single distinct step")
    slope = float(np.dot(x, yc)) / sxx
    ss_tot = float(np.dot(yc, yc))
    resid = yc - slope * x
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, r2


def fit_linear_rate(log: RunLog, L_star: float,
                    window: Optional[tuple[int, int]] = None) -> tuple[float, float]:
    """Fit log(L(w_t) - L*) ~ rate * t over stage-2 steps in ``window``
    (inclusive step range; default all stage-2 steps)."""
    recs = log.stage_records(2)
    if window is not None:
        lo, hi = window
        recs = [r for r in recs if lo <= r.step <= hi]
    return fit_log_linear([r.step for r in recs], [r.train_loss - L_star for r in recs])
