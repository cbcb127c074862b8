"""Summaries over CSV run logs: final-loss statistics, queries-to-threshold,
paired win rates, fitted stage-2 rates, and loss-vs-queries SVG charts.

Everything here reads only the CSV logs plus the ``manifest.json`` written
next to them (objective identity and known optimum), so every number can be
recomputed from the files on disk.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .driver import WindowInvalidError, fit_log_linear, read_csv_log

LOG_RE = re.compile(r"^(?P<method>.+)__seed(?P<seed>-?\d+)\.csv$")

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
          "#7f7f7f")


class ObjectiveMismatchError(ValueError):
    pass


@dataclass
class LogEntry:
    method: str
    seed: int
    rows: list[dict]
    objective: Optional[dict] = None
    optimum: Optional[float] = None
    path: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["train_loss"] if self.rows else math.nan

    @property
    def final_val(self) -> float:
        return self.rows[-1]["val_metric"] if self.rows else math.nan

    @property
    def total_queries(self) -> int:
        return self.rows[-1]["queries"] if self.rows else 0


def _find_manifest(path: Path) -> Optional[dict]:
    for cand in (path.parent / "manifest.json", path.parent.parent / "manifest.json"):
        if cand.is_file():
            return json.loads(cand.read_text())
    return None


def load_logs(paths: Sequence[str]) -> list[LogEntry]:
    entries = []
    manifests: dict[Path, Optional[dict]] = {}
    for p in map(Path, paths):
        m = LOG_RE.match(p.name)
        if m is None:
            raise ValueError(f"{p}: log names must look like METHOD__seedN.csv")
        if p.parent not in manifests:
            manifests[p.parent] = _find_manifest(p)
        meta = (manifests[p.parent] or {}).get("logs", {}).get(p.name, {})
        entries.append(LogEntry(m["method"], int(m["seed"]), read_csv_log(p.read_text()),
                                meta.get("objective"), meta.get("optimum"), str(p)))
    return entries


def _family(desc: Optional[dict]) -> Optional[dict]:
    # instances differ per seed by design; compare everything else
    if desc is None:
        return None
    return {k: v for k, v in desc.items() if k != "seed"}


def check_same_objective(entries: Sequence[LogEntry]) -> None:
    known = [(e.path, _family(e.objective)) for e in entries if e.objective is not None]
    for path, fam in known[1:]:
        if fam != known[0][1]:
            raise ObjectiveMismatchError(
                f"logs come from different objectives: {known[0][0]} has {known[0][1]}, "
                f"{path} has {fam}")


def queries_to_threshold(rows: Sequence[dict], threshold: float) -> Optional[int]:
    """Cumulative queries at the first row with train_loss <= threshold."""
    for r in rows:
        if r["train_loss"] <= threshold:
            return r["queries"]
    return None


def win_rate(a: Sequence[LogEntry], b: Sequence[LogEntry]) -> Optional[float]:
    """Fraction of shared seeds where ``a`` ends with lower loss (ties = 0.5)."""
    fb = {e.seed: e.final_loss for e in b}
    scores = []
    for e in a:
        if e.seed not in fb:
            continue
        x, y = e.final_loss, fb[e.seed]
        scores.append(1.0 if x < y else 0.5 if x == y else 0.0)
    return float(np.mean(scores)) if scores else None


def stage2_rate(entry: LogEntry) -> Optional[float]:
    if entry.optimum is None:
        return None
    rows = [r for r in entry.rows if r["stage"] == 2]
    try:
        slope, _ = fit_log_linear([r["step"] for r in rows],
                                  [r["train_loss"] - entry.optimum for r in rows])
    except WindowInvalidError:
        return None
    return slope


def _median(values) -> Optional[float]:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else None


def summarize(entries: Sequence[LogEntry], thresholds: Sequence[float] = ()) -> dict:
    check_same_objective(entries)
    methods = list(dict.fromkeys(e.method for e in entries))
    by_method = {m: sorted((e for e in entries if e.method == m), key=lambda e: e.seed)
                 for m in methods}
    table = []
    for m in methods:
        runs = by_method[m]
        losses = np.array([e.final_loss for e in runs])
        row = {
            "method": m,
            "seeds": len(runs),
            "final_loss_median": float(np.median(losses)),
            "final_loss_q25": float(np.percentile(losses, 25)),
            "final_loss_q75": float(np.percentile(losses, 75)),
            "final_val_median": _median([e.final_val for e in runs]),
            "queries_median": float(np.median([e.total_queries for e in runs])),
            "rate_median": _median([stage2_rate(e) for e in runs]),
        }
        for thr in thresholds:
            hits = [queries_to_threshold(e.rows, thr) for e in runs]
            # median with never-reached counted as infinite; sentinel when that is infinite
            ranked = sorted(math.inf if h is None else h for h in hits)
            med = float(np.median(ranked)) if ranked else math.inf
            row[f"queries_to_{thr:g}"] = None if math.isinf(med) else med
            row[f"reached_{thr:g}"] = sum(h is not None for h in hits)
        for other in methods:
            if other != m:
                row[f"win_vs_{other}"] = win_rate(runs, by_method[other])
        table.append(row)
    objective = next((e.objective for e in entries if e.objective is not None), None)
    return {"objective": _family(objective), "thresholds": list(thresholds), "methods": table}


def summary_csv(summary: dict) -> str:
    cols: list[str] = []
    for row in summary["methods"]:
        for k in row:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in summary["methods"]:
        w.writerow(["" if row.get(c) is None else _cell(row[c]) for c in cols])
    return buf.getvalue()


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def format_table(summary: dict) -> str:
    """Fixed-width text rendering for the terminal."""
    cols = list(csv.reader(io.StringIO(summary_csv(summary))))[0]
    rows = [cols] + [["" if r.get(c) is None else f"{r[c]:.4g}" if isinstance(r[c], float)
                      else str(r[c]) for c in cols] for r in summary["methods"]]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _curve(rows: Sequence[dict], grid: np.ndarray) -> np.ndarray:
    q = np.array([r["queries"] for r in rows], dtype=float)
    loss = np.array([r["train_loss"] for r in rows], dtype=float)
    idx = np.searchsorted(q, grid, side="right") - 1
    out = np.full(grid.shape, np.nan)
    ok = idx >= 0
    out[ok] = loss[idx[ok]]
    return out


def plot_curves(entries: Sequence[LogEntry], path: Path, title: str = "") -> None:
    """Median loss vs cumulative queries per method, shaded inter-quartile band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "sharpzo"
    methods = list(dict.fromkeys(e.method for e in entries))
    top = max(e.total_queries for e in entries)
    grid = np.linspace(0, top, 200)
    all_pos = all(r["train_loss"] > 0 for e in entries for r in e.rows)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, m in enumerate(methods):
        curves = np.array([_curve(e.rows, grid) for e in entries if e.method == m])
        keep = ~np.all(np.isnan(curves), axis=0)
        lo, med, hi = np.nanpercentile(curves[:, keep], [25, 50, 75], axis=0)
        color = COLORS[i % len(COLORS)]
        ax.plot(grid[keep], med, color=color, label=m, lw=1.5)
        ax.fill_between(grid[keep], lo, hi, color=color, alpha=0.2, lw=0)
    if all_pos:
        ax.set_yscale("log")
    ax.set_xlabel("cumulative queries")
    ax.set_ylabel("training loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    from .experiment import atomic_write
    atomic_write(path, buf.getvalue())


def compare_report(paths: Sequence[str], thresholds: Sequence[float] = ()) -> dict:
    return summarize(load_logs(paths), thresholds)
