"""Experiment specs: parse a typed INI file, expand method x seed runs,
execute them (optionally in a process pool) and write logs atomically.

A spec file looks like::

    [experiment]
    objective = quadratic
    methods = sharpzo, zosgd-dense
    seeds = 0-4
    budget = 10000
    thresholds = 1.0, 0.1

    [objective]
    d = 32
    condition_number = 100

    [defaults]
    eta = 1e-4

    [method sharpzo]
    sigma0 = 0.2

``[defaults]`` and ``[method NAME]`` accept any ``RunConfig`` field; unknown
keys anywhere are errors.  The objective seed follows the run seed unless
``seed`` is pinned in ``[objective]``.
"""

from __future__ import annotations

import configparser
import inspect
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .driver import ConfigError, RunConfig, run
from .objectives import PromptTaskObjective, QuadraticObjective, TwoBasinObjective, build_objective

OUT_ENV = "SHARPZO_OUT"

# variant name -> RunConfig overrides
METHODS: dict[str, dict] = {
    "sharpzo": {},
    "sharpzo-magnitude": {"stage2_pruning": "magnitude"},
    "sharpzo-dense": {"stage2_pruning": "none"},
    "sharpzo-literal-eq4": {"literal_eq4": True},
    "sharpzo-literal-eq5": {"literal_eq5": True},
    "cmaes-naive": {"stage1_mode": "naive", "rho": 0.0, "stage2_pruning": "none",
                    "stage1_cap": 10 ** 9, "patience": 10 ** 9},
    "zosgd-dense": {"stage1_cap": 0, "stage2_pruning": "none"},
    "zosgd-magnitude": {"stage1_cap": 0, "stage2_pruning": "magnitude"},
}

_OBJECTIVE_CLASSES = {
    "quadratic": QuadraticObjective,
    "two_basin": TwoBasinObjective,
    "prompt_task": PromptTaskObjective,
}

EXPERIMENT_KEYS = {"objective", "methods", "seeds", "budget", "thresholds", "out", "plot"}


class SpecError(ValueError):
    """Invalid spec file; carries the offending line and field."""

    def __init__(self, message: str, line: Optional[int] = None,
                 field_name: Optional[str] = None, path: Optional[str] = None) -> None:
        self.line, self.field, self.path = line, field_name, path
        where = f"{path or '<spec>'}:{line if line is not None else '?'}"
        what = f" field '{field_name}':" if field_name else ""
        super().__init__(f"{where}:{what} {message}")


@dataclass
class ExperimentSpec:
    objective: dict
    methods: list[str]
    seeds: list[int]
    budget: int
    thresholds: list[float] = field(default_factory=list)
    defaults: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    out: Optional[str] = None
    plot: bool = True
    pin_objective_seed: bool = False

    def config_for(self, method: str, seed: int) -> RunConfig:
        values = {"T": self.budget, "max_queries": self.budget}
        values.update(self.defaults)
        values.update(METHODS[method])
        values.update(self.overrides.get(method, {}))
        values["seed"] = seed
        return RunConfig(**values)

    def objective_for(self, seed: int) -> dict:
        desc = dict(self.objective)
        if not self.pin_objective_seed:
            desc["seed"] = seed
        return desc

    def to_dict(self) -> dict:
        return {"objective": self.objective, "methods": self.methods, "seeds": self.seeds,
                "budget": self.budget, "thresholds": self.thresholds,
                "defaults": self.defaults, "overrides": self.overrides,
                "pin_objective_seed": self.pin_objective_seed}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the 1-based line where the key is set."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, ""), n)
            continue
        for sep in ("=", ":"):
            if sep in s:
                lines.setdefault((section, s.split(sep, 1)[0].strip()), n)
                break
    return lines


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, kind: str):
    text = text.strip()
    optional = kind.startswith("Optional[")
    if optional:
        if text.lower() in ("none", ""):
            return None
        kind = kind[len("Optional["):-1]
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def _objective_types(name: str) -> dict[str, str]:
    cls = _OBJECTIVE_CLASSES[name]
    out = {}
    for p in list(inspect.signature(cls.__init__).parameters.values())[1:]:
        default = p.default
        if p.name == "d":
            out[p.name] = "int"
        elif isinstance(default, bool):
            out[p.name] = "bool"
        elif isinstance(default, int):
            out[p.name] = "int"
        else:
            out[p.name] = "float"
    return out


def parse_spec(text: str, path: Optional[str] = None) -> ExperimentSpec:
    lines = _key_lines(text)
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str  # RunConfig has case-sensitive fields (S, T, K)
    try:
        parser.read_string(text, source=path or "<spec>")
    except configparser.Error as exc:
        raise SpecError(str(exc).splitlines()[0], getattr(exc, "lineno", None), path=path) from exc

    def err(msg, section, key=None):
        return SpecError(msg, lines.get((section, key or ""), lines.get((section, ""))),
                         key, path)

    if not parser.has_section("experiment"):
        raise SpecError("missing [experiment] section", path=path)
    exp = parser["experiment"]
    for key in exp:
        if key not in EXPERIMENT_KEYS:
            raise err("unknown key in [experiment]", "experiment", key)
    for key in ("objective", "methods", "seeds", "budget"):
        if key not in exp:
            raise err("required key missing", "experiment", key)

    obj_name = exp["objective"].strip()
    if obj_name not in _OBJECTIVE_CLASSES:
        raise err(f"unknown objective {obj_name!r}; known: {sorted(_OBJECTIVE_CLASSES)}",
                  "experiment", "objective")
    methods = [m.strip() for m in exp["methods"].split(",") if m.strip()]
    if not methods:
        raise err("at least one method is required", "experiment", "methods")
    for m in methods:
        if m not in METHODS:
            raise err(f"unknown method {m!r}; known: {sorted(METHODS)}", "experiment", "methods")
    try:
        seeds = _parse_seeds(exp["seeds"])
        budget = int(exp["budget"])
        thresholds = [float(x) for x in exp.get("thresholds", "").split(",") if x.strip()]
        plot = _parse_bool(exp.get("plot", "true"))
    except ValueError as exc:
        key = next(k for k in ("seeds", "budget", "thresholds", "plot")
                   if k in exp and _safe_fails(k, exp[k]))
        raise err(str(exc), "experiment", key) from exc
    if not seeds:
        raise err("at least one seed is required", "experiment", "seeds")
    if budget < 1:
        raise err("budget must be >= 1", "experiment", "budget")

    obj_types = _objective_types(obj_name)
    objective: dict = {"name": obj_name}
    pinned = False
    if parser.has_section("objective"):
        for key, raw in parser["objective"].items():
            if key not in obj_types:
                raise err(f"unknown parameter for {obj_name}", "objective", key)
            try:
                objective[key] = _convert(raw, obj_types[key])
            except ValueError as exc:
                raise err(str(exc), "objective", key) from exc
            pinned = pinned or key == "seed"

    run_types = RunConfig.field_types()

    def run_section(section: str) -> dict:
        values = {}
        for key, raw in parser[section].items():
            if key not in run_types or key == "seed":
                raise err(f"unknown key in [{section}]", section, key)
            try:
                values[key] = _convert(raw, run_types[key])
            except ValueError as exc:
                raise err(str(exc), section, key) from exc
        return values

    defaults = run_section("defaults") if parser.has_section("defaults") else {}
    overrides: dict = {}
    for section in parser.sections():
        if section in ("experiment", "objective", "defaults"):
            continue
        if not section.startswith("method "):
            raise err(f"unknown section [{section}]", section)
        name = section[len("method "):].strip()
        if name not in methods:
            raise err(f"section for method {name!r} not listed in methods", section)
        overrides[name] = run_section(section)

    spec = ExperimentSpec(objective, methods, seeds, budget, thresholds, defaults, overrides,
                          exp.get("out"), plot, pinned)
    # reject bad values before any evaluation
    try:
        build_objective(spec.objective_for(seeds[0]))
    except (ValueError, TypeError) as exc:
        raise err(str(exc), "objective") from exc
    for m in methods:
        cfg = spec.config_for(m, seeds[0])
        try:
            cfg.validate()
        except ConfigError as exc:
            section = f"method {m}" if exc.field in overrides.get(m, {}) else "defaults"
            raise err(str(exc), section, exc.field) from exc
    return spec


def _safe_fails(key: str, raw: str) -> bool:
    try:
        if key == "seeds":
            _parse_seeds(raw)
        elif key == "budget":
            int(raw)
        elif key == "thresholds":
            [float(x) for x in raw.split(",") if x.strip()]
        else:
            _parse_bool(raw)
        return False
    except ValueError:
        return True


def load_spec(path: str) -> ExperimentSpec:
    return parse_spec(Path(path).read_text(), str(path))


def resolve_out(cli_out: Optional[str], spec: Optional[ExperimentSpec] = None) -> Path:
    """--out beats the environment variable, which beats the spec file."""
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if spec is not None and spec.out:
        return Path(spec.out)
    return Path("results")


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def log_name(method: str, seed: int) -> str:
    return f"{method}__seed{seed}.csv"


def _run_one(job: tuple) -> tuple[str, int, str, dict]:
    method, seed, cfg_dict, obj_desc = job
    obj = build_objective(obj_desc)
    log = run(RunConfig(**cfg_dict), obj)
    meta = {"method": method, "seed": seed, "objective": obj.descriptor(),
            "optimum": obj.optimum_hint, "T_c": log.T_c,
            "transition_fired": log.transition_fired, "total_queries": log.total_queries}
    return method, seed, log.to_csv(), meta


def execute(spec: ExperimentSpec, out: Path, jobs: int = 1) -> dict:
    """Run every (method, seed) pair and write ``out/logs``.

    Returns the manifest.  Raises on the first failed run; in that case no
    manifest is written.
    """
    work = [(m, s, spec.config_for(m, s).to_dict(), spec.objective_for(s))
            for m in spec.methods for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(job) for job in work]
    logs = out / "logs"
    entries = {}
    for method, seed, text, meta in results:
        name = log_name(method, seed)
        atomic_write(logs / name, text)
        entries[name] = meta
    manifest = {"spec": spec.to_dict(), "logs": entries}
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
