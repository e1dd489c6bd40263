"""Experiment plumbing: bundled scenarios, seed-averaged parameter sweeps and
their CSV tables."""

from __future__ import annotations

import csv
import io
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import yaml

from mvp2p.sim.config import FIELD_NAMES, STRATEGIES, ConfigError, ScenarioConfig, config_from_dict, load_config
from mvp2p.sim.engine import run
from mvp2p.sim.metrics import Metrics

CSV_HEADER = ("value", "strategy", "seeds", "mean_ps", "std_ps", "mean_server_bps",
              "mean_total_bps", "optimal_ps")


def compute_ps(metrics: Metrics) -> float:
    """Server share ``S / U`` over the post-join analysis window."""
    if metrics.total_bits <= 0:
        raise ZeroDivisionError("no bits delivered in the analysis window")
    return metrics.server_bits / metrics.total_bits


# ---- bundled scenarios --------------------------------------------------
def scenario_names() -> list[str]:
    root = resources.files("mvp2p.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def scenario_path(name: str) -> Path:
    """Path of a bundled scenario or sweep file, by stem."""
    p = Path(str(resources.files("mvp2p.scenarios").joinpath(f"{name}.yaml")))
    if not p.is_file():
        raise ConfigError(f"no bundled scenario {name!r}; known: {', '.join(scenario_names())}")
    return p


def resolve_config(ref: str | Path | Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    """A config from a mapping, a file path or the name of a bundled scenario."""
    if isinstance(ref, Mapping):
        return config_from_dict(ref, base_dir)
    p = Path(ref)
    if base_dir is not None and not p.is_absolute():
        p = base_dir / p
    if p.is_file():
        return load_config(p)
    return load_config(scenario_path(str(ref)))


# ---- sweeps -------------------------------------------------------------
@dataclass(frozen=True)
class SweepSpec:
    """One swept config field, evaluated for every strategy over ``seeds`` seeds."""

    base: ScenarioConfig
    parameter: str
    values: tuple[Any, ...]
    seeds: int = 5
    strategies: tuple[str, ...] = STRATEGIES
    output: Path | None = None
    first_seed: int = 0

    def __post_init__(self) -> None:
        if self.parameter not in FIELD_NAMES or self.parameter in ("seed", "strategy"):
            raise ConfigError(f"cannot sweep {self.parameter!r}: not a scenario parameter")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if not self.values:
            raise ConfigError("a sweep needs at least one value")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"unknown strategies {bad}; expected a subset of {STRATEGIES}")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        for v in self.values:
            self.config_for(v, self.strategies[0], self.first_seed)  # validate early

    def config_for(self, value: Any, strategy: str, seed: int) -> ScenarioConfig:
        try:
            return self.base.replace(**{self.parameter: value, "strategy": strategy, "seed": seed})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def jobs(self) -> list[tuple[Any, str, int]]:
        return [(v, s, self.first_seed + k)
                for v in self.values for s in self.strategies for k in range(self.seeds)]


def load_sweep(path: str | Path) -> SweepSpec:
    """Read a sweep file: ``base`` (mapping, path or bundled name), ``parameter``,
    ``values`` and optionally ``seeds``, ``strategies``, ``first_seed``,
    ``overrides`` and ``output``."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    known = {"base", "parameter", "values", "seeds", "strategies", "output", "first_seed", "overrides"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sweep keys {sorted(unknown)}")
    for key in ("base", "parameter", "values"):
        if key not in doc:
            raise ConfigError(f"{path}: missing {key!r}")
    base = resolve_config(doc["base"], path.parent)
    overrides = doc.get("overrides") or {}
    if overrides:
        bad = set(overrides) - FIELD_NAMES
        if bad:
            raise ConfigError(f"{path}: unknown override keys {sorted(bad)}")
        base = base.replace(**overrides)
    out = doc.get("output")
    return SweepSpec(
        base=base,
        parameter=str(doc["parameter"]),
        values=tuple(doc["values"] or ()),
        seeds=int(doc.get("seeds", 5)),
        strategies=tuple(doc.get("strategies", STRATEGIES)),
        output=None if out is None else (path.parent / out),
        first_seed=int(doc.get("first_seed", 0)),
    )


@dataclass(frozen=True)
class FigureRow:
    value: Any
    strategy: str
    seeds: int
    mean_ps: float
    std_ps: float
    mean_server_bps: float
    mean_total_bps: float
    optimal_ps: float | None


@dataclass
class FigureTable:
    parameter: str
    rows: list[FigureRow] = field(default_factory=list)

    def row(self, value: Any, strategy: str) -> FigureRow:
        for r in self.rows:
            if r.value == value and r.strategy == strategy:
                return r
        raise KeyError((value, strategy))


@dataclass(frozen=True)
class RunResult:
    value: Any
    strategy: str
    seed: int
    ps: float
    server_bps: float
    total_bps: float
    optimal_share: float | None
    missed_deadlines: int


def run_point(config: ScenarioConfig, value: Any = None) -> RunResult:
    m = run(config)
    return RunResult(value, config.strategy, config.seed, compute_ps(m), m.server_bps,
                     m.total_bps, m.optimal_share, m.missed_deadlines)


def _job(args: tuple[ScenarioConfig, Any]) -> RunResult:
    return run_point(*args)


def _value_key(v: Any):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def summarize(parameter: str, results: Iterable[RunResult]) -> FigureTable:
    """Reduce per-seed results to one row per (value, strategy)."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((_value_key(r.value), r.strategy), []).append(r)
    table = FigureTable(parameter)
    for key in sorted(groups):
        rs = sorted(groups[key], key=lambda r: r.seed)
        ps = [r.ps for r in rs]
        opts = [r.optimal_share for r in rs if r.optimal_share is not None]
        table.rows.append(FigureRow(
            value=rs[0].value,
            strategy=rs[0].strategy,
            seeds=len(rs),
            mean_ps=statistics.fmean(ps),
            std_ps=statistics.pstdev(ps) if len(ps) > 1 else 0.0,
            mean_server_bps=statistics.fmean(r.server_bps for r in rs),
            mean_total_bps=statistics.fmean(r.total_bps for r in rs),
            optimal_ps=statistics.fmean(opts) if opts else None,
        ))
    return table


def run_sweep(
    spec: SweepSpec,
    workers: int = 1,
    progress: Callable[[RunResult], None] | None = None,
) -> FigureTable:
    """Run every (value, strategy, seed) of a sweep.

    Points are independent simulations; with ``workers > 1`` they run in
    separate processes.  The table does not depend on completion order.
    """
    jobs = [(spec.config_for(v, s, seed), v) for v, s, seed in spec.jobs()]
    results: list[RunResult] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r in pool.map(_job, jobs):
                results.append(r)
                if progress:
                    progress(r)
    else:
        for job in jobs:
            r = _job(job)
            results.append(r)
            if progress:
                progress(r)
    table = summarize(spec.parameter, results)
    if spec.output is not None:
        emit_csv(table, spec.output)
    return table


# ---- CSV ----------------------------------------------------------------
def _num(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def table_csv(table: FigureTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    rows = sorted(table.rows, key=lambda r: (_value_key(r.value), r.strategy))
    for r in rows:
        w.writerow([_num(r.value), r.strategy, r.seeds, _num(r.mean_ps), _num(r.std_ps),
                    _num(r.mean_server_bps), _num(r.mean_total_bps), _num(r.optimal_ps)])
    return buf.getvalue()


def emit_csv(table: FigureTable, path: str | Path) -> Path:
    """Write the table as UTF-8 CSV; rows ordered by value, then strategy."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table_csv(table), encoding="utf-8")
    return path
