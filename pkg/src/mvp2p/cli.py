"""Command line: ``run``, ``sweep``, ``optimal`` and ``allocate``.

Exit codes: 0 success, 1 bad configuration or flags, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from mvp2p.flow import FlowError, PeerSubsetStats, allocate, theoretical_optimal_share
from mvp2p.harness import (
    load_sweep,
    resolve_config,
    run_sweep,
    scenario_names,
    scenario_path,
    table_csv,
)
from mvp2p.layers import LayerError, LayerGraph, LayerId, resolve_layer_spec
from mvp2p.sim.config import ConfigError, ScenarioConfig
from mvp2p.sim.engine import Simulation, generate_population, population_stats

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _overrides(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key] = yaml.safe_load(raw)
    return out


def _config(args) -> ScenarioConfig:
    cfg = resolve_config(args.config)
    changes = _overrides(args.set or [])
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strategy is not None:
        changes["strategy"] = args.strategy
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _cmd_run(args, out) -> int:
    cfg = _config(args)
    sim = Simulation(cfg, check_invariants=args.check)
    m = sim.run()
    lo, hi = m.window
    print(f"strategy           {cfg.strategy}", file=out)
    print(f"peers              {cfg.peer_count}", file=out)
    print(f"seed               {cfg.seed}", file=out)
    print(f"window_s           {lo:.1f}-{hi:.1f}", file=out)
    print(f"server_bps         {m.server_bps:.0f}", file=out)
    print(f"total_bps          {m.total_bps:.0f}", file=out)
    print(f"P_s                {m.ps:.4f}", file=out)
    if m.optimal_share is not None:
        print(f"optimal_P_s        {m.optimal_share:.4f}", file=out)
    print(f"rescue_share       {m.rescue_server_bits / m.total_bits:.4f}", file=out)
    print(f"missed_deadlines   {m.missed_deadlines}", file=out)
    print(f"switches           {m.switches}", file=out)
    print(f"departures         {m.departures}", file=out)
    if args.csv:
        Path(args.csv).write_text(m.samples_csv(), encoding="utf-8")
    return EXIT_OK


def _cmd_sweep(args, out) -> int:
    path = Path(args.spec)
    spec = load_sweep(path if path.is_file() else scenario_path(args.spec))
    changes = _overrides(args.set or [])
    if changes:
        try:
            spec = dataclasses.replace(spec, base=spec.base.replace(**changes))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    if args.seeds is not None:
        spec = dataclasses.replace(spec, seeds=args.seeds)
    if args.out is not None:
        spec = dataclasses.replace(spec, output=Path(args.out))

    def progress(r) -> None:
        if args.verbose:
            print(f"{spec.parameter}={r.value} {r.strategy} seed={r.seed} P_s={r.ps:.4f}",
                  file=sys.stderr)

    table = run_sweep(spec, workers=args.workers, progress=progress)
    if spec.output is None:
        out.write(table_csv(table))
    else:
        print(f"wrote {spec.output}", file=out)
    return EXIT_OK


def load_population(path: str | Path) -> tuple[LayerGraph, list[PeerSubsetStats]]:
    """Population file: either a scenario config, whose population is drawn
    from its seed, or ``layer_spec`` plus a ``subsets`` list of
    ``{observing, peers, outbound_bps}`` (total outbound of the subset)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    if "subsets" in doc:
        graph = resolve_layer_spec(doc.get("layer_spec", "ballroom"))
        pop = []
        for item in doc["subsets"] or ():
            try:
                pop.append(PeerSubsetStats(LayerId.parse(str(item["observing"])),
                                           int(item["peers"]), float(item["outbound_bps"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad subset entry {item!r}: {exc}") from exc
        return graph, pop
    cfg = resolve_config(path)
    graph = resolve_layer_spec(cfg.layer_spec)
    return graph, population_stats(generate_population(cfg, graph))


def _cmd_optimal(args, out) -> int:
    graph, pop = load_population(args.population)
    print(f"{theoretical_optimal_share(graph, pop):.6f}", file=out)
    return EXIT_OK


def _cmd_allocate(args, out) -> int:
    graph, pop = load_population(args.population)
    alloc = allocate(graph, pop)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["kind", "subset", "layer", "bps", "share", "copies"])
    for subset in sorted(alloc.supply):
        for layer in sorted(alloc.supply[subset]):
            bps = alloc.solution.value(("s", subset), ("r", layer))
            w.writerow(["flow", subset, layer, f"{bps:.3f}", f"{alloc.supply[subset][layer]:.6f}", ""])
    for layer in sorted(alloc.quota):
        w.writerow(["quota", "", layer, f"{alloc.quota[layer]:.3f}", "", alloc.copies[layer]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvp2p", description="Layered multiview P2P streaming simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario and print a summary")
    r.add_argument("--config", required=True, help="scenario file or bundled scenario name")
    r.add_argument("--seed", type=int)
    r.add_argument("--strategy", choices=["mvp2p", "srt"])
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    r.add_argument("--csv", help="write the periodic samples here")
    r.add_argument("--check", action="store_true", help="assert engine invariants while running")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run a parameter sweep and emit its CSV table")
    s.add_argument("--spec", required=True, help="sweep file or bundled sweep name")
    s.add_argument("--out", help="CSV path (default: the sweep file's output, else stdout)")
    s.add_argument("--seeds", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base field")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=_cmd_sweep)

    o = sub.add_parser("optimal", help="print the max-flow bound on the server share")
    o.add_argument("--population", required=True)
    o.set_defaults(func=_cmd_optimal)

    a = sub.add_parser("allocate", help="dump the flow table and server quotas")
    a.add_argument("--population", required=True)
    a.set_defaults(func=_cmd_allocate)

    sub.add_parser("list", help="list bundled scenarios and sweeps").set_defaults(
        func=lambda args, out: print("\n".join(scenario_names()), file=out) or EXIT_OK)
    return p


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except (UsageError, ConfigError, LayerError, FlowError) as exc:
        print(f"mvp2p: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"mvp2p: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
