"""Command-line front end.

    doat generate --n 500 --seed 1 --out nodes.txt
    doat validate --config configs/sync.ini
    doat run --config configs/sync.ini --out results.csv
    doat sweep --config configs/accuracy.ini --jobs 1
    doat trace trace.log --kind Query
"""
from __future__ import annotations

import argparse
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .delay_space import (
    BoundingBox, CoordinateFileError, DimensionError, generate_uniform, write_coordinates,
)
from .experiments import (
    BuildTimeout, InvariantBreach, RunMetrics, ScenarioError, build_overlay, check_run_invariants,
    overlay_key, run, run_batch, run_key, summarize, write_results, write_summary,
)
from .node import RoutingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NOT_QUIESCENT = 3
EXIT_INVARIANT = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="doat", description="Delay-aware anycast overlay simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a uniform random coordinate file")
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--min", type=float, default=-100.0, dest="lo")
    g.add_argument("--max", type=float, default=100.0, dest="hi")
    g.add_argument("--dim", type=_positive_int, default=2)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("validate", help="check a config and print the materialized scenarios")
    v.add_argument("--config", type=Path, required=True)

    for name, text in (("run", "execute one scenario"), ("sweep", "execute every sweep point and seed")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", type=Path, required=True)
        r.add_argument("--out", type=Path, help="results CSV (overrides [output] results)")
        r.add_argument("--seed", type=int, help="override the scenario seed")
        r.add_argument("--trace", type=Path, help="write one line per message to this file")
        if name == "sweep":
            r.add_argument("--jobs", type=_positive_int, default=1,
                           help="worker processes; output does not depend on it")
        r.add_argument("--quiet", action="store_true")

    t = sub.add_parser("trace", help="summarise a message trace")
    t.add_argument("path", type=Path)
    t.add_argument("--kind", help="print lines of this message kind")
    t.add_argument("--node", help="print lines sent or received by this node, e.g. n12")
    return p


def cmd_generate(args) -> int:
    if not args.lo < args.hi:
        print("error: --min must be below --max", file=sys.stderr)
        return EXIT_USAGE
    box = BoundingBox.square(args.lo, args.hi, args.dim)
    points = generate_uniform(args.n, box, args.seed)
    header = [f"uniform n={args.n} box=[{args.lo:g},{args.hi:g}]^{args.dim} seed={args.seed}"]
    write_coordinates(points, args.out, header)
    return EXIT_OK


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.scenario = replace(cfg.scenario, seed=args.seed)
        cfg.axes.pop("seed", None)
    return cfg


def cmd_validate(args) -> int:
    cfg = _load(args)
    scenarios = cfg.expand()
    for s in scenarios:
        print(s)
    print(f"{len(scenarios)} run(s)")
    return EXIT_OK


def _report(m: RunMetrics, out) -> None:
    s = m.scenario
    print(
        f"{s.scenario_id} seed={s.seed} density={s.density_pct:g}% mode={s.mode} "
        f"interval={s.update_interval:g}: error={m.mean_error():.4f} "
        f"query_time={m.mean_query_time():.1f}ms hops={m.mean_hops():.2f} "
        f"success={m.success_rate():.4f} overhead={m.overhead:.3f}",
        file=out,
    )


def _verdict(runs: list[RunMetrics]) -> int:
    code = EXIT_OK
    for m in runs:
        problems = check_run_invariants(m)
        for p in problems[:5]:
            print(f"invariant breach ({m.scenario.scenario_id} seed {m.scenario.seed}): {p}",
                  file=sys.stderr)
        if problems:
            return EXIT_INVARIANT
        if not m.quiescent:
            print(f"run {m.scenario.scenario_id} seed {m.scenario.seed} did not quiesce",
                  file=sys.stderr)
            code = EXIT_NOT_QUIESCENT
    return code


def _results_path(args, cfg: RunConfig) -> Path:
    return args.out or cfg.results or Path("results.csv")


def cmd_run(args) -> int:
    cfg = _load(args)
    if cfg.axes:
        raise ConfigError("config has a [sweep] section; use the sweep command")
    s = cfg.scenario
    trace_path = args.trace or cfg.trace
    trace: list[str] | None = [] if trace_path else None
    m = run(s, build_overlay(s, trace))
    write_results(m, _results_path(args, cfg))
    if trace_path:
        Path(trace_path).write_text("".join(line + "\n" for line in trace), encoding="utf-8")
    if not args.quiet:
        _report(m, sys.stdout)
    return _verdict([m])


def _traced_batch(scenarios) -> tuple[list[RunMetrics], list[str]]:
    runs, lines = [], []
    for s in scenarios:
        trace: list[str] = []
        runs.append(run(s, build_overlay(s, trace)))
        lines.append(f"# run {s.scenario_id} seed={s.seed} density={s.density!r} "
                     f"interval={s.update_interval!r} n={s.n_nodes}")
        lines.extend(trace)
    return runs, lines


def cmd_sweep(args) -> int:
    cfg = _load(args)
    scenarios = sorted(cfg.expand(), key=run_key)
    trace_path = args.trace or cfg.trace
    lines: list[str] = []
    if trace_path:
        runs, lines = _traced_batch(scenarios)
    else:
        batches: dict[tuple, list] = {}
        for s in scenarios:
            batches.setdefault(overlay_key(s), []).append(s)
        groups = list(batches.values())
        if args.jobs > 1 and len(groups) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(run_batch, groups))
        else:
            results = [run_batch(g) for g in groups]
        runs = sorted((m for batch in results for m in batch), key=lambda m: run_key(m.scenario))
    out = _results_path(args, cfg)
    write_results(runs, out)
    write_summary(summarize(runs), out.with_name(out.stem + "_summary.csv"))
    if trace_path:
        Path(trace_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if not args.quiet:
        for m in runs:
            _report(m, sys.stdout)
    return _verdict(runs)


def cmd_trace(args) -> int:
    kinds: Counter = Counter()
    shown = 0
    with open(args.path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                continue
            _, src, dst, kind, _ = parts
            kinds[kind] += 1
            if (args.kind and kind != args.kind) or (args.node and args.node not in (src, dst)):
                continue
            if args.kind or args.node:
                print(line.rstrip("\n"))
                shown += 1
    for kind, count in sorted(kinds.items()):
        print(f"{kind}\t{count}", file=sys.stderr if shown else sys.stdout)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "validate": cmd_validate, "run": cmd_run,
    "sweep": cmd_sweep, "trace": cmd_trace,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ScenarioError, CoordinateFileError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BuildTimeout as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_QUIESCENT
    except (InvariantBreach, RoutingError) as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
