"""Evaluation scenarios: synchronous and asynchronous registration runs,
coordinate-offset sweeps, brute-force accuracy oracles and results CSVs.

Group members are a random subset of the dataset's hosts, i.e. they are
co-located with DOAT nodes and register through the node on their own host.
"""
from __future__ import annotations

import csv
import json
import math
import pickle
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .bloom import DEFAULT_K, DEFAULT_M, check_params
from .delay_space import (
    RNG_NAME, BoundingBox, average_pairwise_delay, delay, generate_uniform,
    load_coordinates, make_rng,
)
from .node import MemberRecord, NodeConfig, NodeId, Register
from .sfc import CurveParams
from .sim import Simulator

SYNCHRONOUS = "synchronous"
ASYNCHRONOUS = "asynchronous"
PERTURBATION_LAW = "direction uniform on the unit sphere; magnitude uniform on [0.5*o, 1.5*o]"

CSV_COLUMNS = (
    "scenario_id", "seed", "n_nodes", "density_pct", "mode", "update_interval",
    "offset_ms", "query_origin", "group", "hops", "query_time_ms", "R_ms", "C_ms",
    "error", "success",
)


class ScenarioError(ValueError):
    pass


class InvariantBreach(AssertionError):
    pass


class BuildTimeout(RuntimeError):
    """Overlay construction still had events pending at ``max_time``."""


@dataclass(frozen=True)
class Scenario:
    scenario_id: str = "run"
    seed: int = 1
    n_nodes: int = 1000
    dataset: str | None = None        # coordinate file; generated when None
    box_min: float | None = None      # None: [-100, 100] when generated, data extent for files
    box_max: float | None = None
    dim: int = 2
    density: float = 0.10             # members as a fraction of the node count
    groups: int = 1
    mode: str = SYNCHRONOUS
    update_interval: float = 0.0      # in member inter-arrival times; inf allowed
    inter_arrival_ms: float = 1000.0
    query_fraction: float = 0.10      # asynchronous mode: share of nodes querying per arrival
    query_lag: float = 0.5            # asynchronous mode: queries this many inter-arrivals after an arrival
    offsets: tuple = ()
    bloom_m: int = DEFAULT_M
    bloom_k: int = DEFAULT_K
    curve_kind: str = "moore"
    curve_order: int = 16
    query_ttl: int = 64
    max_time: float = 1e7
    shadow: bool = False
    recompute_mean_delay: bool = True

    def validate(self) -> "Scenario":
        if not 0.0 < self.density <= 1.0:
            raise ScenarioError(f"density must be in (0, 1], got {self.density}")
        if not 0.0 < self.query_fraction <= 1.0:
            raise ScenarioError(f"query_fraction must be in (0, 1], got {self.query_fraction}")
        if self.mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ScenarioError(f"unknown mode {self.mode!r}")
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise ScenarioError(f"dataset file not found: {self.dataset}")
        if self.dataset is None and self.n_nodes < 1:
            raise ScenarioError("n_nodes must be >= 1")
        if self.update_interval < 0 or self.inter_arrival_ms <= 0:
            raise ScenarioError("update_interval must be >= 0 and inter_arrival_ms > 0")
        if self.groups < 1:
            raise ScenarioError("groups must be >= 1")
        if any(o < 0 for o in self.offsets):
            raise ScenarioError("offsets must be >= 0")
        if self.query_ttl < 1 or self.max_time <= 0:
            raise ScenarioError("query_ttl and max_time must be positive")
        if (self.box_min is None) != (self.box_max is None):
            raise ScenarioError("set both box_min and box_max or neither")
        if self.box_min is not None and not self.box_min < self.box_max:
            raise ScenarioError("box_min must be below box_max")
        try:
            check_params(self.bloom_m, self.bloom_k)
            CurveParams(self.curve_order, self.curve_kind)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        return self

    @property
    def density_pct(self) -> float:
        return round(self.density * 100.0, 9)

    def metadata(self) -> dict:
        meta = {f.name: getattr(self, f.name) for f in fields(self)}
        meta["offsets"] = list(self.offsets)
        meta["rng"] = RNG_NAME
        meta["perturbation_law"] = PERTURBATION_LAW
        meta["version"] = __version__
        return meta


@dataclass(frozen=True)
class QueryMetric:
    scenario_id: str
    seed: int
    n_nodes: int
    density_pct: float
    mode: str
    update_interval: float
    offset_ms: float
    query_origin: int
    group: str
    hops: int
    query_time_ms: float
    R_ms: float | None
    C_ms: float | None
    error: float | None
    success: bool
    hop_dists: tuple = field(default=(), compare=False, repr=False)
    hop_delays: tuple = field(default=(), compare=False, repr=False)
    false_positive_hops: int = field(default=0, compare=False, repr=False)
    ttl_failure: bool = field(default=False, compare=False, repr=False)

    def row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "QueryMetric":
        def opt(v):
            return None if v == "" else float(v)
        return cls(
            scenario_id=row["scenario_id"], seed=int(row["seed"]), n_nodes=int(row["n_nodes"]),
            density_pct=float(row["density_pct"]), mode=row["mode"],
            update_interval=float(row["update_interval"]), offset_ms=float(row["offset_ms"]),
            query_origin=int(row["query_origin"]), group=row["group"], hops=int(row["hops"]),
            query_time_ms=float(row["query_time_ms"]), R_ms=opt(row["R_ms"]),
            C_ms=opt(row["C_ms"]), error=opt(row["error"]), success=row["success"] == "1",
        )


@dataclass
class RunMetrics:
    scenario: Scenario
    queries: list[QueryMetric]
    routing_messages: int = 0
    overhead: float = 0.0
    quiescent: bool = True
    mean_pairwise_delay: float = 0.0
    member_count: int = 0
    overhead_series: list = field(default_factory=list)  # (members so far, messages per node per member)
    extra: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        meta = self.scenario.metadata()
        meta.update(
            routing_messages=self.routing_messages, overhead=self.overhead,
            quiescent=self.quiescent, mean_pairwise_delay=self.mean_pairwise_delay,
            member_count=self.member_count,
        )
        return meta

    # summaries over successful queries
    def successes(self) -> list[QueryMetric]:
        return [q for q in self.queries if q.success]

    def success_rate(self) -> float:
        return len(self.successes()) / len(self.queries) if self.queries else float("nan")

    def mean_error(self) -> float:
        return _mean(q.error for q in self.successes())

    def mean_query_time(self) -> float:
        return _mean(q.query_time_ms for q in self.successes())

    def mean_hops(self) -> float:
        return _mean(q.hops for q in self.successes())

    def mean_hop_delay(self) -> float:
        ok = self.successes()
        hops = sum(q.hops for q in ok)
        return sum(q.query_time_ms for q in ok) / hops if hops else float("nan")


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return statistics.fmean(values) if values else float("nan")


# -- oracles -----------------------------------------------------------------------

def oracle_closest_member(origin: Sequence[float], members: Sequence[tuple[int, Sequence[float]]]) -> tuple[int, float]:
    """Exhaustive scan for the member nearest to ``origin``.

    ``members`` holds (address, position) pairs; ties go to the lowest address.
    """
    if not members:
        raise ValueError("group has no members")
    best = None
    for addr, pos in members:
        d = delay(origin, pos)
        if best is None or (d, addr) < best:
            best = (d, addr)
    return best[1], best[0]


def accuracy_error(R: float, C: float, D: float) -> float:
    if not D > 0:
        raise ValueError(f"mean delay must be positive, got {D}")
    return (R - C) / D


# -- overlay construction ------------------------------------------------------------

def load_dataset(s: Scenario) -> tuple[list[tuple], BoundingBox]:
    if s.dataset is not None:
        points = load_coordinates(s.dataset)
        if not points:
            raise ScenarioError(f"dataset {s.dataset} is empty")
        dim = len(points[0])
        if s.box_min is not None:
            box = BoundingBox.square(s.box_min, s.box_max, dim)
        else:
            arr = np.asarray(points)
            box = BoundingBox(tuple(arr.min(axis=0).tolist()), tuple(arr.max(axis=0).tolist()))
        return points, box
    lo = -100.0 if s.box_min is None else s.box_min
    hi = 100.0 if s.box_max is None else s.box_max
    box = BoundingBox.square(lo, hi, s.dim)
    return generate_uniform(s.n_nodes, box, s.seed), box


@dataclass
class Overlay:
    """A built, quiescent overlay plus the host -> node mapping."""
    sim: Simulator
    hosts: list[NodeId]
    points: list[tuple]
    mean_delay: float

    def copy(self) -> "Overlay":
        return pickle.loads(pickle.dumps(self, protocol=pickle.HIGHEST_PROTOCOL))


def build_overlay(s: Scenario, trace: list[str] | None = None) -> Overlay:
    points, box = load_dataset(s)
    config = NodeConfig(
        update_interval=s.update_interval * s.inter_arrival_ms,
        bloom_m=s.bloom_m, bloom_k=s.bloom_k, query_ttl=s.query_ttl, shadow=s.shadow,
    )
    sim = Simulator(box, CurveParams(s.curve_order, s.curve_kind), config, trace)
    hosts = sim.build(points, make_rng(s.seed, "bootstrap"))
    if not sim.run_until_quiescent(s.max_time):
        raise BuildTimeout("overlay construction did not quiesce")
    mean = average_pairwise_delay(points) if len(points) > 1 else 0.0
    return Overlay(sim, hosts, points, mean)


def _prepare(s: Scenario, overlay: Overlay | None) -> Overlay:
    s.validate()
    if overlay is None:
        overlay = build_overlay(s)
    sim = overlay.sim
    sim.config.update_interval = s.update_interval * s.inter_arrival_ms
    sim.config.query_ttl = s.query_ttl
    sim.reset_counters()
    sim.responses.clear()
    return overlay


def group_name(i: int) -> bytes:
    return f"group-{i}".encode()


def choose_members(s: Scenario, n_hosts: int) -> list[tuple[int, bytes]]:
    """(host index, group) pairs; groups are dealt round-robin."""
    m = max(s.groups, int(round(s.density * n_hosts)))
    m = min(m, n_hosts)
    hosts = make_rng(s.seed, "members").choice(n_hosts, size=m, replace=False)
    return [(int(h), group_name(i % s.groups)) for i, h in enumerate(hosts)]


def member_record(ov: Overlay, host: int, group: bytes) -> MemberRecord:
    nid = ov.hosts[host]
    return MemberRecord(group, host, ov.sim.positions[nid], nid.ring)


def _collect(s: Scenario, ov: Overlay, members_at, D: float, offset: float = 0.0) -> list[QueryMetric]:
    """Turn the simulator's query responses into metrics.

    ``members_at(qid)`` gives the (address, group) pairs the oracle may pick from.
    """
    sim = ov.sim
    index = {nid: i for i, nid in enumerate(ov.hosts)}
    out = []
    for t, resp in sorted(sim.responses, key=lambda r: r[1].state.qid):
        q = resp.state
        origin_pos = sim.positions[q.origin]
        qtime = t - sim.query_issue_time[q.qid]
        group = q.group.decode()
        candidates = [(a, sim.positions[ov.hosts[a]]) for a, g in members_at(q.qid) if g == q.group]
        R = C = err = None
        ok = resp.member is not None
        if ok and candidates:
            R = delay(origin_pos, sim.positions[ov.hosts[resp.member.address]])
            _, C = oracle_closest_member(origin_pos, candidates)
            err = accuracy_error(R, C, D)
        out.append(QueryMetric(
            s.scenario_id, s.seed, len(ov.hosts), s.density_pct, s.mode,
            float(s.update_interval), float(offset), index[q.origin], group,
            len(q.hop_dists), qtime, R, C, err, ok,
            hop_dists=q.hop_dists, hop_delays=q.hop_delays,
            false_positive_hops=q.false_positive_hops, ttl_failure=resp.ttl_failure,
        ))
    sim.responses.clear()
    return out


def _register_all(ov: Overlay, members, time: float) -> None:
    for host, group in members:
        ov.sim.inject(time, ov.hosts[host], Register(member_record(ov, host, group)))


def _query_everyone(s: Scenario, ov: Overlay, time: float) -> None:
    for nid in ov.hosts:
        for gi in range(s.groups):
            ov.sim.issue_query(nid, group_name(gi), time)


def run_synchronous(s: Scenario, overlay: Overlay | None = None) -> RunMetrics:
    """Register every member at once, wait for quiescence, query from every node."""
    ov = _prepare(s, overlay)
    sim = ov.sim
    members = choose_members(s, len(ov.hosts))
    _register_all(ov, members, sim.now)
    quiet = sim.run_until_quiescent(sim.now + s.max_time)
    routing = sim.sent["RouteUpdate"]
    _query_everyone(s, ov, sim.now)
    quiet = sim.run_until_quiescent(sim.now + s.max_time) and quiet
    queries = _collect(s, ov, lambda qid: members, ov.mean_delay)
    n = len(ov.hosts)
    return RunMetrics(
        s, queries, routing, routing / (n * len(members)), quiet, ov.mean_delay, len(members),
        [(len(members), routing / (n * len(members)))],
    )


def run_asynchronous(s: Scenario, overlay: Overlay | None = None) -> RunMetrics:
    """Members arrive one per inter-arrival time; a random share of nodes
    queries ``query_lag`` inter-arrivals after each arrival."""
    ov = _prepare(s, overlay)
    sim = ov.sim
    members = choose_members(s, len(ov.hosts))
    n = len(ov.hosts)
    ia = s.inter_arrival_ms
    rng = make_rng(s.seed, "queries")
    n_q = max(1, int(round(s.query_fraction * n)))
    arrived_by_qid: dict[int, int] = {}
    snapshots: list[int] = []
    t0 = sim.now + ia
    for k, (host, group) in enumerate(members):
        t = t0 + k * ia
        # snapshot first: same-time events run in scheduling order
        sim.at(t, lambda: snapshots.append(sim.sent["RouteUpdate"]), "arrival")
        sim.inject(t, ov.hosts[host], Register(member_record(ov, host, group)))
        origins = sorted(int(i) for i in rng.choice(n, size=n_q, replace=False))
        for i in origins:
            for gi in range(s.groups):
                qid = sim.issue_query(ov.hosts[i], group_name(gi), t + s.query_lag * ia)
                arrived_by_qid[qid] = k + 1
    quiet = sim.run_until_quiescent(t0 + len(members) * ia + s.max_time)
    routing = sim.sent["RouteUpdate"]
    snapshots.append(routing)
    series = []
    for k in range(len(members)):
        # messages caused by arrival k: until the next arrival (or the end)
        series.append((k + 1, (snapshots[k + 1] - snapshots[k]) / n))
    queries = _collect(s, ov, lambda qid: members[:arrived_by_qid[qid]], ov.mean_delay)
    return RunMetrics(
        s, queries, routing, routing / (n * len(members)), quiet, ov.mean_delay,
        len(members), series,
    )


def run_offset_sweep(s: Scenario, offsets: Sequence[float] | None = None,
                     overlay: Overlay | None = None) -> RunMetrics:
    """Synchronous build and registration, then one query round per offset
    with every host displaced around that mean offset. Ring coordinates stay
    as built, so the overlay routes on stale positions."""
    offsets = tuple(s.offsets if offsets is None else offsets)
    if not offsets:
        raise ScenarioError("offset sweep needs at least one offset")
    s = replace(s, offsets=offsets)
    ov = _prepare(s, overlay)
    sim = ov.sim
    members = choose_members(s, len(ov.hosts))
    _register_all(ov, members, sim.now)
    quiet = sim.run_until_quiescent(sim.now + s.max_time)
    routing = sim.sent["RouteUpdate"]
    queries: list[QueryMetric] = []
    per_offset = {}
    for o in offsets:
        saved = sim.perturb_positions(float(o), make_rng(s.seed, f"offset:{float(o)!r}"))
        D = ov.mean_delay
        if s.recompute_mean_delay and o:
            D = average_pairwise_delay([sim.positions[h] for h in ov.hosts])
        _query_everyone(s, ov, sim.now)
        quiet = sim.run_until_quiescent(sim.now + s.max_time) and quiet
        batch = _collect(s, ov, lambda qid: members, D, float(o))
        per_offset[float(o)] = _mean(q.error for q in batch if q.success)
        queries.extend(batch)
        sim.restore_positions(saved)
    n = len(ov.hosts)
    return RunMetrics(
        s, queries, routing, routing / (n * len(members)), quiet, ov.mean_delay,
        len(members), extra={"mean_error_by_offset": per_offset},
    )


def run(s: Scenario, overlay: Overlay | None = None) -> RunMetrics:
    if s.offsets:
        return run_offset_sweep(s, overlay=overlay)
    if s.mode == ASYNCHRONOUS:
        return run_asynchronous(s, overlay)
    return run_synchronous(s, overlay)


def overlay_key(s: Scenario) -> tuple:
    """Scenarios with equal keys can start from the same built overlay."""
    return (s.dataset or "", s.n_nodes, s.seed, s.box_min, s.box_max, s.dim,
            s.curve_kind, s.curve_order, s.bloom_m, s.bloom_k, s.shadow)


def point_key(s: Scenario) -> tuple:
    """Sort key of a sweep point (everything but the seed)."""
    return (s.scenario_id, s.dataset or "", s.n_nodes, s.mode, s.density, s.groups,
            s.update_interval, s.curve_kind, s.bloom_m, s.offsets)


def run_key(s: Scenario) -> tuple:
    return point_key(s) + (s.seed,)


def run_batch(scenarios: Sequence[Scenario]) -> list[RunMetrics]:
    """Run scenarios in order, building each distinct overlay once."""
    built: dict[tuple, Overlay] = {}
    out = []
    for s in scenarios:
        key = overlay_key(s)
        if key not in built:
            built.clear()
            built[key] = build_overlay(s)
        out.append(run(s, built[key].copy()))
    return out


SUMMARY_COLUMNS = (
    "scenario_id", "n_nodes", "density_pct", "mode", "update_interval", "seeds",
    "mean_error", "std_error", "mean_query_time_ms", "std_query_time_ms",
    "mean_hops", "mean_hop_delay_ms", "success_rate", "overhead", "std_overhead",
    "mean_pairwise_delay_ms", "offset_errors",
)


def summarize(runs: Sequence[RunMetrics]) -> list[dict]:
    """Mean and standard deviation over seeds for every sweep point."""
    points: dict[tuple, list[RunMetrics]] = {}
    for m in runs:
        points.setdefault(point_key(m.scenario), []).append(m)
    rows = []
    for key in sorted(points, key=repr):
        group = sorted(points[key], key=lambda m: m.scenario.seed)
        s = group[0].scenario

        def stat(fn):
            vals = [fn(m) for m in group]
            vals = [v for v in vals if not math.isnan(v)]
            if not vals:
                return float("nan"), float("nan")
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            return statistics.fmean(vals), sd

        err = stat(RunMetrics.mean_error)
        qt = stat(RunMetrics.mean_query_time)
        ovh = stat(lambda m: m.overhead)
        offsets = ""
        if s.offsets:
            per = {o: statistics.fmean(m.extra["mean_error_by_offset"][float(o)] for m in group)
                   for o in s.offsets}
            offsets = ";".join(f"{o:g}:{v:.6g}" for o, v in per.items())
        rows.append({
            "scenario_id": s.scenario_id,
            "n_nodes": group[0].queries[0].n_nodes if group[0].queries else s.n_nodes,
            "density_pct": s.density_pct, "mode": s.mode, "update_interval": s.update_interval,
            "seeds": len(group),
            "mean_error": err[0], "std_error": err[1],
            "mean_query_time_ms": qt[0], "std_query_time_ms": qt[1],
            "mean_hops": stat(RunMetrics.mean_hops)[0],
            "mean_hop_delay_ms": stat(RunMetrics.mean_hop_delay)[0],
            "success_rate": stat(RunMetrics.success_rate)[0],
            "overhead": ovh[0], "std_overhead": ovh[1],
            "mean_pairwise_delay_ms": stat(lambda m: m.mean_pairwise_delay)[0],
            "offset_errors": offsets,
        })
    return rows


def write_summary(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# -- invariants over a finished run -----------------------------------------------------

def check_run_invariants(m: RunMetrics, eps: float = 1e-9) -> list[str]:
    """Violations of the per-query invariants; empty when all hold."""
    problems = []
    for q in m.queries:
        if q.success and q.error is not None and q.error < -eps:
            problems.append(f"negative error {q.error} at origin {q.query_origin}")
        if not math.isclose(q.query_time_ms, sum(q.hop_delays), rel_tol=1e-9, abs_tol=1e-9):
            problems.append(f"query time {q.query_time_ms} != hop delay sum at origin {q.query_origin}")
        fp_free = q.false_positive_hops == 0
        if m.quiescent and fp_free and q.success and q.offset_ms == 0 and q.mode == SYNCHRONOUS:
            d = q.hop_dists
            if any(b >= a for a, b in zip(d, d[1:])):
                problems.append(f"hop distances not decreasing at origin {q.query_origin}: {d}")
    return problems


# -- results files ------------------------------------------------------------------------

def write_results(runs: RunMetrics | Sequence[RunMetrics], path: str | Path) -> None:
    """CSV of per-query rows, preceded by one ``#`` JSON metadata line per run."""
    if isinstance(runs, RunMetrics):
        runs = [runs]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for m in runs:
            fh.write("# " + json.dumps(m.metadata(), sort_keys=True, default=_json_default) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in runs:
            for q in m.queries:
                w.writerow(q.row())


def _json_default(v):
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def read_results(path: str | Path) -> tuple[list[dict], list[QueryMetric]]:
    meta, body = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                meta.append(json.loads(line[1:]))
            else:
                body.append(line)
    rows = [QueryMetric.from_row(r) for r in csv.DictReader(body)]
    return meta, rows
