from __future__ import annotations

import math
import statistics

import pytest
from hypothesis import given, strategies as st

from doat.bloom import BloomFilter
from doat.delay_space import DEFAULT_BOX, delay, generate_uniform, make_rng
from doat.node import (
    HARNESS, JoinProbe, Leave, MemberRecord, Node, NodeConfig, NodeId, Query, QueryState,
    Register, RouteUpdate, between, build_neighbor_set, direction_of, resolve_target, resolve_ttl,
)
from doat.sfc import ANTICLOCKWISE, CLOCKWISE, ring_distance
from doat.sim import Simulator

from conftest import built_sim

G = b"group-0"


def nid(ring: float, t: int = 0) -> NodeId:
    return NodeId(ring, t)


def node_with(ring: float, neighbours: dict[float, BloomFilter] | list[float], **cfg) -> Node:
    n = Node(nid(ring, 0), (0.0, 0.0), NodeConfig(**cfg))
    items = neighbours.items() if isinstance(neighbours, dict) else ((r, None) for r in neighbours)
    for i, (r, f) in enumerate(items, start=1):
        other = nid(r, i)
        n.add_neighbor(other)
        if f is not None:
            n.neighbors[other].filter = f
    n._dirty()
    n.pending.clear()
    return n


def static_overlay(rings: list[float], links: list[tuple[int, int]], **cfg) -> tuple[Simulator, list[NodeId]]:
    """Hand-wired overlay; positions spread on a line so latencies are positive."""
    sim = Simulator(DEFAULT_BOX, config=NodeConfig(**cfg))
    ids = [NodeId(r, i) for i, r in enumerate(rings)]
    for i, x in enumerate(ids):
        sim.attach(Node(x, (float(10 * i), 0.0), sim.config))
    for a, b in links:
        sim.nodes[ids[a]].add_neighbor(ids[b])
        sim.nodes[ids[b]].add_neighbor(ids[a])
    for x in ids:
        sim._emit(x, sim.nodes[x].maybe_flush(0.0))
    sim.run_until_quiescent()
    sim.reset_counters()
    return sim, ids


def record(ring: float, address: int = 0, group: bytes = G) -> MemberRecord:
    return MemberRecord(group, address, (0.0, 0.0), ring)


def query_all(sim: Simulator, group: bytes = G) -> list:
    sim.responses.clear()
    for x in sorted(sim.nodes):
        sim.issue_query(x, group)
    sim.run_until_quiescent()
    return [r for _, r in sorted(sim.responses, key=lambda tr: tr[1].state.qid)]


def table_sorted(n: Node) -> bool:
    keys = [e.sort_key() for e in n.table]
    return keys == sorted(keys)


# -- ids and helpers ------------------------------------------------------------

def test_node_id_order_is_lexicographic():
    assert NodeId(0.2, 5) < NodeId(0.3, 0)
    assert NodeId(0.2, 1) < NodeId(0.2, 2)
    assert str(NodeId(0.2, 7)) == "n7"


def test_direction_and_between():
    assert direction_of(nid(0.1), nid(0.3)) == CLOCKWISE
    assert direction_of(nid(0.1), nid(0.9)) == ANTICLOCKWISE
    assert direction_of(nid(0.9), nid(0.1)) == CLOCKWISE
    assert direction_of(nid(0.5, 0), nid(0.5, 1)) == CLOCKWISE
    assert between(nid(0.1), nid(0.2), nid(0.3))
    assert between(nid(0.9), nid(0.05), nid(0.1))
    assert not between(nid(0.1), nid(0.4), nid(0.3))


def test_resolve_ttl():
    assert resolve_ttl(1000) == 2 * 10 + 16


# -- resolution and joins ----------------------------------------------------------

def test_singleton_resolves_to_itself():
    sim = built_sim(1, 1)
    only = next(iter(sim.nodes))
    assert resolve_target(sim.nodes, only, 0.77) == (only, 0)


def test_three_node_ring_resolution():
    sim, ids = static_overlay([0.1, 0.5, 0.9], [(0, 1), (1, 2), (0, 2)])
    for start in ids:
        assert resolve_target(sim.nodes, start, 0.55)[0] == ids[1]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_resolution_matches_exhaustive_scan(seed):
    sim = built_sim(1000, seed)
    ids = sorted(sim.nodes)
    rng = make_rng(seed, "targets")
    bound = math.ceil(math.log2(len(ids))) + 4
    for _ in range(300):
        target = float(rng.random())
        start = ids[int(rng.integers(len(ids)))]
        found, hops = resolve_target(sim.nodes, start, target)
        best = min(ids, key=lambda x: (ring_distance(x.ring, target), x))
        assert ring_distance(found.ring, target) == ring_distance(best.ring, target)
        assert hops <= bound


def test_two_node_overlay():
    sim = built_sim(2, 4)
    a, b = sorted(sim.nodes)
    assert set(sim.nodes[a].neighbors) == {b}
    assert set(sim.nodes[b].neighbors) == {a}
    assert sim.nodes[a].immediates() == (b, b)


def test_join_probe_targets():
    rings = [0.05 + 0.1 * i for i in range(10)]
    sim, ids = static_overlay(rings, [(i, (i + 1) % 10) for i in range(10)])
    joiner = Node(NodeId(0.43, 99), (0.0, 0.0))
    trace = build_neighbor_set(sim.nodes, joiner, ids[0])
    targets = [m.target for _, _, m in trace if isinstance(m, JoinProbe)]
    assert targets[0] == pytest.approx(0.93)
    assert targets[1:3] == [pytest.approx(0.68), pytest.approx(0.18)]


@pytest.mark.parametrize("seed", [1, 2])
def test_immediates_match_ring_order(seed):
    sim = built_sim(500, seed)
    ids = sorted(sim.nodes)
    for i, x in enumerate(ids):
        assert sim.nodes[x].immediates() == (ids[i - 1], ids[(i + 1) % len(ids)])


def test_out_degree_is_logarithmic():
    # probes issued by each joiner (its own links); in-links double the total
    outs = []
    for seed in range(1, 4):
        sim = Simulator(DEFAULT_BOX, trace=[])
        rng = make_rng(seed, "bootstrap")
        for p in generate_uniform(1000, DEFAULT_BOX, seed):
            before = len(sim.trace)
            sim.add_node(p, rng=rng, flush=False)
            outs.append(sum(" JoinAccept " in line for line in sim.trace[before:]))
    mean = statistics.fmean(outs)
    assert math.log2(1000) - 2 <= mean <= 2 * math.log2(1000) + 4


def test_links_are_bidirectional():
    sim = built_sim(300, 5)
    for x, n in sim.nodes.items():
        for y in n.neighbors:
            assert x in sim.nodes[y].neighbors
        assert table_sorted(n)


# -- announcements ---------------------------------------------------------------------

def test_announcement_examples():
    fa, fb, fc = (BloomFilter.of([g]) for g in (b"a", b"b", b"c"))
    n = node_with(0.5, {0.6: fa, 0.7: fb, 0.9: fc})  # distances 0.1, 0.2, 0.4
    n.local_filter = BloomFilter.of([b"local"])
    n._dirty()
    near, mid, far = (e.id for e in n.table)
    assert n.compute_announcement(near) == n.local_filter
    assert n.compute_announcement(mid) == n.local_filter.union(fa)
    assert n.compute_announcement(far) == n.local_filter.union(fa, fb)


def test_equidistant_entries_do_not_feed_each_other():
    fa, fb = BloomFilter.of([b"a"]), BloomFilter.of([b"b"])
    n = node_with(0.5, {0.75: fa, 0.25: fb})
    cw, acw = (e.id for e in n.table)
    assert n.table[0].dir == CLOCKWISE
    assert n.compute_announcement(cw) == BloomFilter.empty()
    assert n.compute_announcement(acw) == BloomFilter.empty()


@given(st.lists(st.tuples(st.floats(0.0, 0.999), st.binary(min_size=1, max_size=4)),
                min_size=1, max_size=12, unique_by=lambda t: t[0]))
def test_announcement_monotone(entries):
    n = node_with(0.5, {r: BloomFilter.of([g]) for r, g in entries if r != 0.5})
    table = n.table
    for a, b in zip(table, table[1:]):
        fa, fb = n.compute_announcement(a.id), n.compute_announcement(b.id)
        assert fa.bits & fb.bits == fa.bits
    assert table_sorted(n)


# -- route updates and throttling --------------------------------------------------------

def test_update_from_unknown_sender_is_counted():
    n = node_with(0.5, [0.6])
    out = n.handle_route_update(RouteUpdate(nid(0.1, 50), BloomFilter.of([G]), ()), 0.0)
    assert out == [] and n.unknown_sender_drops == 1


def test_update_from_nearest_marks_all_others():
    n = node_with(0.5, [0.55, 0.7, 0.9])
    near = n.table[0].id
    out = n.handle_route_update(RouteUpdate(near, BloomFilter.of([G]), ()), 0.0)
    assert sorted(d for d, _ in out) == sorted(e.id for e in n.table[1:])
    assert all(m.filter.contains(G) for _, m in out)


def test_update_from_farthest_goes_nowhere():
    n = node_with(0.5, [0.55, 0.7, 0.9])
    far = n.table[-1].id
    assert n.handle_route_update(RouteUpdate(far, BloomFilter.of([G]), ()), 0.0) == []
    assert n.neighbors[far].filter.contains(G)


def test_repeated_update_is_absorbed():
    n = node_with(0.5, [0.55, 0.7])
    near = n.table[0].id
    msg = RouteUpdate(near, BloomFilter.of([G]), (nid(0.4, 70), nid(0.6, 71)))
    assert n.handle_route_update(msg, 0.0)
    assert n.handle_route_update(msg, 1.0) == []
    assert n.neighbors[near].alternates == msg.alternates


def test_update_carries_immediates():
    n = node_with(0.5, [0.45, 0.55, 0.9])
    n.registry[G] = [record(0.5)]
    out = n.handle_register(Register(record(0.5)), 0.0)
    assert out
    pred, succ = n.immediates()
    assert pred.ring == 0.45 and succ.ring == 0.55
    for _, m in out:
        assert m.alternates == (pred, succ)


def test_throttle_holds_and_schedules():
    n = node_with(0.5, [0.6], update_interval=100.0)
    other = n.table[0].id
    n.pending.add(other)
    assert len(n.maybe_flush(0.0)) == 1
    n.pending.add(other)
    assert n.maybe_flush(40.0) == []
    assert n.wakeup == 100.0
    assert len(n.maybe_flush(100.0)) == 1 and not n.pending


def test_infinite_interval_sends_only_first():
    n = node_with(0.5, [0.6], update_interval=math.inf)
    other = n.table[0].id
    n.pending.add(other)
    assert len(n.maybe_flush(0.0)) == 1
    n.pending.add(other)
    assert n.maybe_flush(1e12) == [] and n.wakeup is None


def _chain(gaps: list[float]) -> tuple[Simulator, list[NodeId]]:
    rings = [0.05]
    for g in gaps:
        rings.append(rings[-1] + g)
    return static_overlay(rings, [(i, i + 1) for i in range(len(rings) - 1)])


def test_chain_of_eight_full_propagation():
    # gaps widen away from the registrar, so each node's link back toward it
    # is its strictly closer entry
    sim, ids = _chain([0.01 * (i + 1) for i in range(7)])
    sim.inject(sim.now, ids[0], Register(record(ids[0].ring)))
    assert sim.run_until_quiescent()
    for i in range(1, 8):
        assert sim.nodes[ids[i]].neighbors[ids[i - 1]].filter.contains(G)
    assert all(r.member is not None for r in query_all(sim))


def test_chain_stalls_where_neighbours_are_not_strictly_closer():
    sim, ids = _chain([0.04, 0.02, 0.02, 0.02])
    sim.inject(sim.now, ids[0], Register(record(ids[0].ring)))
    assert sim.run_until_quiescent()
    assert sim.nodes[ids[1]].neighbors[ids[0]].filter.contains(G)
    # node 1's link to node 0 is farther than its link to node 2
    assert not sim.nodes[ids[2]].neighbors[ids[1]].filter.contains(G)


# -- registration ------------------------------------------------------------------------------

def test_registration_lands_at_ring_nearest_node():
    sim = built_sim(200, 6)
    ids = sorted(sim.nodes)
    rng = make_rng(6, "reg")
    for i in range(20):
        ring = float(rng.random())
        sim.register(record(ring, i), ids[int(rng.integers(len(ids)))])
    sim.run_until_quiescent()
    for x, n in sim.nodes.items():
        for recs in n.registry.values():
            for r in recs:
                for other in n.immediates():
                    assert ring_distance(r.ring, x.ring) <= ring_distance(r.ring, other.ring)


def test_far_apart_registrars_hold_one_record_each():
    sim = built_sim(200, 7)
    ids = sorted(sim.nodes)
    sim.register(record(ids[10].ring, 1), ids[0])
    sim.register(record(ids[110].ring, 2), ids[0])
    sim.run_until_quiescent()
    assert sim.nodes[ids[10]].registry[G] == [record(ids[10].ring, 1)]
    assert sim.nodes[ids[110]].registry[G] == [record(ids[110].ring, 2)]


# -- queries --------------------------------------------------------------------------------------

def test_query_at_registrar_takes_zero_hops():
    n = node_with(0.5, [0.6])
    n.registry[G] = [record(0.5)]
    out = n.handle_query(Query(QueryState(0, G, n.id, (n.id,))), 0.0)
    assert out[0][0] is HARNESS and out[0][1].member == record(0.5)
    assert out[0][1].state.hop_dists == ()


def test_unknown_group_not_found_at_origin():
    sim = built_sim(50, 8)
    responses = query_all(sim, b"nobody")
    assert all(r.member is None and r.state.path == (r.state.origin,) for r in responses)


def test_registry_picks_member_nearest_to_origin():
    n = node_with(0.5, [])
    n.registry[G] = [record(0.52, 1), record(0.47, 2)]
    assert n.pick_member(G, nid(0.40)).address == 2
    assert n.pick_member(G, nid(0.60)).address == 1


def test_false_positive_recovery_skips_visited_and_ends():
    # every neighbour claims the group but nobody has it
    full = BloomFilter(1024, 7, (1 << 1024) - 1)
    n = node_with(0.5, {0.6: full, 0.7: full})
    first, second = (e.id for e in n.table)
    q = QueryState(0, G, nid(0.1, 77), (nid(0.1, 77), first))
    out = n.handle_query(Query(q), 0.0)
    assert out[0][0] == second and out[0][1].state.path[-1] == second
    q = QueryState(0, G, nid(0.1, 77), (nid(0.1, 77), first, second))
    assert n.handle_query(Query(q), 0.0)[0][1].member is None
    q = QueryState(0, G, nid(0.1, 77), (nid(0.1, 77),), ttl=0)
    resp = n.handle_query(Query(q), 0.0)[0][1]
    assert resp.member is None and resp.ttl_failure


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_quiescent_queries_succeed_with_decreasing_hops(seed):
    sim = built_sim(400, seed, config=NodeConfig(shadow=True))
    ids = sorted(sim.nodes)
    rng = make_rng(seed, "members")
    for i in rng.choice(len(ids), size=8, replace=False):
        x = ids[int(i)]
        sim.register(MemberRecord(G, int(i), sim.positions[x], x.ring), x)
    assert sim.run_until_quiescent()
    for r in query_all(sim):
        q = r.state
        if q.false_positive_hops:
            continue
        assert r.member is not None
        assert all(b < a for a, b in zip(q.hop_dists, q.hop_dists[1:]))


def test_shadow_sets_never_contradict_filters():
    sim = built_sim(200, 9, config=NodeConfig(shadow=True, bloom_m=64, bloom_k=2))
    ids = sorted(sim.nodes)
    for i, x in enumerate(ids[::10]):
        g = f"group-{i % 7}".encode()
        sim.register(MemberRecord(g, i, sim.positions[x], x.ring), x)
    sim.run_until_quiescent()
    for n in sim.nodes.values():
        for e in n.table:
            assert all(e.filter.contains(g) for g in e.shadow)


# -- churn ----------------------------------------------------------------------------------------------

def test_three_node_ring_middle_leaves():
    sim, ids = static_overlay([0.1, 0.4, 0.7], [(0, 1), (1, 2)])
    sim.leave_node(ids[1])
    sim.run_until_quiescent()
    assert ids[2] in sim.nodes[ids[0]].neighbors and ids[0] in sim.nodes[ids[2]].neighbors


def _register_some(sim: Simulator, count: int, seed: int, group: bytes = G) -> list[NodeId]:
    ids = sorted(sim.nodes)
    picks = [ids[int(i)] for i in make_rng(seed, "members").choice(len(ids), size=count, replace=False)]
    for i, x in enumerate(picks):
        sim.register(MemberRecord(group, i, sim.positions[x], x.ring), x)
    assert sim.run_until_quiescent()
    return picks


def test_leave_keeps_groups_reachable():
    sim = built_sim(100, 10)
    registrars = _register_some(sim, 5, 10)
    sim.leave_node(registrars[0])
    assert sim.run_until_quiescent()
    assert all(r.member is not None for r in query_all(sim))
    assert sum(len(n.registry.get(G, ())) for n in sim.nodes.values()) == 5


def test_failure_swaps_in_alternates():
    sim = built_sim(50, 11)
    victim = sorted(sim.nodes)[17]
    holders = [x for x, n in sim.nodes.items() if victim in n.neighbors]
    sim.fail_node(victim)
    sim.run_until_quiescent()
    for x in holders:
        assert victim not in sim.nodes[x].neighbors
    ids = sorted(sim.nodes)
    for i, x in enumerate(ids):
        assert sim.nodes[x].immediates() == (ids[i - 1], ids[(i + 1) % len(ids)])


def test_failed_registrar_loses_its_members():
    sim = built_sim(60, 12)
    x = _register_some(sim, 1, 12)[0]
    lost = sim.fail_node(x)
    assert len(lost) == 1
    sim.run_until_quiescent()
    assert all(r.member is None for r in query_all(sim))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_queries_survive_a_failure(seed):
    sim = built_sim(500, seed)
    registrars = set(_register_some(sim, 25, seed))
    rng = make_rng(seed, "fail")
    others = [x for x in sorted(sim.nodes) if x not in registrars]
    sim.fail_node(others[int(rng.integers(len(others)))])
    sim.run_until_quiescent()
    responses = query_all(sim)
    assert sum(r.member is not None for r in responses) / len(responses) >= 0.99


def test_small_drift_keeps_topology():
    sim = built_sim(50, 13)
    x = sorted(sim.nodes)[5]
    before = {k: set(n.neighbors) for k, n in sim.nodes.items()}
    p = sim.positions[x]
    assert sim.reinsert(x, (p[0] + 1e-6, p[1]), threshold=0.01) == x
    assert {k: set(n.neighbors) for k, n in sim.nodes.items()} == before


def test_large_drift_leaves_and_rejoins():
    sim = built_sim(100, 14)
    sim.trace = []
    registrars = _register_some(sim, 4, 14)
    x = registrars[0]
    new_pos = (-sim.positions[x][0], -sim.positions[x][1])
    new_id = sim.reinsert(x, new_pos, threshold=0.01)
    if ring_distance(x.ring, new_id.ring) > 0.01:
        assert new_id != x and x not in sim.nodes
        kinds = [line.split()[3] for line in sim.trace]
        assert "Leave" in kinds and "JoinProbe" in kinds
    assert sim.run_until_quiescent()
    assert all(r.member is not None for r in query_all(sim))
