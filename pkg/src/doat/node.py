"""DOAT node: neighbour tables, membership registry, area-aggregated route
announcements, query forwarding and churn repair.

Handlers mutate only their own node and return the messages to send as a
list of ``(destination, message)`` pairs; they never touch the clock or any
other node. Delivery and time are owned by the simulator.

Ring order is the lexicographic order of ``NodeId`` (ring coordinate, then
join-order tiebreak), so nodes with duplicate ring coordinates still have a
well-defined predecessor and successor.
"""
from __future__ import annotations

import math
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional

from .bloom import DEFAULT_K, DEFAULT_M, BloomFilter
from .sfc import ANTICLOCKWISE, CLOCKWISE, ring_distance, ring_target

# probing stops below this; ring coordinates are quantised far coarser
MIN_PROBE_DISTANCE = 2.0 ** -40


class NodeId(NamedTuple):
    ring: float
    tiebreak: int

    def __str__(self) -> str:
        return f"n{self.tiebreak}"


class RoutingError(RuntimeError):
    """Greedy resolution ran out of hops; the topology is corrupt."""


def direction_of(a: NodeId, b: NodeId) -> str:
    offset = (b.ring - a.ring) % 1.0
    if offset == 0.0:
        return CLOCKWISE if b > a else ANTICLOCKWISE
    return CLOCKWISE if offset <= 0.5 else ANTICLOCKWISE


def between(a: NodeId, x: NodeId, b: NodeId) -> bool:
    """True if ``x`` lies strictly inside the clockwise arc from ``a`` to ``b``."""
    if a < b:
        return a < x < b
    if a > b:
        return x > a or x < b
    return x != a


def resolve_ttl(n_nodes: int) -> int:
    return 2 * math.ceil(math.log2(max(2, n_nodes))) + 16


@dataclass(frozen=True)
class MemberRecord:
    group: bytes
    address: int
    position: tuple
    ring: float


@dataclass
class NodeConfig:
    update_interval: float = 0.0  # ms between two updates to one neighbour
    bloom_m: int = DEFAULT_M
    bloom_k: int = DEFAULT_K
    query_ttl: int = 64
    shadow: bool = False  # keep exact group sets beside every filter


@dataclass(slots=True)
class NeighborEntry:
    id: NodeId
    dist: float
    dir: str
    filter: BloomFilter
    alternates: tuple = ()
    shadow: frozenset = frozenset()

    def sort_key(self):
        return (self.dist, 0 if self.dir == CLOCKWISE else 1, self.id)


def _entry_dist(e: NeighborEntry) -> float:
    return e.dist


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class JoinProbe:
    joiner: NodeId
    target: float


@dataclass(frozen=True, slots=True)
class JoinAccept:
    src: NodeId
    alternates: tuple


@dataclass(frozen=True, slots=True)
class LinkRequest:
    src: NodeId
    alternates: tuple


@dataclass(frozen=True, slots=True)
class Register:
    record: MemberRecord


@dataclass(frozen=True, slots=True)
class RouteUpdate:
    src: NodeId
    filter: BloomFilter
    alternates: tuple
    shadow: Optional[frozenset] = None


@dataclass(frozen=True, slots=True)
class QueryState:
    qid: int
    group: bytes
    origin: NodeId
    path: tuple
    hop_dists: tuple = ()
    hop_delays: tuple = ()
    ttl: int = 64
    false_positive_hops: int = 0


@dataclass(frozen=True, slots=True)
class Query:
    state: QueryState


@dataclass(frozen=True, slots=True)
class QueryResponse:
    state: QueryState
    responder: NodeId
    member: Optional[MemberRecord]
    ttl_failure: bool = False


@dataclass(frozen=True, slots=True)
class Leave:
    src: NodeId
    alternates: tuple


@dataclass(frozen=True, slots=True)
class Reprobe:
    """Request to the overlay: resolve ``target`` and link it to ``src``."""
    src: NodeId
    target: float


HARNESS = None  # destination for query responses


class Node:
    def __init__(self, nid: NodeId, position: tuple, config: NodeConfig | None = None):
        self.id = nid
        self.position = position
        self.config = config or NodeConfig()
        self.neighbors: dict[NodeId, NeighborEntry] = {}
        self._ids: list[NodeId] = []  # neighbour ids in ring order
        self._table: list[NeighborEntry] | None = None
        self._ranks: dict[NodeId, int] = {}
        self._announce: dict[NodeId, tuple[BloomFilter, frozenset]] | None = None
        self.registry: dict[bytes, list[MemberRecord]] = {}
        self.local_filter = BloomFilter.empty(self.config.bloom_m, self.config.bloom_k)
        self.local_shadow: frozenset = frozenset()
        self.pending: set[NodeId] = set()
        self.last_sent: dict[NodeId, float] = {}
        self.wakeup: float | None = None
        self.unknown_sender_drops = 0

    def __repr__(self) -> str:
        return f"Node({self.id}, ring={self.id.ring:.6f}, degree={len(self.neighbors)})"

    # -- neighbour table ----------------------------------------------------

    @property
    def table(self) -> list[NeighborEntry]:
        """Neighbour entries by ascending ring distance, clockwise first on ties."""
        if self._table is None:
            self._table = sorted(self.neighbors.values(), key=NeighborEntry.sort_key)
            self._ranks = {e.id: i for i, e in enumerate(self._table)}
        return self._table

    @property
    def _rank(self) -> dict[NodeId, int]:
        self.table
        return self._ranks

    def _dirty(self) -> None:
        self._table = None
        self._announce = None

    def immediates(self) -> tuple:
        """(predecessor, successor) among current neighbours; empty when alone."""
        ids = self._ids
        if not ids:
            return ()
        i = bisect_left(ids, self.id)
        return (ids[i - 1], ids[i % len(ids)])

    def add_neighbor(self, nid: NodeId, alternates: tuple = ()) -> bool:
        if nid == self.id:
            return False
        entry = self.neighbors.get(nid)
        if entry is not None:
            if alternates:
                entry.alternates = alternates
            return False
        before = self.immediates()
        self.neighbors[nid] = NeighborEntry(
            nid, ring_distance(self.id.ring, nid.ring), direction_of(self.id, nid),
            BloomFilter.empty(self.config.bloom_m, self.config.bloom_k), alternates,
        )
        insort(self._ids, nid)
        self._dirty()
        self.pending.add(nid)
        if self.immediates() != before:
            self.pending.update(self.neighbors)
        return True

    def remove_neighbor(self, nid: NodeId) -> NeighborEntry | None:
        entry = self.neighbors.pop(nid, None)
        if entry is None:
            return None
        before = self.immediates()
        del self._ids[bisect_left(self._ids, nid)]
        self._dirty()
        self.pending.discard(nid)
        self.last_sent.pop(nid, None)
        # announcements that included the removed filter shrink
        self.pending.update(e.id for e in self.neighbors.values() if e.dist > entry.dist)
        if self.immediates() != before:
            self.pending.update(self.neighbors)
        return entry

    def _farther_than(self, dist: float) -> list[NodeId]:
        table = self.table
        i = bisect_right(table, dist, key=_entry_dist)
        return [e.id for e in table[i:]]

    def next_hop_towards(self, target: float) -> NodeId | None:
        """Neighbour strictly closer to ``target`` than this node, or None."""
        ids = self._ids
        if not ids:
            return None
        i = bisect_left(ids, (target, -1))
        a, b = ids[i - 1], ids[i % len(ids)]
        da, db = ring_distance(a.ring, target), ring_distance(b.ring, target)
        best, dbest = (a, da) if (da, a) <= (db, b) else (b, db)
        return best if dbest < ring_distance(self.id.ring, target) else None

    # -- joins and links ----------------------------------------------------

    def handle_link_request(self, msg: LinkRequest, now: float) -> list:
        self.add_neighbor(msg.src, msg.alternates)
        return self.maybe_flush(now)

    # -- registration ---------------------------------------------------------

    def handle_register(self, msg: Register, now: float) -> list:
        rec = msg.record
        nxt = self.next_hop_towards(rec.ring)
        if nxt is not None:
            return [(nxt, msg)]
        members = self.registry.setdefault(rec.group, [])
        if rec not in members:
            members.append(rec)
        new = self.local_filter.insert(rec.group)
        if new != self.local_filter or (self.config.shadow and rec.group not in self.local_shadow):
            self.local_filter = new
            if self.config.shadow:
                self.local_shadow = self.local_shadow | {rec.group}
            self._announce = None
            self.pending.update(self.neighbors)
        return self.maybe_flush(now)

    def drop_members(self) -> list[MemberRecord]:
        """Empty the registry (graceful leave) and return what it held."""
        out = [r for recs in self.registry.values() for r in recs]
        self.registry.clear()
        return out

    # -- routing updates ------------------------------------------------------

    def _announcements(self) -> dict[NodeId, tuple[BloomFilter, frozenset]]:
        if self._announce is None:
            table = self.table
            shadow = self.config.shadow
            m, k = self.config.bloom_m, self.config.bloom_k
            acc = self.local_filter.bits
            acc_s = self.local_shadow
            current = self.local_filter
            ann: dict[NodeId, tuple[BloomFilter, frozenset]] = {}
            i, n = 0, len(table)
            while i < n:
                j, d = i, table[i].dist
                while j < n and table[j].dist == d:
                    j += 1
                if current.bits != acc:
                    current = BloomFilter(m, k, acc)
                # equidistant entries are not strictly closer than each other
                for e in table[i:j]:
                    ann[e.id] = (current, acc_s)
                for e in table[i:j]:
                    acc |= e.filter.bits
                    if shadow:
                        acc_s = acc_s | e.shadow
                i = j
            self._announce = ann
        return self._announce

    def compute_announcement(self, to: NodeId) -> BloomFilter:
        """Local registry filter united with every strictly closer neighbour's filter."""
        return self._announcements()[to][0]

    def announced_shadow(self, to: NodeId) -> frozenset:
        return self._announcements()[to][1]

    def handle_route_update(self, msg: RouteUpdate, now: float) -> list:
        entry = self.neighbors.get(msg.src)
        if entry is None:
            self.unknown_sender_drops += 1
            return []
        entry.alternates = msg.alternates
        changed = entry.filter.bits != msg.filter.bits
        if self.config.shadow and msg.shadow is not None and msg.shadow != entry.shadow:
            entry.shadow = msg.shadow
            changed = True
        if changed:
            entry.filter = msg.filter
            self._announce = None
            self.pending.update(self._farther_than(entry.dist))
        return self.maybe_flush(now)

    def maybe_flush(self, now: float) -> list:
        """Send due updates; remember when the next throttled one falls due."""
        self.wakeup = None
        if not self.pending:
            return []
        interval = self.config.update_interval
        shadow_on = self.config.shadow
        ann = self._announcements()
        alternates = self.immediates()
        last_sent = self.last_sent
        out = []
        held = []
        made: dict[int, RouteUpdate] = {}  # one message object per distinct announcement
        for nid in sorted(self.pending, key=self._rank.__getitem__):
            last = last_sent.get(nid)
            if last is None or now >= last + interval:
                f, shadow = ann[nid]
                msg = made.get(id(f))
                if msg is None or (shadow_on and msg.shadow != shadow):
                    msg = RouteUpdate(self.id, f, alternates, shadow if shadow_on else None)
                    made[id(f)] = msg
                out.append((nid, msg))
                last_sent[nid] = now
            else:
                held.append(nid)
                due = last + interval
                if math.isfinite(due) and (self.wakeup is None or due < self.wakeup):
                    self.wakeup = due
        self.pending = set(held)
        return out

    # -- queries --------------------------------------------------------------

    def pick_member(self, group: bytes, origin: NodeId) -> MemberRecord | None:
        recs = self.registry.get(group)
        if not recs:
            return None
        return min(recs, key=lambda r: (ring_distance(r.ring, origin.ring), r.address))

    def handle_query(self, msg: Query, now: float) -> list:
        q = msg.state
        member = self.pick_member(q.group, q.origin)
        if member is not None:
            return [(HARNESS, QueryResponse(q, self.id, member))]
        if q.ttl <= 0:
            return [(HARNESS, QueryResponse(q, self.id, None, ttl_failure=True))]
        visited = set(q.path)
        for e in self.table:
            if e.id in visited:
                continue
            if e.filter.contains(q.group):
                fp = self.config.shadow and q.group not in e.shadow
                nq = replace(
                    q,
                    path=q.path + (e.id,),
                    hop_dists=q.hop_dists + (e.dist,),
                    ttl=q.ttl - 1,
                    false_positive_hops=q.false_positive_hops + fp,
                )
                return [(e.id, Query(nq))]
        return [(HARNESS, QueryResponse(q, self.id, None))]

    # -- leave and failure ----------------------------------------------------

    def leave_messages(self) -> list:
        note = Leave(self.id, self.immediates())
        return [(nid, note) for nid in self._ids]

    def _substitute(self, gone: NodeId, alternates: tuple, now: float) -> list:
        old = self.remove_neighbor(gone)
        if old is None:
            return []
        out = []
        options = [a for a in alternates if a != self.id and a != gone]
        if options:
            sub = min(options, key=lambda a: (ring_distance(self.id.ring, a.ring), a))
            if self.add_neighbor(sub):
                out.append((sub, LinkRequest(self.id, self.immediates())))
        else:
            out.append((self.id, Reprobe(self.id, ring_target(self.id.ring, max(old.dist, MIN_PROBE_DISTANCE), old.dir))))
        return out + self.maybe_flush(now)

    def handle_leave(self, msg: Leave, now: float) -> list:
        return self._substitute(msg.src, msg.alternates, now)

    def detect_failure(self, dead: NodeId, now: float, live: Mapping | None = None) -> list:
        entry = self.neighbors.get(dead)
        if entry is None:
            return []
        alternates = entry.alternates
        if live is not None:
            alternates = tuple(a for a in alternates if a in live)
        return self._substitute(dead, alternates, now)


# -- overlay-level procedures ---------------------------------------------------

def resolve_target(nodes: Mapping[NodeId, Node], start: NodeId, target: float,
                   ttl: int | None = None) -> tuple[NodeId, int]:
    """Greedy forwarding towards ``target``; returns (closest node, hop count)."""
    if ttl is None:
        ttl = resolve_ttl(len(nodes))
    cur = start
    for hops in range(ttl + 1):
        nxt = nodes[cur].next_hop_towards(target)
        if nxt is None:
            return cur, hops
        cur = nxt
    raise RoutingError(f"resolution of {target} from {start} exceeded {ttl} hops")


def build_neighbor_set(nodes: Mapping[NodeId, Node], joiner: Node,
                       bootstrap: NodeId | None) -> list:
    """Connect ``joiner`` at logarithmically decreasing ring distances.

    Probes target distance 0.5 first, then 0.25, 0.125, ... in both
    directions. Each probe is resolved greedily and the resolved node
    replies with its own immediate neighbours, which tells the joiner
    whether that node is its immediate successor or predecessor. Probing
    stops once both immediates are known. Links are made bidirectional at
    the end, so no probe is ever routed through the half-joined node.

    Returns the control messages exchanged, as (src, dst, message) triples.
    """
    trace: list = []
    if bootstrap is None:
        return trace
    me = joiner.id
    replies: dict[NodeId, JoinAccept] = {}

    def ask(nid: NodeId) -> JoinAccept:
        if nid not in replies:
            replies[nid] = JoinAccept(nid, nodes[nid].immediates())
            trace.append((nid, me, replies[nid]))
        return replies[nid]

    found = False
    delta = 0.5
    while not found and delta >= MIN_PROBE_DISTANCE:
        dirs = (CLOCKWISE,) if delta == 0.5 else (CLOCKWISE, ANTICLOCKWISE)
        for d in dirs:
            target = ring_target(me.ring, delta, d)
            known = list(replies) or [bootstrap]
            start = min(known, key=lambda k: (ring_distance(k.ring, target), k))
            trace.append((me, start, JoinProbe(me, target)))
            resolved, _ = resolve_target(nodes, start, target)
            imm = ask(resolved).alternates
            if not imm:
                found = True
            else:
                pred, succ = imm
                if between(pred, me, resolved):
                    ask(pred)
                    found = True
                elif between(resolved, me, succ):
                    ask(succ)
                    found = True
            if found:
                break
        delta /= 2
    for nid, reply in replies.items():
        joiner.add_neighbor(nid, reply.alternates)
    mine = joiner.immediates()
    for nid in replies:
        nodes[nid].add_neighbor(me, mine)
    return trace
