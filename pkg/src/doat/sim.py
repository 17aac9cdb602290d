"""Deterministic discrete-event simulator for a DOAT overlay.

Routing updates, registrations and queries travel with a latency equal to
the delay-space distance between the endpoints' current positions; node
processing takes no time. Topology maintenance (join probes, accepts, link
requests, leave notices) is applied instantaneously at the time of the
triggering event, so overlay structure never sits half-repaired while
routing traffic is in flight.

Events are popped in ``(time, seq)`` order; ``seq`` is a global counter, so
a run is a pure function of its inputs.
"""
from __future__ import annotations

import hashlib
import math
import heapq
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .delay_space import BoundingBox, delay
from .node import (
    HARNESS, JoinAccept, JoinProbe, Leave, LinkRequest, MemberRecord, Node,
    NodeConfig, NodeId, Query, QueryResponse, QueryState, Register, Reprobe,
    RouteUpdate, build_neighbor_set, resolve_target,
)
from .sfc import CurveParams, ring_coord, ring_distance


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class FlushTimer:
    pass


@dataclass(frozen=True, slots=True)
class Callback:
    """Harness action run at a scheduled time (arrivals, query batches, churn)."""
    fn: Callable[[], None]
    label: str = "callback"


def _fmt_id(nid) -> str:
    return "harness" if nid is None else str(nid)


def payload_digest(msg) -> str:
    h = hashlib.sha1(type(msg).__name__.encode())
    if isinstance(msg, RouteUpdate):
        h.update(msg.filter.to_bytes())
        h.update(repr(msg.alternates).encode())
        if msg.shadow is not None:
            h.update(repr(sorted(msg.shadow)).encode())
    elif isinstance(msg, (Query, QueryResponse)):
        q = msg.state
        h.update(repr((q.qid, q.group, q.path, q.ttl)).encode())
        if isinstance(msg, QueryResponse):
            h.update(repr((msg.responder, msg.member, msg.ttl_failure)).encode())
    elif isinstance(msg, Callback):
        h.update(msg.label.encode())
    else:
        h.update(repr(msg).encode())
    return h.hexdigest()[:12]


class Simulator:
    def __init__(self, box: BoundingBox, curve: CurveParams | None = None,
                 config: NodeConfig | None = None, trace: list[str] | None = None):
        self.box = box
        self.curve = curve or CurveParams()
        self.config = config or NodeConfig()
        self.nodes: dict[NodeId, Node] = {}
        self.positions: dict[NodeId, tuple] = {}
        self.now = 0.0
        self.trace = trace
        self.sent = Counter()
        self.dropped = Counter()
        # queued messages: scheduled == delivered + undeliverable once drained
        self.scheduled = 0
        self.delivered = 0
        self.undeliverable = 0
        self.responses: list[tuple[float, QueryResponse]] = []
        self.query_issue_time: dict[int, float] = {}
        self._queue: list = []
        self._seq = 0
        self._fifo: dict[tuple, float] = {}
        self._moved = False  # set once any position changes after joining
        self._timers: dict[NodeId, float] = {}
        self._next_tiebreak = 0
        self._next_qid = 0
        self._joined: list[NodeId] = []  # live ids in join order

    # -- bookkeeping ------------------------------------------------------------

    def _log(self, t: float, src, dst, msg) -> None:
        if self.trace is not None:
            self.trace.append(
                f"{t:.6f} {_fmt_id(src)} {_fmt_id(dst)} {type(msg).__name__} {payload_digest(msg)}"
            )

    def _push(self, t: float, src, dst, msg) -> None:
        heapq.heappush(self._queue, (t, self._seq, src, dst, msg))
        self._seq += 1

    def pending_events(self) -> int:
        return len(self._queue)

    def reset_counters(self) -> None:
        self.sent.clear()
        self.dropped.clear()

    def ring_of(self, position) -> float:
        return ring_coord(position, self.box, self.curve)

    # -- message transport --------------------------------------------------------

    def send(self, src: NodeId | None, dst: NodeId | None, msg, now: float | None = None) -> float:
        """Schedule delivery after the delay between the endpoints' positions.

        Messages between one ordered pair of endpoints are delivered in send
        order even if positions change between the sends.
        """
        now = self.now if now is None else now
        positions = self.positions
        if src is None or dst is None:
            if src is not None and src not in positions:
                raise UnknownNodeError(src)
            if dst is not None and dst not in positions:
                raise UnknownNodeError(dst)
            lat = 0.0
        else:
            try:
                lat = math.dist(positions[src], positions[dst])
            except KeyError as exc:
                raise UnknownNodeError(exc.args[0]) from None
        t = now + lat
        if self._moved:
            # with fixed positions equal latencies already keep pair order
            key = (src, dst)
            t = max(t, self._fifo.get(key, t))
            self._fifo[key] = t
        kind = type(msg)
        if kind is Query and src is not None:
            msg = Query(_with_delay(msg.state, lat))
        self.sent[kind.__name__] += 1
        self.scheduled += 1
        heapq.heappush(self._queue, (t, self._seq, src, dst, msg))
        self._seq += 1
        return t

    def _positions_changing(self) -> None:
        """Start per-pair ordering bounds, seeded from messages in flight."""
        if self._moved:
            return
        self._moved = True
        for t, _, src, dst, msg in self._queue:
            if src is not None and dst is not None and src != dst:
                key = (src, dst)
                if t > self._fifo.get(key, t - 1):
                    self._fifo[key] = t

    def inject(self, time: float, dst: NodeId | None, msg) -> None:
        if time < self.now:
            raise ValueError("cannot inject into the past")
        if dst is not None and dst not in self.nodes:
            raise UnknownNodeError(dst)
        self.scheduled += 1
        self._push(time, None, dst, msg)

    def at(self, time: float, fn: Callable[[], None], label: str = "callback") -> None:
        self._push(time, None, None, Callback(fn, label))

    def _emit(self, src: NodeId, out: Iterable) -> None:
        control = []
        for dst, msg in out:
            kind = type(msg)
            if kind is RouteUpdate:
                self.send(src, dst, msg)
            elif kind is LinkRequest or kind is Reprobe:
                control.append((dst, msg))
            elif kind is QueryResponse:
                self.sent["QueryResponse"] += 1
                self.responses.append((self.now, msg))
                self._log(self.now, src, None, msg)
            else:
                self.send(src, dst, msg)
        for dst, msg in control:
            self._control(src, dst, msg)
        node = self.nodes.get(src)
        if node is not None and node.wakeup is not None:
            self._arm_timer(src)

    def _control(self, src: NodeId, dst: NodeId, msg) -> None:
        self._log(self.now, src, dst, msg)
        self.sent[type(msg).__name__] += 1
        if isinstance(msg, Reprobe):
            self._reprobe(msg)
            return
        node = self.nodes.get(dst)
        if node is None:
            self.dropped[type(msg).__name__] += 1
            requester = self.nodes.get(src)
            if requester is not None:
                self._emit(src, requester.detect_failure(dst, self.now, self.nodes))
            return
        self._emit(dst, node.handle_link_request(msg, self.now))

    def _reprobe(self, msg: Reprobe) -> None:
        node = self.nodes.get(msg.src)
        if node is None:
            return
        known = list(node.neighbors) or [n for n in self.nodes if n != node.id][:1]
        if not known:
            return
        start = min(known, key=lambda k: (ring_distance(k.ring, msg.target), k))
        found, _ = resolve_target(self.nodes, start, msg.target)
        if found != node.id and node.add_neighbor(found):
            self._control(node.id, found, LinkRequest(node.id, node.immediates()))
        self._emit(node.id, node.maybe_flush(self.now))

    def _arm_timer(self, nid: NodeId) -> None:
        node = self.nodes.get(nid)
        if node is None or node.wakeup is None:
            return
        armed = self._timers.get(nid)
        if armed is None or node.wakeup < armed:
            self._timers[nid] = node.wakeup
            self._push(node.wakeup, nid, nid, FlushTimer())

    def _deliver(self, t: float, src, dst, msg) -> None:
        if self.trace is not None:
            self._log(t, src, dst, msg)
        kind = type(msg)
        if kind is Callback:
            msg.fn()
            return
        node = self.nodes.get(dst)
        if node is None:
            if kind is not FlushTimer:
                self.dropped[kind.__name__] += 1
                self.undeliverable += 1
            return
        if kind is not FlushTimer:
            self.delivered += 1
        if kind is RouteUpdate:
            out = node.handle_route_update(msg, t)
        elif kind is Query:
            out = node.handle_query(msg, t)
        elif kind is FlushTimer:
            if self._timers.get(dst) == t:
                del self._timers[dst]
            out = node.maybe_flush(t)
        elif kind is Register:
            out = node.handle_register(msg, t)
        else:
            raise TypeError(f"unexpected message {msg!r}")
        self._emit(dst, out)

    def step(self) -> bool:
        if not self._queue:
            return False
        t, _, src, dst, msg = heapq.heappop(self._queue)
        if t < self.now:
            raise AssertionError("causality violated")
        self.now = t
        self._deliver(t, src, dst, msg)
        return True

    def is_quiescent(self) -> bool:
        return not self._queue and not any(n.pending for n in self.nodes.values())

    def run_until_quiescent(self, max_time: float = 1e7) -> bool:
        """Process events until none remain or ``max_time`` is reached.

        Returns True when the overlay is quiescent: no undelivered events and
        no node holding a throttled update.
        """
        while self._queue:
            if self._queue[0][0] > max_time:
                return False
            self.step()
        return self.is_quiescent()

    # -- overlay membership -------------------------------------------------------

    def add_node(self, position: Sequence[float], bootstrap: NodeId | None = None,
                 rng: np.random.Generator | None = None, flush: bool = True) -> NodeId:
        """Join a new node at ``position``; returns its id."""
        position = tuple(float(v) for v in position)
        nid = NodeId(self.ring_of(position), self._next_tiebreak)
        self._next_tiebreak += 1
        node = Node(nid, position, self.config)
        if bootstrap is None and self._joined:
            pick = int(rng.integers(len(self._joined))) if rng is not None else 0
            bootstrap = self._joined[pick]
        trace = build_neighbor_set(self.nodes, node, bootstrap)
        for src, dst, msg in trace:
            self._log(self.now, src, dst, msg)
            self.sent[type(msg).__name__] += 1
        self.nodes[nid] = node
        self.positions[nid] = position
        self._joined.append(nid)
        if flush:
            for nb in node.neighbors:
                self._emit(nb, self.nodes[nb].maybe_flush(self.now))
            self._emit(nid, node.maybe_flush(self.now))
        return nid

    def attach(self, node: Node) -> None:
        """Add a node whose neighbour table is wired by the caller (no join)."""
        if node.id in self.nodes:
            raise ValueError(f"duplicate node {node.id}")
        self.nodes[node.id] = node
        self.positions[node.id] = node.position
        self._joined.append(node.id)
        self._next_tiebreak = max(self._next_tiebreak, node.id.tiebreak + 1)

    def build(self, points: Iterable[Sequence[float]], rng: np.random.Generator) -> list[NodeId]:
        """Join nodes one by one, then let every node announce itself once."""
        ids = [self.add_node(p, rng=rng, flush=False) for p in points]
        for nid in sorted(self.nodes):
            self._emit(nid, self.nodes[nid].maybe_flush(self.now))
        return ids

    def leave_node(self, nid: NodeId, reregister: bool = True) -> list[MemberRecord]:
        """Graceful departure; registered members re-register via a neighbour."""
        node = self.nodes.get(nid)
        if node is None:
            raise UnknownNodeError(nid)
        notes = node.leave_messages()
        members = node.drop_members()
        heir = node.immediates()[0] if node.neighbors else None
        del self.nodes[nid]
        self._joined.remove(nid)
        for dst, msg in notes:
            self._log(self.now, nid, dst, msg)
            self.sent["Leave"] += 1
            peer = self.nodes.get(dst)
            if peer is not None:
                self._emit(dst, peer.handle_leave(msg, self.now))
        self.positions.pop(nid, None)
        if reregister and heir is not None:
            for rec in members:
                self.inject(self.now, heir, Register(rec))
        return members

    def fail_node(self, nid: NodeId) -> list[MemberRecord]:
        """Crash a node now; neighbours are told and repair from stored alternates."""
        node = self.nodes.pop(nid, None)
        if node is None:
            raise UnknownNodeError(nid)
        self._joined.remove(nid)
        lost = node.drop_members()
        for peer_id in sorted(self.nodes):
            peer = self.nodes[peer_id]
            if nid in peer.neighbors:
                self._emit(peer_id, peer.detect_failure(nid, self.now, self.nodes))
        self.positions.pop(nid, None)
        return lost

    def reinsert(self, nid: NodeId, new_position: Sequence[float], threshold: float) -> NodeId:
        """Move a node; leave and rejoin when its ring coordinate drifts past ``threshold``."""
        node = self.nodes.get(nid)
        if node is None:
            raise UnknownNodeError(nid)
        new_position = tuple(float(v) for v in new_position)
        self._positions_changing()
        if ring_distance(nid.ring, self.ring_of(new_position)) <= threshold:
            node.position = new_position
            self.positions[nid] = new_position
            return nid
        members = self.leave_node(nid, reregister=False)
        new_id = self.add_node(new_position)
        for rec in members:
            self.inject(self.now, new_id, Register(rec))
        return new_id

    # -- harness actions ------------------------------------------------------------

    def register(self, record: MemberRecord, via: NodeId, time: float | None = None) -> None:
        self.inject(self.now if time is None else time, via, Register(record))

    def issue_query(self, origin: NodeId, group: bytes, time: float | None = None) -> int:
        qid = self._next_qid
        self._next_qid += 1
        t = self.now if time is None else time
        state = QueryState(qid, group, origin, (origin,), ttl=self.config.query_ttl)
        self.query_issue_time[qid] = t
        self.inject(t, origin, Query(state))
        return qid

    def perturb_positions(self, offset: float, rng: np.random.Generator) -> dict[NodeId, tuple]:
        """Displace every live node; returns the previous positions.

        Direction is uniform on the unit sphere, magnitude uniform on
        [0.5*offset, 1.5*offset]. Ring coordinates are left stale.
        """
        before = dict(self.positions)
        if offset == 0:
            return before
        self._positions_changing()
        ids = sorted(self.positions)
        dim = len(self.positions[ids[0]])
        v = rng.standard_normal((len(ids), dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        mags = rng.uniform(0.5 * offset, 1.5 * offset, len(ids))
        for nid, d, m in zip(ids, v, mags):
            p = tuple(float(a + m * b) for a, b in zip(self.positions[nid], d))
            self.positions[nid] = p
            self.nodes[nid].position = p
        return before

    def restore_positions(self, positions: dict[NodeId, tuple]) -> None:
        self._positions_changing()
        for nid, p in positions.items():
            if nid in self.nodes:
                self.positions[nid] = p
                self.nodes[nid].position = p


def _with_delay(q: QueryState, lat: float) -> QueryState:
    from dataclasses import replace
    return replace(q, hop_delays=q.hop_delays + (lat,))
