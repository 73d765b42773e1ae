"""IRIS node state machine.

Everything in this module is pure: a node's behaviour in a slot is a function
of its current state, what it decoded in that slot, the static configuration
and (for the few random choices the protocol makes) a per-node RNG.  No clock,
no radio, no I/O.  The engine drives it.

Slots are numbered 1..slots_per_frame inside a frame; frames count from 0.
Every schedule is periodic per frame and wraps modulo slots_per_frame.

A slot is an exchange of up to three sub-phases (initiator, response,
confirm).  The engine calls :func:`step_node` at four points of a slot:

* ``Phase.START``  before anything is sent; initiators emit their packet.
* ``Phase.INIT``   with the decoded initiator packets; responders answer.
* ``Phase.RESP``   with the decoded responses; drop confirmations go out.
* ``Phase.CONF``   with the decoded confirmations; end-of-slot bookkeeping.
"""
from __future__ import annotations

import random
from functools import lru_cache
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from typing import Iterable, Optional, Union

NONE = -1
"""Node-id sentinel: "no destination" / "looking for a next hop"."""



_FIELD_NAMES: dict = {}


def replace(obj, **changes):
    """``dataclasses.replace`` for the frozen slot states, without re-running __init__.

    States are rebuilt several hundred thousand times per run; the stdlib
    version dominates the profile.  Only valid for classes without
    ``__post_init__`` checks.
    """
    cls = type(obj)
    entry = _FIELD_NAMES.get(cls)
    if entry is None:
        names = tuple(f.name for f in fields(cls))
        entry = _FIELD_NAMES[cls] = (names, frozenset(names))
    names, known = entry
    if not known.issuperset(changes):
        raise TypeError(f"{cls.__name__} has no field(s) {sorted(set(changes) - known)}")
    new = object.__new__(cls)
    for name in names:
        object.__setattr__(new, name, changes[name] if name in changes else getattr(obj, name))
    return new

class Kind(IntEnum):
    PING = 0
    ACK = 1
    REPORT = 2
    DROP = 3
    DROP_ACK = 4


class Phase(IntEnum):
    START = 0
    INIT = 1
    RESP = 2
    CONF = 3


class NonRouteMode(str, Enum):
    LATCH = "latch"
    SHIFT = "shift"


class ProtocolError(ValueError):
    """Invalid protocol or timing configuration."""


@dataclass(frozen=True, slots=True)
class PayloadEntry:
    origin: int
    bytes: int
    created_frame: int

    def __post_init__(self):
        if self.bytes <= 0:
            raise ProtocolError(f"payload entry must be > 0 bytes, got {self.bytes}")


@dataclass(frozen=True, slots=True)
class Packet:
    kind: Kind
    sender: int
    dest: int = NONE
    link_id: int = 0
    payload: tuple[PayloadEntry, ...] = ()
    synthesized: bool = False

    def __post_init__(self):
        if self.kind != Kind.PING:
            if self.dest == NONE:
                raise ProtocolError(f"{self.kind.name} needs a destination")
            if self.link_id:
                raise ProtocolError("only pings carry a link id")
            if self.payload and self.kind != Kind.REPORT:
                raise ProtocolError(f"{self.kind.name} cannot carry payload")

    @property
    def payload_bytes(self) -> int:
        return sum(e.bytes for e in self.payload)


@dataclass(frozen=True, slots=True)
class TimingConfig:
    slot_ms: float = 500.0
    slots_per_frame: int = 400
    stl: int = 4
    forward_offset: int = 2
    guard_ms: float = 50.0

    def __post_init__(self):
        errors = timing_errors(self)
        if errors:
            raise ProtocolError("; ".join(errors))

    @property
    def frame_s(self) -> float:
        return self.slot_ms * self.slots_per_frame / 1000.0

    @property
    def slot_s(self) -> float:
        return self.slot_ms / 1000.0

    @property
    def scan_period(self) -> int:
        """Frames a searching node needs to visit every slot at least once.

        Windows of ``stl`` slots advancing by ``stl`` tile the frame, so the
        scan is complete even when ``stl`` does not divide the frame; the last
        window of a pass then overlaps the first one of the next.
        """
        return -(-self.slots_per_frame // self.stl)

    def wrap(self, slot: int) -> int:
        return (slot - 1) % self.slots_per_frame + 1


def timing_errors(t: TimingConfig) -> list[str]:
    errors = []
    if t.slot_ms <= 0:
        errors.append("slot_ms must be > 0")
    if t.guard_ms < 0:
        errors.append("guard_ms must be >= 0")
    if t.stl < 1:
        errors.append("stl must be >= 1")
    elif t.stl > t.slots_per_frame:
        errors.append(f"stl ({t.stl}) must not exceed slots_per_frame ({t.slots_per_frame})")
    if t.forward_offset < 1:
        errors.append("forward_offset must be >= 1")
    if t.stl < t.forward_offset + 2:
        errors.append("stl must be >= forward_offset + 2")
    if t.slots_per_frame < t.forward_offset + 2:
        errors.append("slots_per_frame too small for the relay schedule")
    return errors


@dataclass(frozen=True, slots=True)
class ProtocolConfig:
    conlimit: int = 1
    frameout: int = 50
    phq_max: int = 5
    nhq_max: int = 5
    rq_max: int = 5
    report_period_frames: int = 10
    report_retry_window: int = 4
    payload_capacity: int = 22
    report_bytes: int = 4
    queue_cap: int = 16
    nonroute_mode: NonRouteMode = NonRouteMode.LATCH
    nonroute_join: bool = True
    reporting: bool = True

    def __post_init__(self):
        errors = protocol_errors(self)
        if errors:
            raise ProtocolError("; ".join(errors))


def protocol_errors(p: ProtocolConfig) -> list[str]:
    errors = []
    for name in ("conlimit", "frameout", "phq_max", "nhq_max", "rq_max",
                 "report_period_frames", "report_retry_window",
                 "payload_capacity", "report_bytes", "queue_cap"):
        if getattr(p, name) < 1:
            errors.append(f"{name} must be >= 1")
    if p.report_bytes > p.payload_capacity:
        errors.append("report_bytes must not exceed payload_capacity")
    return errors


# ---------------------------------------------------------------------------
# node states


@dataclass(frozen=True, slots=True)
class OriginBase:
    next_hop: int = NONE
    link_id: int = 0
    nhq: int = 0
    queue: tuple[PayloadEntry, ...] = ()


@dataclass(frozen=True, slots=True)
class EndBase:
    window_start: int = 1
    scan_frame: int = 0
    anchor_slot: int = NONE
    last_heard_frame: int = NONE

    @property
    def anchored(self) -> bool:
        return self.anchor_slot != NONE


@dataclass(frozen=True, slots=True)
class Searching:
    # window_start is the window of frame ``scan_frame``; later frames advance by stl
    window_start: int = 1
    scan_frame: int = 0
    addressed_count: int = 0
    heard_frame: int = NONE
    first_heard_slot: int = NONE
    first_heard_sender: int = NONE


@dataclass(frozen=True, slots=True)
class PendingJoin:
    anchor_slot: int
    candidate_prev: int
    join_frame: int = 0


@dataclass(frozen=True, slots=True)
class NonRoute:
    anchor_slot: int
    route_node: int
    since_frame: int = 0
    last_ping_frame: int = 0
    window_start: int = NONE
    last_report_frame: int = NONE
    backoff_until: int = 0
    report_frame: int = NONE
    report_slot: int = NONE
    report_to: int = NONE
    count_frame: int = NONE
    addressed_count: int = 0

    def rq_at(self, frame: int) -> int:
        """Consecutive frames without a decoded ping, as of the end of ``frame``."""
        return max(0, frame - self.last_ping_frame)

    def report_backoff(self, frame: int) -> int:
        return max(0, self.backoff_until - frame)

    def current_window_start(self) -> int:
        return self.anchor_slot if self.window_start == NONE else self.window_start


@dataclass(frozen=True, slots=True)
class Route:
    rx_slot: int
    prev_hop: int
    next_hop: int
    phq: int = 0
    nhq: int = 0
    report_queue: tuple[PayloadEntry, ...] = ()
    link_id: int = 0
    armed: bool = False
    synth: bool = False
    sent: bool = False


@dataclass(frozen=True, slots=True)
class RouteEnd:
    rx_slot: int
    prev_hop: int
    frameout_count: int = 0
    drop_pending: bool = False
    phq: int = 0
    report_queue: tuple[PayloadEntry, ...] = ()
    link_id: int = 0
    armed: bool = False
    synth: bool = False
    sent: bool = False
    dropping: bool = False


@dataclass(frozen=True, slots=True)
class Dead:
    pass


NodeState = Union[OriginBase, EndBase, Searching, PendingJoin, NonRoute, Route, RouteEnd, Dead]

STATE_NAMES = {
    OriginBase: "origin",
    EndBase: "end",
    Searching: "searching",
    PendingJoin: "pending",
    NonRoute: "nonroute",
    Route: "route",
    RouteEnd: "route_end",
    Dead: "dead",
}


def state_name(state: NodeState) -> str:
    return STATE_NAMES[type(state)]


# ---------------------------------------------------------------------------
# events and actions


@dataclass(frozen=True, slots=True)
class SlotEvents:
    frame: int
    slot: int
    phase: Phase = Phase.INIT
    received: tuple[Packet, ...] = ()


@dataclass(frozen=True, slots=True)
class Transmit:
    packet: Packet


@dataclass(frozen=True, slots=True)
class Listen:
    pass


@dataclass(frozen=True, slots=True)
class Sleep:
    pass


@dataclass(frozen=True, slots=True)
class WakeNextFrameAt:
    slot: int


@dataclass(frozen=True, slots=True)
class ReportDroppedPayload:
    count: int


@dataclass(frozen=True, slots=True)
class Diagnostic:
    code: str


Action = Union[Transmit, Listen, Sleep, WakeNextFrameAt, ReportDroppedPayload, Diagnostic]


# ---------------------------------------------------------------------------
# scheduling helpers


def searching_window(frame: int, window_start: int, timing: TimingConfig,
                     scan_frame: int = 0) -> tuple[int, ...]:
    """Slots a scanning node listens to in ``frame``.

    The scan began with ``window_start`` in ``scan_frame`` and advances by
    ``stl`` slots every frame, wrapping modulo the frame length.
    """
    if not 1 <= window_start <= timing.slots_per_frame:
        raise ProtocolError(f"window_start {window_start} outside 1..{timing.slots_per_frame}")
    start = window_at(window_start, scan_frame, frame, timing)
    spf = timing.slots_per_frame
    return tuple((start - 1 + j) % spf + 1 for j in range(timing.stl))


def window_at(window_start: int, scan_frame: int, frame: int, timing: TimingConfig) -> int:
    return (window_start - 1 + timing.stl * (frame - scan_frame)) % timing.slots_per_frame + 1


def window_end(start: int, timing: TimingConfig) -> int:
    """Last slot (in frame order) of the window starting at ``start``."""
    last = start + timing.stl - 1
    return timing.slots_per_frame if last > timing.slots_per_frame else last


def in_window(slot: int, start: int, timing: TimingConfig) -> bool:
    return (slot - start) % timing.slots_per_frame < timing.stl


def conlimit_gate(addressed_count: int, conlimit: int) -> bool:
    """True when a searching node may still try to join."""
    return addressed_count < conlimit


def pack_payload(queue: Iterable[PayloadEntry], capacity: int
                 ) -> tuple[tuple[PayloadEntry, ...], tuple[PayloadEntry, ...], int]:
    """Split ``queue`` into the FIFO prefix that fits ``capacity`` and the rest.

    Returns ``(carried, remaining, rejected)``.  Entries larger than the
    capacity can never be carried; they are removed and counted in
    ``rejected``.
    """
    carried: list[PayloadEntry] = []
    remaining: list[PayloadEntry] = []
    rejected = 0
    used = 0
    for entry in queue:
        if entry.bytes > capacity:
            rejected += 1
        elif not remaining and used + entry.bytes <= capacity:
            carried.append(entry)
            used += entry.bytes
        else:
            remaining.append(entry)
    return tuple(carried), tuple(remaining), rejected


def tx_slot(rx_slot: int, timing: TimingConfig) -> int:
    return timing.wrap(rx_slot + timing.forward_offset)


def report_slot(rx_slot: int, timing: TimingConfig) -> int:
    return timing.wrap(rx_slot + timing.forward_offset + 1)


@dataclass(frozen=True, slots=True)
class Agenda:
    """When a node is awake.

    ``active`` and ``wake`` repeat every frame from ``since`` onwards.  Slots
    in ``wake`` need a step call at every phase even when nothing is
    decoded.  ``once`` lists one-off ``(frame, slot)`` wake-ups.  A scanning
    node has ``scan = (window_start, scan_frame)`` instead of a periodic
    pattern.  ``synced`` marks listeners whose receptions depend on clock
    alignment (everything except scanning).
    """
    active: frozenset = frozenset()
    wake: frozenset = frozenset()
    since: int = 0
    once: tuple = ()
    scan: Optional[tuple[int, int]] = None
    synced: bool = True
    guard: bool = False

    def slots_in(self, frame: int, timing: TimingConfig) -> set[int]:
        """Every slot of ``frame`` the node is awake in."""
        out: set[int] = set()
        if self.scan is not None:
            if frame >= self.scan[1]:
                out.update(searching_window(frame, self.scan[0], timing, self.scan[1]))
        elif frame >= self.since:
            out.update(self.active)
        out.update(s for f, s in self.once if f == frame)
        return out


@lru_cache(maxsize=4096)
def _window(start: int, timing: TimingConfig) -> frozenset:
    spf = timing.slots_per_frame
    return frozenset((start - 1 + j) % spf + 1 for j in range(timing.stl))


def agenda(state: NodeState, timing: TimingConfig, proto: ProtocolConfig) -> Agenda:
    if isinstance(state, Searching):
        once = ()
        if state.heard_frame != NONE:
            start = window_at(state.window_start, state.scan_frame, state.heard_frame, timing)
            once = ((state.heard_frame, window_end(start, timing)),)
        return Agenda(scan=(state.window_start, state.scan_frame), once=once, synced=False)
    if isinstance(state, (Route, RouteEnd)):
        rx = state.rx_slot
        return Agenda(
            active=frozenset({rx, timing.wrap(rx + 1), tx_slot(rx, timing), report_slot(rx, timing)}),
            wake=frozenset({rx, tx_slot(rx, timing)}),
            guard=True,
        )
    if isinstance(state, NonRoute):
        start = state.current_window_start()
        end = window_end(start, timing)
        once = [(state.last_ping_frame + proto.rq_max, end)]
        if state.report_frame != NONE:
            once.append((state.report_frame, state.report_slot))
        wake = frozenset({end}) if proto.nonroute_mode == NonRouteMode.SHIFT else frozenset()
        return Agenda(active=_window(start, timing), wake=wake, since=state.since_frame,
                      once=tuple(once), guard=True)
    if isinstance(state, PendingJoin):
        a = frozenset({state.anchor_slot})
        return Agenda(active=a, wake=a, since=state.join_frame + 1, guard=True)
    if isinstance(state, OriginBase):
        return Agenda(active=frozenset({1, 2}), wake=frozenset({1}))
    if isinstance(state, EndBase):
        if not state.anchored:
            return Agenda(scan=(state.window_start, state.scan_frame), synced=False)
        end = window_end(state.anchor_slot, timing)
        return Agenda(active=_window(state.anchor_slot, timing),
                      once=((state.last_heard_frame + proto.rq_max, end),), guard=True)
    return Agenda(synced=False)


# ---------------------------------------------------------------------------
# transitions


def _random_search(frame: int, timing: TimingConfig, rng: random.Random) -> Searching:
    return Searching(window_start=rng.randint(1, timing.slots_per_frame), scan_frame=frame + 1)


def _first(received: tuple[Packet, ...], kind: Kind, sender: int = NONE, dest: int = NONE
           ) -> Optional[Packet]:
    for p in received:
        if p.kind == kind and (sender == NONE or p.sender == sender) and (dest == NONE or p.dest == dest):
            return p
    return None


def _unexpected(received: tuple[Packet, ...], me: int, state: NodeState,
                allowed: tuple[Kind, ...] = ()) -> list[Action]:
    # only packets addressed to us can be malformed; overheard traffic is normal
    return [Diagnostic(f"unexpected-{p.kind.name.lower()}-in-{state_name(state)}")
            for p in received
            if p.dest == me and p.kind != Kind.PING and p.kind not in allowed]


def _enqueue(queue: tuple[PayloadEntry, ...], entries: Iterable[PayloadEntry],
             proto: ProtocolConfig) -> tuple[tuple[PayloadEntry, ...], list[Action]]:
    q = queue + tuple(entries)
    if len(q) > proto.queue_cap:
        dropped = len(q) - proto.queue_cap
        return q[:proto.queue_cap], [ReportDroppedPayload(dropped)]
    return q, []


def _take_report(state, received, me, proto) -> tuple[tuple[PayloadEntry, ...], list[Action]]:
    rep = _first(received, Kind.REPORT, dest=me)
    if rep is None:
        return state.report_queue, []
    queue, acts = _enqueue(state.report_queue, rep.payload, proto)
    return queue, [Transmit(Packet(Kind.ACK, me, rep.sender))] + acts


def _step_origin(st: OriginBase, ev: SlotEvents, timing, proto, me, rng):
    s, ph = ev.slot, ev.phase
    if s == 1:
        if ph == Phase.START:
            carried, rest, rejected = pack_payload(st.queue, proto.payload_capacity)
            acts: list[Action] = [Transmit(Packet(Kind.PING, me, st.next_hop, st.link_id, carried))]
            if rejected:
                acts.append(ReportDroppedPayload(rejected))
            return replace(st, queue=rest), acts
        if ph == Phase.RESP:
            if st.next_hop == NONE:
                ack = _first(ev.received, Kind.ACK, dest=me)
                if ack is not None:
                    return replace(st, next_hop=ack.sender, nhq=0), []
                return st, []
            if _first(ev.received, Kind.ACK, sender=st.next_hop, dest=me):
                return replace(st, nhq=0), []
            if _first(ev.received, Kind.DROP, sender=st.next_hop, dest=me):
                return (replace(st, next_hop=NONE, nhq=0),
                        [Transmit(Packet(Kind.DROP_ACK, me, st.next_hop))])
            nhq = st.nhq + 1
            if nhq >= proto.nhq_max:
                return replace(st, next_hop=NONE, nhq=0), []
            return replace(st, nhq=nhq), []
    if s == 2 and ph == Phase.INIT:
        rep = _first(ev.received, Kind.REPORT, dest=me)
        if rep is not None:
            queue, acts = _enqueue(st.queue, rep.payload, proto)
            return replace(st, queue=queue), [Transmit(Packet(Kind.ACK, me, rep.sender))] + acts
    if ph in (Phase.INIT, Phase.RESP, Phase.CONF):
        return st, _unexpected(ev.received, me, st, (Kind.ACK, Kind.DROP, Kind.REPORT))
    return st, []


def _step_end(st: EndBase, ev: SlotEvents, timing, proto, me, rng):
    f, s, ph = ev.frame, ev.slot, ev.phase
    if not st.anchored:
        if f < st.scan_frame:
            return st, []
        start = window_at(st.window_start, st.scan_frame, f, timing)
    else:
        start = st.anchor_slot
    if not in_window(s, start, timing):
        return st, []
    if ph == Phase.INIT:
        for p in ev.received:
            if p.kind == Kind.PING and p.dest in (NONE, me):
                return (replace(st, anchor_slot=s, last_heard_frame=f),
                        [Transmit(Packet(Kind.ACK, me, p.sender))])
        return st, _unexpected(ev.received, me, st, (Kind.ACK,))
    if ph == Phase.CONF and st.anchored and s == window_end(start, timing):
        if f - st.last_heard_frame >= proto.rq_max:
            return EndBase(window_start=rng.randint(1, timing.slots_per_frame), scan_frame=f + 1), []
    return st, []


def _step_searching(st: Searching, ev: SlotEvents, timing, proto, me, rng):
    f, s, ph = ev.frame, ev.slot, ev.phase
    if f < st.scan_frame:
        return st, []
    start = window_at(st.window_start, st.scan_frame, f, timing)
    if not in_window(s, start, timing):
        return st, []
    fresh = st.heard_frame != f
    if ph == Phase.INIT and ev.received:
        count = 0 if fresh else st.addressed_count
        first_slot = NONE if fresh else st.first_heard_slot
        first_sender = NONE if fresh else st.first_heard_sender
        heard = False
        for p in ev.received:
            if p.kind != Kind.PING:
                continue
            heard = True
            if first_slot == NONE:
                first_slot, first_sender = s, p.sender
            if p.dest == NONE:
                if conlimit_gate(count, proto.conlimit):
                    return (PendingJoin(anchor_slot=s, candidate_prev=p.sender, join_frame=f),
                            [Transmit(Packet(Kind.ACK, me, p.sender))])
            elif p.dest != me:
                count += 1
        acts = _unexpected(ev.received, me, st)
        if not heard:
            return st, acts
        return replace(st, addressed_count=count, heard_frame=f, first_heard_slot=first_slot,
                       first_heard_sender=first_sender), acts
    if ph == Phase.CONF and s == window_end(start, timing):
        if not fresh:
            return NonRoute(anchor_slot=st.first_heard_slot, route_node=st.first_heard_sender,
                            since_frame=f + 1, last_ping_frame=f), []
        return st, [WakeNextFrameAt(timing.wrap(start + timing.stl))]
    return st, []


def _step_pending(st: PendingJoin, ev: SlotEvents, timing, proto, me, rng):
    f, s, ph = ev.frame, ev.slot, ev.phase
    if s != st.anchor_slot or f <= st.join_frame or ph != Phase.INIT:
        return st, []
    ping = _first(ev.received, Kind.PING, sender=st.candidate_prev)
    if ping is None or ping.dest == NONE:
        return _random_search(f, timing, rng), []
    if ping.dest == me:
        return (RouteEnd(rx_slot=s, prev_hop=ping.sender, report_queue=ping.payload,
                         link_id=ping.link_id, armed=True, synth=ping.synthesized),
                [Transmit(Packet(Kind.ACK, me, ping.sender))])
    return NonRoute(anchor_slot=s, route_node=ping.sender, since_frame=f + 1, last_ping_frame=f), []


def _relay_rx(st, ev: SlotEvents, timing, proto, me, rng):
    """Reception slot handling shared by route and route-end nodes."""
    f = ev.frame
    ping = _first(ev.received, Kind.PING, sender=st.prev_hop)
    # a NONE ping from our own previous hop means it lost our acks and reverted to
    # route-end; acking it re-links the route without tearing down what lies downstream
    if ping is not None and ping.dest in (me, NONE):
        if isinstance(st, RouteEnd) and (st.drop_pending or st.frameout_count >= proto.frameout):
            return (replace(st, phq=0, drop_pending=True, dropping=True, armed=False),
                    [Transmit(Packet(Kind.DROP, me, st.prev_hop))])
        queue, acts = _enqueue(st.report_queue, ping.payload, proto)
        return (replace(st, phq=0, report_queue=queue, link_id=ping.link_id, armed=True,
                        synth=ping.synthesized),
                [Transmit(Packet(Kind.ACK, me, st.prev_hop))] + acts)
    if ping is not None:
        # the previous hop picked somebody else
        return _random_search(f, timing, rng), []
    phq = st.phq + 1
    if phq >= proto.phq_max:
        return _random_search(f, timing, rng), []
    if isinstance(st, RouteEnd) and st.drop_pending:
        return replace(st, phq=phq, armed=False), []
    return replace(st, phq=phq, armed=True, synth=True), []


def _relay_tx(st, ev: SlotEvents, timing, proto, me):
    if not st.armed:
        return replace(st, sent=False) if st.sent else st, []
    dest = st.next_hop if isinstance(st, Route) else NONE
    carried, rest, rejected = pack_payload(st.report_queue, proto.payload_capacity)
    pkt = Packet(Kind.PING, me, dest, st.link_id, carried, st.synth)
    acts: list[Action] = [Transmit(pkt)]
    if rejected:
        acts.append(ReportDroppedPayload(rejected))
    return replace(st, report_queue=rest, armed=False, sent=True), acts


def _step_route(st: Route, ev: SlotEvents, timing, proto, me, rng):
    s, ph = ev.slot, ev.phase
    tx = tx_slot(st.rx_slot, timing)
    if s == st.rx_slot and ph == Phase.INIT:
        return _relay_rx(st, ev, timing, proto, me, rng)
    if s == tx:
        if ph == Phase.START:
            return _relay_tx(st, ev, timing, proto, me)
        if ph == Phase.RESP and st.sent:
            if _first(ev.received, Kind.ACK, sender=st.next_hop, dest=me):
                return replace(st, nhq=0, sent=False), []
            if _first(ev.received, Kind.DROP, sender=st.next_hop, dest=me):
                return (_route_to_end(st), [Transmit(Packet(Kind.DROP_ACK, me, st.next_hop))])
            nhq = st.nhq + 1
            if nhq >= proto.nhq_max:
                return _route_to_end(st), []
            return replace(st, nhq=nhq, sent=False), []
    if s == report_slot(st.rx_slot, timing) and ph == Phase.INIT:
        queue, acts = _take_report(st, ev.received, me, proto)
        if acts:
            return replace(st, report_queue=queue), acts
    if ph != Phase.START:
        return st, _unexpected(ev.received, me, st, (Kind.ACK, Kind.DROP, Kind.REPORT))
    return st, []


def _route_to_end(st: Route) -> RouteEnd:
    return RouteEnd(rx_slot=st.rx_slot, prev_hop=st.prev_hop, phq=st.phq,
                    report_queue=st.report_queue, link_id=st.link_id)


def _step_route_end(st: RouteEnd, ev: SlotEvents, timing, proto, me, rng):
    s, ph = ev.slot, ev.phase
    tx = tx_slot(st.rx_slot, timing)
    if s == st.rx_slot:
        if ph == Phase.INIT:
            return _relay_rx(st, ev, timing, proto, me, rng)
        if ph == Phase.CONF and st.dropping:
            if _first(ev.received, Kind.DROP_ACK, sender=st.prev_hop, dest=me):
                return _random_search(ev.frame, timing, rng), []
            return replace(st, dropping=False), []
    if s == tx:
        if ph == Phase.START:
            return _relay_tx(st, ev, timing, proto, me)
        if ph == Phase.RESP and st.sent:
            ack = _first(ev.received, Kind.ACK, dest=me)
            if ack is not None:
                return Route(rx_slot=st.rx_slot, prev_hop=st.prev_hop, next_hop=ack.sender,
                             phq=st.phq, report_queue=st.report_queue, link_id=st.link_id), []
            count = st.frameout_count + 1
            return replace(st, frameout_count=count, drop_pending=count >= proto.frameout,
                           sent=False), []
    if s == report_slot(st.rx_slot, timing) and ph == Phase.INIT:
        queue, acts = _take_report(st, ev.received, me, proto)
        if acts:
            return replace(st, report_queue=queue), acts
    if ph != Phase.START:
        return st, _unexpected(ev.received, me, st, (Kind.ACK, Kind.DROP_ACK, Kind.REPORT))
    return st, []


def _step_nonroute(st: NonRoute, ev: SlotEvents, timing, proto, me, rng):
    f, s, ph = ev.frame, ev.slot, ev.phase
    if f < st.since_frame:
        return st, []
    if st.report_frame == f and s == st.report_slot:
        if ph == Phase.START:
            entry = PayloadEntry(me, proto.report_bytes, f)
            return st, [Transmit(Packet(Kind.REPORT, me, st.report_to, payload=(entry,)))]
        if ph == Phase.RESP:
            done = replace(st, report_frame=NONE, report_slot=NONE, report_to=NONE)
            if _first(ev.received, Kind.ACK, sender=st.report_to, dest=me):
                return replace(done, last_report_frame=f), []
            wait = rng.randint(1, proto.report_retry_window)
            return replace(done, backoff_until=f + wait + 1), []
    start = st.current_window_start()
    if not in_window(s, start, timing):
        return st, []
    if ph == Phase.INIT and ev.received:
        count = st.addressed_count if st.count_frame == f else 0
        heard = False
        report = None
        for p in ev.received:
            if p.kind != Kind.PING:
                continue
            if p.dest == NONE and proto.nonroute_join and conlimit_gate(count, proto.conlimit):
                return (PendingJoin(anchor_slot=s, candidate_prev=p.sender, join_frame=f),
                        [Transmit(Packet(Kind.ACK, me, p.sender))])
            if p.dest not in (NONE, me):
                count += 1
            heard = True
            due = (st.last_report_frame == NONE
                   or f - st.last_report_frame >= proto.report_period_frames)
            # the report rides in the following slot, which must be inside our window
            if (report is None and proto.reporting and p.link_id == 1 and due
                    and f >= st.backoff_until
                    and st.report_frame != f and in_window(s + 1, start, timing)):
                report = p.sender
        if not heard:
            return st, _unexpected(ev.received, me, st)
        if report is None:
            new = replace(st, last_ping_frame=f, count_frame=f, addressed_count=count)
        else:
            new = replace(st, last_ping_frame=f, count_frame=f, addressed_count=count,
                          report_frame=f, report_slot=timing.wrap(s + 1), report_to=report,
                          route_node=report)
        return new, _unexpected(ev.received, me, st)
    if ph == Phase.CONF and s == window_end(start, timing):
        if f - st.last_ping_frame >= proto.rq_max:
            return _random_search(f, timing, rng), []
        if proto.nonroute_mode == NonRouteMode.SHIFT:
            nxt = timing.wrap(start + timing.stl) if st.last_ping_frame == f else st.anchor_slot
            if nxt != start:
                return replace(st, window_start=nxt, since_frame=f + 1), []
    return st, []


def _step_dead(st, ev, timing, proto, me, rng):
    return st, []


_HANDLERS = {
    OriginBase: _step_origin,
    EndBase: _step_end,
    Searching: _step_searching,
    PendingJoin: _step_pending,
    NonRoute: _step_nonroute,
    Route: _step_route,
    RouteEnd: _step_route_end,
    Dead: _step_dead,
}


def step_node(state: NodeState, events: SlotEvents, timing: TimingConfig,
              proto: ProtocolConfig, *, me: int, rng: Optional[random.Random] = None
              ) -> tuple[NodeState, list[Action]]:
    """Advance one node through one phase of one slot.

    ``me`` is the node's own id.  ``rng`` is the node's protocol substream; it
    is consumed only when the node picks a fresh random search window or a
    report backoff.  Returns the successor state and the actions to perform
    in the next sub-phase of the slot (at most one ``Transmit``).
    """
    if rng is None:
        rng = random.Random(0)
    return _HANDLERS[type(state)](state, events, timing, proto, me, rng)
