"""Slot-synchronous simulation loop.

The loop only visits slots where some node has work to do.  A node that is
merely listening (a scanning searching node, a latched non-route node) is
not stepped unless it decodes something; whether it is awake in a slot is
answered from its :class:`~irissim.protocol.Agenda`.  Stepping a node that
decoded nothing in a slot outside its wake set is a no-op by construction
of the state machine, so this is exact, not an approximation.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

import numpy as np

from . import protocol as P
from .channel import Channel, DriftModel, LossModel, ReceiverLoss
from .energy import ActionCostTable, EnergyConfig, LedgerBank, energy_errors
from .protocol import (NONE, Agenda, Dead, EndBase, Kind, NonRoute, OriginBase, PayloadEntry,
                       Phase, ProtocolConfig, Route, RouteEnd, Searching, SlotEvents,
                       TimingConfig, agenda, state_name, step_node, tx_slot)
from .topology import Topology, TopologyKind, TopologySpec, generate, spec_errors


class SimulationError(RuntimeError):
    """A runtime invariant was violated (engine or protocol bug)."""


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class StopKind(str, Enum):
    ROUTE_FORMED = "route_formed"
    MAX_FRAMES = "max_frames"
    FIXED_DURATION = "fixed_duration"
    RECOVERED = "recovered"


class Traffic(str, Enum):
    REPORTS = "reports"      # only non-route reports fill ping payloads
    SATURATE = "saturate"    # the origin fills every ping to capacity, no reports


RANDOM_ROUTE = "random_route"
RANDOM_NONROUTE = "random_nonroute"
FAILURE_TARGETS = (RANDOM_ROUTE, RANDOM_NONROUTE)


@dataclass(frozen=True)
class LossSpec:
    model: LossModel = LossModel.NONE
    rate: float = 0.0


@dataclass(frozen=True)
class DriftSpec:
    ppm: float = 0.0


@dataclass(frozen=True)
class StopSpec:
    kind: StopKind = StopKind.ROUTE_FORMED
    duration_s: Optional[float] = None


@dataclass(frozen=True)
class FailureEvent:
    """Permanent death of ``node`` at ``at_s``.

    ``node`` may be a concrete id or one of ``random_route`` /
    ``random_nonroute``, resolved when the failure fires.  With
    ``after_formation`` the time counts from route formation instead of the
    start of the run (and the failure never fires if no route forms).
    """
    node: Union[int, str]
    at_s: float = 0.0
    after_formation: bool = False


@dataclass(frozen=True)
class Scenario:
    timing: TimingConfig = field(default_factory=TimingConfig)
    proto: ProtocolConfig = field(default_factory=ProtocolConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    topology: TopologySpec = field(default_factory=TopologySpec)
    loss: LossSpec = field(default_factory=LossSpec)
    drift: DriftSpec = field(default_factory=DriftSpec)
    failures: tuple[FailureEvent, ...] = ()
    max_frames: int = 2000
    seed: int = 0
    stop: StopSpec = field(default_factory=StopSpec)
    traffic: Traffic = Traffic.REPORTS
    trace_level: str = "lean"
    check_invariants: bool = True
    name: str = "scenario"

    @property
    def horizon_frames(self) -> int:
        if self.stop.kind is StopKind.FIXED_DURATION and self.stop.duration_s is not None:
            return min(self.max_frames, math.ceil(self.stop.duration_s / self.timing.frame_s))
        return self.max_frames


TRACE_LEVELS = ("lean", "full")


def scenario_errors(sc: Scenario) -> list[str]:
    """Cross-field checks; each message is prefixed with its key path."""
    errors = []
    errors += [f"energy: {e}" for e in energy_errors(sc.energy)]
    errors += [f"topology: {e}" for e in spec_errors(sc.topology)]
    if sc.max_frames < 1:
        errors.append("max_frames: must be >= 1")
    if sc.seed < 0:
        errors.append("seed: must be >= 0")
    if not 0 <= sc.loss.rate < 1:
        errors.append(f"loss.rate: must lie in [0, 1), got {sc.loss.rate}")
    if LossModel(sc.loss.model) is LossModel.NONE and sc.loss.rate:
        errors.append("loss.rate: set a loss model to use a non-zero rate")
    if sc.drift.ppm < 0:
        errors.append("drift.ppm: must be >= 0")
    if sc.trace_level not in TRACE_LEVELS:
        errors.append(f"trace_level: must be one of {TRACE_LEVELS}")
    if sc.stop.kind is StopKind.FIXED_DURATION:
        if sc.stop.duration_s is None or sc.stop.duration_s <= 0:
            errors.append("stop.duration_s: fixed_duration needs a positive duration")
    horizon_s = sc.horizon_frames * sc.timing.frame_s
    for i, ev in enumerate(sc.failures):
        if isinstance(ev.node, str) and ev.node not in FAILURE_TARGETS:
            errors.append(f"failures[{i}].node: must be an id or one of {FAILURE_TARGETS}")
        if isinstance(ev.node, int) and ev.node < 0:
            errors.append(f"failures[{i}].node: must be >= 0")
        if ev.at_s < 0:
            errors.append(f"failures[{i}].at_s: must be >= 0")
        elif not ev.after_formation and ev.at_s >= horizon_s:
            errors.append(f"failures[{i}].at_s: {ev.at_s} s is beyond the horizon ({horizon_s} s)")
    if sc.stop.kind is StopKind.RECOVERED and not sc.failures:
        errors.append("stop.kind: recovered needs at least one failure")
    return errors


def validate(sc: Scenario) -> None:
    errors = scenario_errors(sc)
    if errors:
        raise ScenarioError(errors)


# ---------------------------------------------------------------------------
# RNG discipline

PURPOSES = {"proto": 0, "init": 1, "loss": 2, "drift": 3, "failure": 4}
GLOBAL_STREAM = 2**31 - 1


def substream(seed: int, node: int, purpose: str) -> random.Random:
    """Independent generator for (node, purpose) derived from the master seed.

    Streams are keyed, not drawn in sequence, so adding a consumer never
    shifts the draws of another.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(node, PURPOSES[purpose]))
    return random.Random(int(ss.generate_state(1, np.uint64)[0]))


# ---------------------------------------------------------------------------
# trace


@dataclass
class RunTrace:
    """Event log and terminal summary of one run.

    ``records`` are ``(frame, slot, phase, node, code, fields)`` tuples in
    ``(frame, slot, phase, node)`` order; frame-level events use slot 0.
    """
    scenario: Scenario
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    energy_rows: list = field(default_factory=list)
    positions: dict = field(default_factory=dict)
    origin: int = 0
    end: int = 0

    def of(self, code: str) -> list:
        return [r for r in self.records if r[4] == code]

    def to_lines(self) -> list[str]:
        import json
        lines = [json.dumps([f, s, ph, n, code, fields], sort_keys=True, separators=(",", ":"))
                 for f, s, ph, n, code, fields in self.records]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True, separators=(",", ":")))
        return lines


# ---------------------------------------------------------------------------
# helpers


def route_chain(states: list, origin: int, timing: TimingConfig) -> list[int]:
    """Relays reachable from the origin by consistent next-hop links.

    A link counts only if the next hop agrees (its prev_hop is the sender
    and its rx slot is the sender's tx slot).  Raises if a node repeats.
    """
    chain = []
    seen = {origin}
    cur = origin
    nxt = states[origin].next_hop
    expect_rx = 1
    while nxt != NONE:
        st = states[nxt]
        if not isinstance(st, (Route, RouteEnd)) or st.prev_hop != cur or st.rx_slot != expect_rx:
            break
        if nxt in seen:
            raise SimulationError(f"route loop through node {nxt}")
        chain.append(nxt)
        seen.add(nxt)
        expect_rx = tx_slot(st.rx_slot, timing)
        cur = nxt
        nxt = st.next_hop if isinstance(st, Route) else NONE
    return chain


_SCAN, _PERIODIC, _OFF = 1, 2, 0


class Simulation:
    def __init__(self, scenario: Scenario, topology: Optional[Topology] = None):
        validate(scenario)
        self.sc = sc = scenario
        self.timing = sc.timing
        # saturating traffic measures the route's own carrying capacity, so
        # non-route reports must not compete for ping payload
        self.proto = (replace(sc.proto, reporting=False) if sc.traffic is Traffic.SATURATE
                      else sc.proto)
        self.spf = sc.timing.slots_per_frame
        self.stl = sc.timing.stl
        self.topo = topology if topology is not None else generate(sc.topology)
        ids = self.topo.ids
        if ids != list(range(len(ids))):
            raise ScenarioError(["topology: node ids must be 0..n-1"])
        self.n = n = len(ids)
        pos = self.topo.positions
        self.origin = min(ids, key=lambda i: (pos[i], i))
        self.end = max(ids, key=lambda i: (pos[i], -i))
        if self.origin == self.end:
            raise ScenarioError(["topology: base stations must be distinct"])
        self.bases = {self.origin, self.end}
        self.full = sc.trace_level == "full"
        seed = sc.seed

        # per-node state
        self.rngs = [substream(seed, i, "proto") for i in range(n)]
        self.states: list = [None] * n
        for i in range(n):
            if i == self.origin:
                self.states[i] = OriginBase()
            else:
                start = substream(seed, i, "init").randint(1, self.spf)
                self.states[i] = (EndBase(window_start=start) if i == self.end
                                  else Searching(window_start=start))

        # channel
        losses = {}
        if LossModel(sc.loss.model) is not LossModel.NONE and sc.loss.rate > 0:
            losses = {i: ReceiverLoss(LossModel(sc.loss.model), sc.loss.rate, substream(seed, i, "loss"))
                      for i in range(n)}
        self.drift = None
        if sc.drift.ppm > 0:
            drng = substream(seed, GLOBAL_STREAM, "drift")
            signs = [drng.choice((-1, 1)) for _ in range(n)]
            self.drift = DriftModel.build(n, sc.drift.ppm, self.timing.frame_s * 1000.0,
                                          self.timing.guard_ms, signs, fixed=self.bases)
        self.channel = Channel(self.topo, losses, self.drift)
        self.losses = losses
        self.nbrs = self.channel.nbrs

        # energy
        table = ActionCostTable.for_config(sc.energy, self.timing.slot_s, self.timing.guard_ms / 1000)
        self.table = table
        self.bank = LedgerBank(n, sc.energy, table, self.timing.slot_s, self.timing.guard_ms / 1000,
                               powered=self.bases)
        self.worst_slot = max(table.tx_ping_slot, table.rx_ping_slot, table.listen_slot)
        self.cnt_active = np.zeros(n, dtype=np.int64)
        self.cnt_tx = np.zeros(n, dtype=np.int64)
        self.cnt_resp = np.zeros(n, dtype=np.int64)
        self.cnt_conf = np.zeros(n, dtype=np.int64)
        self.cnt_guard = np.zeros(n, dtype=np.int64)
        self.gated = np.zeros(n, dtype=bool)
        self.alive = np.ones(n, dtype=bool)

        # schedule bookkeeping
        self.ag: list[Agenda] = [Agenda(synced=False)] * n
        self.version = [0] * n
        self.sched: list = [(_OFF, 0, frozenset(), frozenset())] * n
        self.steady = np.zeros(n, dtype=np.int64)       # awake slots per frame, periodic part
        self.steady_from = np.zeros(n, dtype=np.int64)
        self.guarded = np.zeros(n, dtype=bool)
        self.p_wake: dict[int, dict[int, int]] = {}    # slot -> {node: since}
        self.once: dict[tuple[int, int], dict[int, int]] = {}  # (frame, slot) -> {node: version}
        self.once_frames: dict[int, set] = {}
        for i in range(n):
            self._install(i, agenda(self.states[i], self.timing, self.proto), -1, 0)

        # run bookkeeping
        self.records: list = []
        self.slot_records: list = []
        self.f = 0
        self.s = 0
        self.todo: list[int] = []
        self.late: set = set()
        self.last_ping = np.full(n, -1, dtype=np.int64)
        self.formed_frame: Optional[int] = None
        self.formation: Optional[dict] = None
        self.failures_pending = sorted(
            [(ev.after_formation, ev.at_s, i, ev) for i, ev in enumerate(sc.failures)],
            key=lambda t: (t[0], t[1], t[2]))
        self.failed: list[dict] = []
        self.fail_rng = substream(seed, GLOBAL_STREAM, "failure")
        self.recovered_at: Optional[tuple[int, int]] = None
        self.counters = dict(diagnostics=0, payload_dropped=0, collisions=0, lost=0,
                             drift_blocked=0, route_drift_blocked=0, delivered_bytes=0,
                             delivered_entries=0,
                             pings=0, gated_node_frames=0)
        self.diag_codes: dict[str, int] = {}
        self.frames_run = 0

    # -- agenda bookkeeping -------------------------------------------------

    def _install(self, node: int, ag: Agenda, f: int, s: int) -> None:
        """Make ``ag`` the node's schedule from (f, s) onwards."""
        old = self.ag[node]
        self.ag[node] = ag
        self.version[node] += 1
        ver = self.version[node]
        if old.wake != ag.wake or old.since != ag.since:
            for slot in old.wake:
                self.p_wake[slot].pop(node, None)
            for slot in ag.wake:
                self.p_wake.setdefault(slot, {})[node] = ag.since
                if f >= 0 and ag.since <= f and slot > s:
                    heapq.heappush(self.todo, slot)
        elif f >= 0 and ag.since <= f:
            for slot in ag.wake:
                if slot > s:
                    heapq.heappush(self.todo, slot)
        if ag.since <= f and s in ag.wake:
            self.late.add(node)
        once_here = set()
        for fr, sl in ag.once:
            if (fr, sl) < (f, s):
                continue
            self.once.setdefault((fr, sl), {})[node] = ver
            self.once_frames.setdefault(fr, set()).add(sl)
            if fr == f:
                once_here.add((fr, sl))
                if sl > s:
                    heapq.heappush(self.todo, sl)
                else:
                    self.late.add(node)
        once_set = frozenset((fr, sl) for fr, sl in ag.once)
        if ag.scan is not None:
            ws, sf = ag.scan
            c = (ws - 1 - self.stl * sf) % self.spf
            self.sched[node] = (_SCAN, c, sf, once_set)
            self.steady[node] = self.stl
            self.steady_from[node] = sf
        elif ag.active:
            self.sched[node] = (_PERIODIC, ag.since, ag.active, once_set)
            self.steady[node] = len(ag.active)
            self.steady_from[node] = ag.since
        else:
            self.sched[node] = (_OFF, 0, frozenset(), once_set)
            self.steady[node] = 0
            self.steady_from[node] = 0
        self.guarded[node] = ag.guard

    def _slots_after(self, ag: Agenda, f: int, s: int) -> int:
        return sum(1 for x in ag.slots_in(f, self.timing) if x > s)

    def _awake(self, m: int) -> bool:
        if self.gated[m]:
            return False
        kind, a, b, once = self.sched[m]
        f, s = self.f, self.s
        if kind == _SCAN:
            if f >= b and (s - 1 - a - self.stl * f) % self.spf < self.stl:
                return True
        elif kind == _PERIODIC:
            if f >= a and s in b:
                return True
        return bool(once) and (f, s) in once

    def _synced(self, m: int) -> bool:
        return self.sched[m][0] != _SCAN

    # -- recording ----------------------------------------------------------

    def _rec(self, phase: int, node: int, code: str, **fields) -> None:
        self.slot_records.append((self.f, self.s, phase, node, code, fields))

    def _flush(self) -> None:
        if self.slot_records:
            self.slot_records.sort(key=lambda r: (r[2], r[3]))
            self.records.extend(self.slot_records)
            self.slot_records = []

    # -- stepping -----------------------------------------------------------

    def _step(self, node: int, phase: Phase, received: tuple, txs: list) -> None:
        st = self.states[node]
        if isinstance(st, Dead):
            return
        f, s = self.f, self.s
        new, acts = step_node(st, SlotEvents(f, s, phase, received), self.timing, self.proto,
                              me=node, rng=self.rngs[node])
        if node == self.end and phase == Phase.INIT:
            self._end_decodes(received)
        if new is not st:
            self.states[node] = new
            self._changed(node, st, new, phase)
        for act in acts:
            if isinstance(act, P.Transmit):
                self._transmit(node, act.packet, phase, txs)
            elif isinstance(act, P.ReportDroppedPayload):
                self.counters["payload_dropped"] += act.count
                self._rec(phase, node, "DROP", count=act.count)
            elif isinstance(act, P.Diagnostic):
                self.counters["diagnostics"] += 1
                self.diag_codes[act.code] = self.diag_codes.get(act.code, 0) + 1
                self._rec(phase, node, "DIAG", code=act.code)

    def _transmit(self, node: int, pkt: P.Packet, phase: Phase, txs: list) -> None:
        if phase == Phase.CONF:
            raise SimulationError(f"node {node} tried to transmit after the confirm sub-phase")
        if self.gated[node]:
            return
        sub = int(phase)  # START -> initiator (0), INIT -> response (1), RESP -> confirm (2)
        if pkt.kind == Kind.PING:
            if self.last_ping[node] == self.f:
                raise SimulationError(f"node {node} sent two pings in frame {self.f}")
            self.last_ping[node] = self.f
            self.counters["pings"] += 1
        if sub == 0:
            self.cnt_tx[node] += 1
        elif sub == 1:
            self.cnt_resp[node] += 1
        else:
            self.cnt_conf[node] += 1
        txs.append((node, pkt))
        if self.full:
            self._rec(sub, node, "TX", kind=pkt.kind.name, dest=pkt.dest, link=pkt.link_id,
                      bytes=pkt.payload_bytes, synth=pkt.synthesized)

    def _changed(self, node: int, old, new, phase: Phase) -> None:
        f, s = self.f, self.s
        if type(old) is not type(new) or (isinstance(new, Route) and old.next_hop != new.next_hop):
            fields = {"from": state_name(old), "to": state_name(new)}
            for key in ("rx_slot", "prev_hop", "next_hop", "anchor_slot"):
                if hasattr(new, key):
                    fields[key] = getattr(new, key)
            self._rec(int(phase), node, "ST", **fields)
        ag = agenda(new, self.timing, self.proto)
        old_ag = self.ag[node]
        if ag == old_ag:
            return
        same_periodic = (ag.active == old_ag.active and ag.since == old_ag.since
                         and ag.scan == old_ag.scan)
        touches_now = (not same_periodic or any(fr == f for fr, _ in ag.once)
                       or any(fr == f for fr, _ in old_ag.once))
        if touches_now and not self.gated[node]:
            self.cnt_active[node] += (self._slots_after(ag, f, s)
                                      - self._slots_after(old_ag, f, s))
        self._install(node, ag, f, s)

    def _end_decodes(self, received: tuple) -> None:
        for p in received:
            if p.kind != Kind.PING:
                continue
            # overheard pings reach the end base too; only those addressed to it count as delivered
            mine = p.dest in (NONE, self.end)
            nbytes = p.payload_bytes if mine else 0
            entries = len(p.payload) if mine else 0
            self.counters["delivered_bytes"] += nbytes
            self.counters["delivered_entries"] += entries
            self._rec(int(Phase.INIT), self.end, "DELIV", sender=p.sender, dest=p.dest,
                      synth=p.synthesized, bytes=nbytes, entries=entries, link=p.link_id)
            if self.formed_frame is None:
                self._formed(p.sender, p.synthesized)
            if (not p.synthesized and self.failed and self.recovered_at is None
                    and self.f >= self.failed[-1]["frame"]):
                self.recovered_at = (self.f, self.s)

    def _formed(self, sender: int, synth: bool) -> None:
        """First end-base decode.  Packets carry no synthesized marker on air, so
        any ping counts; ``intact`` tells whether it really came from the origin."""
        chain = route_chain(self.states, self.origin, self.timing)
        if sender == self.origin:
            relays = []
        elif sender in chain:
            relays = chain[:chain.index(sender) + 1]
        else:
            relays = self._walk_back(sender)
        self.formed_frame = self.f
        # hops is unknown (None) when the sender's chain does not lead back to the origin
        self.formation = {"frame": self.f, "slot": self.s,
                          "hops": len(relays) + 1 if relays is not None else None,
                          "relays": relays if relays is not None else [],
                          "intact": relays is not None and not synth}
        self._rec(int(Phase.INIT), self.end, "FORM", **self.formation)

    def _walk_back(self, sender: int) -> Optional[list[int]]:
        path = []
        cur = sender
        while cur != self.origin:
            st = self.states[cur]
            if not isinstance(st, (Route, RouteEnd)) or cur in path:
                return None
            path.append(cur)
            cur = st.prev_hop
        return path[::-1]

    # -- slot ---------------------------------------------------------------

    def _wakers(self) -> set:
        f, s = self.f, self.s
        out = set()
        for node, since in self.p_wake.get(s, {}).items():
            if since <= f:
                out.add(node)
        entry = self.once.pop((f, s), None)
        if entry:
            ver = self.version
            out.update(node for node, v in entry.items() if ver[node] == v)
        return out

    def _resolve(self, txs: list, sub: int) -> dict:
        if not txs:
            return {}
        out = self.channel.resolve(txs, self._awake_cached, sub,
                                   self._synced if self.drift is not None else None)
        if out.collisions:
            self.counters["collisions"] += len(out.collisions)
            if self.full:
                for lst, snd in out.collisions:
                    self._rec(sub, lst, "COLL", senders=list(snd))
        if out.lost:
            self.counters["lost"] += len(out.lost)
            if self.full:
                for lst, snd in out.lost:
                    self._rec(sub, lst, "LOSS", sender=snd)
        for lst, snd in out.drift_blocked:
            self.counters["drift_blocked"] += 1
            st = self.states[lst]
            on_route = isinstance(st, (Route, RouteEnd)) and st.prev_hop == snd
            if on_route:
                self.counters["route_drift_blocked"] += 1
            if on_route or self.full:
                self._rec(sub, lst, "DRIFT", sender=snd, route=on_route,
                          offset_ms=round(float(self.drift.offset[lst] - self.drift.offset[snd]), 3))
        if self.full:
            for lst, pkts in out.decoded.items():
                for p in pkts:
                    self._rec(sub, lst, "RX", sender=p.sender, kind=p.kind.name, dest=p.dest)
        return out.decoded

    def _awake_cached(self, m: int) -> bool:
        hit = self.awake_cache.get(m)
        if hit is None:
            hit = self.awake_cache[m] = self._awake(m) or m in self.late
        return hit

    def _slot(self) -> None:
        self.late = set()
        self.awake_cache: dict[int, bool] = {}
        wakers = self._wakers()
        if not wakers:
            return
        tx0: list = []
        for node in sorted(wakers):
            self._step(node, Phase.START, (), tx0)
        dec = self._resolve(tx0, 0)
        for phase in (Phase.INIT, Phase.RESP, Phase.CONF):
            callers = sorted(wakers | self.late | dec.keys())
            txs: list = []
            for node in callers:
                self._step(node, phase, dec.get(node, ()), txs)
            if phase == Phase.CONF:
                if txs:
                    raise SimulationError("transmission after the confirm sub-phase")
                break
            self.awake_cache = {k: v for k, v in self.awake_cache.items() if v}
            dec = self._resolve(txs, int(phase))
        self._flush()

    # -- frame --------------------------------------------------------------

    def _frame_start(self, f: int) -> None:
        self.f, self.s = f, 0
        self._apply_failures(f)
        st = self.states[self.origin]
        if self.formed_frame is not None and f > self.formed_frame and st.link_id == 0:
            self.states[self.origin] = replace(st, link_id=1)
            self._rec(0, self.origin, "LINK", link=1)
        if self.sc.traffic is Traffic.SATURATE:
            st = self.states[self.origin]
            self.states[self.origin] = replace(
                st, queue=(PayloadEntry(self.origin, self.proto.payload_capacity, f),))
        if self.drift is not None:
            self.drift.accrue_all()
        # expected awake slots this frame under the current agendas
        cnt = np.where(f >= self.steady_from, self.steady, 0)
        for sl in self.once_frames.get(f, ()):
            for node, v in self.once.get((f, sl), {}).items():
                if self.version[node] != v:
                    continue
                kind, a, b, _ = self.sched[node]
                covered = ((kind == _PERIODIC and f >= a and sl in b)
                           or (kind == _SCAN and f >= b
                               and (sl - 1 - a - self.stl * f) % self.spf < self.stl))
                if not covered:
                    cnt[node] += 1
        self.cnt_active = cnt.astype(np.int64)
        self.cnt_guard = (self.guarded & (f >= self.steady_from) & (self.steady > 0)).astype(np.int64)
        for arr in (self.cnt_tx, self.cnt_resp, self.cnt_conf):
            arr[:] = 0
        if self.sc.energy.gating:
            t = self.table
            planned = self.cnt_active * self.worst_slot + self.cnt_guard * t.guard + t.send_ack
            gated = (self.bank.stored < planned) & (self.cnt_active > 0) & self.alive
            for b in self.bases:
                gated[b] = False
            self.gated = gated
            self.counters["gated_node_frames"] += int(gated.sum())
        self._flush()

    def _frame_end(self, f: int) -> None:
        gated = self.gated
        active = np.where(gated, 0, self.cnt_active)
        guards = np.where(gated, 0, self.cnt_guard)
        if np.any(self.cnt_tx + self.cnt_resp > active):
            bad = int(np.flatnonzero(self.cnt_tx + self.cnt_resp > active)[0])
            raise SimulationError(f"node {bad} transmitted in more slots than it was awake")
        self.bank.close_frame(self.timing.frame_s, self.alive, active, self.cnt_tx, self.cnt_resp,
                              self.cnt_conf, guards)
        if self.sc.check_invariants:
            route_chain(self.states, self.origin, self.timing)
        self.frames_run = f + 1
        self.once_frames.pop(f, None)

    def _apply_failures(self, f: int) -> None:
        frame_s = self.timing.frame_s
        keep = []
        for item in self.failures_pending:
            after, at_s, idx, ev = item
            if after:
                if self.formed_frame is None:
                    keep.append(item)
                    continue
                # formation time is measured from the first origin ping (t = 0)
                t0 = (self.formed_frame * self.spf + self.formation["slot"] - 1) * self.timing.slot_s
                due = math.ceil((t0 + at_s) / frame_s - 1e-9)
            else:
                due = math.ceil(at_s / frame_s - 1e-9)
            if due > f:
                keep.append(item)
                continue
            self._fail(ev, f)
        self.failures_pending = keep

    def _fail(self, ev: FailureEvent, f: int) -> None:
        node = ev.node
        if node == RANDOM_ROUTE:
            chain = route_chain(self.states, self.origin, self.timing)
            pool = [x for x in chain if x not in self.bases]
            node = self.fail_rng.choice(pool) if pool else None
        elif node == RANDOM_NONROUTE:
            pool = [i for i in range(self.n) if isinstance(self.states[i], NonRoute)]
            node = self.fail_rng.choice(pool) if pool else None
        if node is None:
            self._rec(0, -1, "FAIL", target=str(ev.node), skipped="no candidate")
            return
        if node >= self.n:
            raise ScenarioError([f"failures: unknown node id {node}"])
        st = self.states[node]
        if isinstance(st, Dead):
            self.counters["diagnostics"] += 1
            self._rec(0, node, "DIAG", code="already-dead")
            return
        pos = self.topo.positions
        info = {"node": node, "frame": f, "time_s": f * self.timing.frame_s, "role": state_name(st),
                "dist_to_end_km": round(abs(pos[self.end] - pos[node]), 3),
                "on_route": node in route_chain(self.states, self.origin, self.timing)}
        self.failed.append(info)
        self.recovered_at = None
        self._rec(0, node, "FAIL", **{k: v for k, v in info.items() if k != "node"})
        self.states[node] = Dead()
        self.alive[node] = False
        self._install(node, Agenda(synced=False), f, 0)

    def _done(self, f: int) -> bool:
        kind = self.sc.stop.kind
        if kind is StopKind.ROUTE_FORMED:
            return self.formed_frame is not None
        if kind is StopKind.RECOVERED:
            return not self.failures_pending and self.recovered_at is not None
        return False

    # -- main ---------------------------------------------------------------

    def run(self) -> RunTrace:
        horizon = self.sc.horizon_frames
        for f in range(horizon):
            self._frame_start(f)
            slots = sorted(s for s, members in self.p_wake.items() if members)
            slots = sorted(set(slots) | self.once_frames.pop(f, set()))
            self.todo = slots
            heapq.heapify(self.todo)
            done_slots = set()
            while self.todo:
                s = heapq.heappop(self.todo)
                if s in done_slots:
                    continue
                done_slots.add(s)
                self.s = s
                self._slot()
            self.s = self.spf
            self._frame_end(f)
            if self._done(f):
                break
        return self._finish()

    def _finish(self) -> RunTrace:
        bank = self.bank
        audit = bank.replay()
        if np.max(np.abs(audit - bank.stored)) > 1e-6:
            raise SimulationError("energy ledger failed the conservation audit")
        if np.any(bank.min_stored < -1e-9):
            raise SimulationError("stored charge went negative")
        duty = bank.duty_cycles()
        txd = bank.tx_duty_cycles()
        rows = [{"node_id": i, "role": state_name(self.states[i]),
                 "stored_final_mC": round(float(bank.stored[i]), 6),
                 "duty_cycle": round(float(duty[i]), 8), "tx_duty_cycle": round(float(txd[i]), 8),
                 "min_stored_mC": round(float(bank.min_stored[i]), 6)} for i in range(self.n)]
        chain = route_chain(self.states, self.origin, self.timing)
        summary = dict(self.counters)
        summary.update(
            frames=self.frames_run, seed=self.sc.seed, name=self.sc.name,
            formed=self.formed_frame is not None,
            formed_frame=self.formed_frame,
            formation_slot=self.formation["slot"] if self.formation else None,
            hops=self.formation["hops"] if self.formation else None,
            final_route=chain, diag_codes=dict(sorted(self.diag_codes.items())),
            failures=self.failed,
            recovered_at=list(self.recovered_at) if self.recovered_at else None,
            max_duty_cycle=float(max(duty[i] for i in range(self.n) if i not in self.bases)),
            min_stored_mC=float(bank.min_stored.min()),
        )
        return RunTrace(self.sc, self.records, summary, rows, dict(self.topo.positions),
                        self.origin, self.end)


def run(scenario: Scenario, topology: Optional[Topology] = None) -> RunTrace:
    """Simulate ``scenario`` until its stop condition and return the trace."""
    return Simulation(scenario, topology).run()


def inject_failure(sim: Simulation, event: FailureEvent) -> None:
    """Queue a failure on a simulation in progress (fires at the next frame boundary >= at)."""
    sim.failures_pending.append((event.after_formation, event.at_s, len(sim.failures_pending), event))


def out_of_band_signal(sim: Simulation) -> bool:
    """Apply the base-station backhaul signal; True when the origin now sends link id 1."""
    st = sim.states[sim.origin]
    if sim.formed_frame is not None and sim.f > sim.formed_frame and st.link_id == 0:
        sim.states[sim.origin] = replace(st, link_id=1)
    return sim.states[sim.origin].link_id == 1
