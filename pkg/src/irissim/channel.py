"""Radio model: disc connectivity, collisions, loss processes and clock drift."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .protocol import Kind, Packet
from .topology import Topology


class LossModel(str, Enum):
    NONE = "none"
    BERNOULLI = "bernoulli"
    UNIFORM_GAP = "uniform_gap"
    EXPONENTIAL_GAP = "exponential_gap"


class ChannelError(ValueError):
    pass


def in_range(a: int, b: int, topo: Topology) -> bool:
    return abs(topo.position(a) - topo.position(b)) <= topo.range_km + 1e-9


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossProcess:
    """Loss process of one receiver.

    Time is counted in receptions: ``next_loss`` is the index of the next
    reception that will be lost.  Gap models therefore fix the long-run loss
    fraction at exactly ``rate`` whatever the traffic pattern.
    """
    model: LossModel = LossModel.NONE
    rate: float = 0.0
    next_loss: int = 0

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ChannelError(f"loss rate must lie in [0, 1), got {self.rate}")


def draw_gap(model: LossModel, rate: float, rng: random.Random) -> int:
    """Receptions from one loss to the next; mean ``1/rate``."""
    if model is LossModel.EXPONENTIAL_GAP:
        # discrete memoryless gap: geometric with success probability ``rate``
        u = 1.0 - rng.random()
        return int(math.floor(math.log(u) / math.log1p(-rate))) + 1
    if model is LossModel.UNIFORM_GAP:
        # uniform on 1..M with (M + 1) / 2 = 1 / rate, mixing neighbouring M when not integral
        m = 2.0 / rate - 1.0
        lo = int(math.floor(m))
        p_hi = (1.0 / rate - (lo + 1) / 2.0) / 0.5
        top = lo + 1 if rng.random() < p_hi else lo
        return rng.randint(1, max(1, top))
    raise ChannelError(f"{model} has no gaps")


def advance_loss(loss: LossProcess, rng: random.Random, now: int) -> LossProcess:
    """Schedule the loss following reception ``now``."""
    if loss.model in (LossModel.NONE, LossModel.BERNOULLI) or loss.rate == 0:
        return loss
    return replace(loss, next_loss=now + draw_gap(LossModel(loss.model), loss.rate, rng))


class ReceiverLoss:
    """Mutable per-receiver loss state used by the engine."""

    __slots__ = ("model", "rate", "rng", "count", "next_loss", "lost_count")

    def __init__(self, model: LossModel, rate: float, rng: random.Random):
        self.model = LossModel(model)
        self.rate = rate
        self.rng = rng
        self.count = 0
        self.lost_count = 0
        self.next_loss = 0
        if self.model in (LossModel.UNIFORM_GAP, LossModel.EXPONENTIAL_GAP) and rate > 0:
            self.next_loss = draw_gap(self.model, rate, rng)

    def lost(self) -> bool:
        """Consume one reception; True when it is lost."""
        self.count += 1
        if self.model is LossModel.NONE or self.rate == 0:
            return False
        if self.model is LossModel.BERNOULLI:
            hit = self.rng.random() < self.rate
        else:
            hit = self.count >= self.next_loss
            if hit:
                self.next_loss = self.count + draw_gap(self.model, self.rate, self.rng)
        if hit:
            self.lost_count += 1
        return hit


# ---------------------------------------------------------------------------
# drift


@dataclass
class DriftModel:
    """Per-node clock error relative to the originating base station (ms)."""
    ppm: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    frame_ms: float = 200_000.0
    guard_ms: float = 50.0

    @classmethod
    def build(cls, n: int, ppm: float, frame_ms: float, guard_ms: float,
              signs: Optional[Iterable[int]] = None, fixed: Iterable[int] = ()) -> "DriftModel":
        rates = np.full(n, float(ppm))
        for node in fixed:
            rates[node] = 0.0
        sg = np.ones(n) if signs is None else np.asarray(list(signs), dtype=float)
        return cls(rates, sg, np.zeros(n), frame_ms, guard_ms)

    def per_frame(self) -> np.ndarray:
        return self.sign * self.ppm * 1e-6 * self.frame_ms

    def accrue_all(self, frames: int = 1) -> None:
        self.offset += self.per_frame() * frames

    def blocked(self, listener: int, sender: int) -> bool:
        return abs(self.offset[listener] - self.offset[sender]) > self.guard_ms + 1e-9

    def resync(self, listener: int, sender: int) -> None:
        self.offset[listener] = self.offset[sender]


def accrue_drift(drift: DriftModel, node: int, frames_elapsed: int) -> DriftModel:
    offset = drift.offset.copy()
    offset[node] += drift.sign[node] * drift.ppm[node] * 1e-6 * drift.frame_ms * frames_elapsed
    return replace(drift, offset=offset)


# ---------------------------------------------------------------------------
# slot resolution


@dataclass
class SlotOutcome:
    decoded: dict = field(default_factory=dict)
    collisions: list = field(default_factory=list)
    lost: list = field(default_factory=list)
    drift_blocked: list = field(default_factory=list)


class Channel:
    """Resolves one sub-phase of one slot at a time."""

    def __init__(self, topology: Topology, losses: Optional[dict] = None,
                 drift: Optional[DriftModel] = None):
        self.topology = topology
        self.nbrs = topology.neighbours()
        self.losses = losses or {}
        self.drift = drift

    def resolve(self, transmissions: list[tuple[int, Packet]], listening,
                subphase: int = 0, synced=None) -> SlotOutcome:
        """Decide what every listener decodes.

        ``listening`` (and ``synced``) are sets of node ids or predicates.
        Pings are decoded by every in-range listener; other kinds are only
        delivered to their destination but still collide everywhere.  Two or
        more in-range transmissions destroy each other (no capture).  For
        initiator packets, synced listeners must be within the guard time of
        the sender's clock.
        """
        out = SlotOutcome()
        if not transmissions:
            return out
        listen = listening.__contains__ if isinstance(listening, (set, frozenset)) else listening
        if synced is None:
            is_synced = None
        else:
            is_synced = synced.__contains__ if isinstance(synced, (set, frozenset)) else synced
        nbrs = self.nbrs
        senders = {n for n, _ in transmissions}
        targets = set()
        for n, pkt in transmissions:
            if pkt.kind == Kind.PING:
                targets.update(m for m in nbrs[n] if m not in senders and listen(m))
            else:
                d = pkt.dest
                if d in nbrs[n] and d not in senders and listen(d):
                    targets.add(d)
        single = len(transmissions) == 1
        for lst in sorted(targets):
            if single:
                n, pkt = transmissions[0]
            else:
                heard = [(n, p) for n, p in transmissions if lst in nbrs[n]]
                if len(heard) > 1:
                    out.collisions.append((lst, tuple(sorted(n for n, _ in heard))))
                    continue
                n, pkt = heard[0]
            if pkt.kind == Kind.PING or pkt.dest == lst:
                self._deliver(out, lst, n, pkt, subphase, is_synced)
        return out

    def _deliver(self, out: SlotOutcome, lst: int, n: int, pkt: Packet, subphase: int,
                 is_synced) -> None:
        loss = self.losses.get(lst)
        if loss is not None and loss.lost():
            out.lost.append((lst, n))
            return
        drift = self.drift
        if drift is not None:
            if (subphase == 0 and is_synced is not None and is_synced(lst)
                    and drift.blocked(lst, n)):
                out.drift_blocked.append((lst, n))
                return
            if pkt.kind == Kind.PING:
                drift.resync(lst, n)
        out.decoded[lst] = (pkt,)


def resolve_slot(transmissions: list[tuple[int, Packet, int]], topo: Topology,
                 loss: Optional[dict] = None, drift: Optional[DriftModel] = None,
                 listeners: Iterable[int] = (), synced: Iterable[int] = ()) -> dict[int, list]:
    """Resolve a whole slot: ``transmissions`` are ``(sender, packet, sub_phase)``.

    Returns, per listener, the list of ``(sub_phase, packet)`` it decoded.
    """
    chan = Channel(topo, loss, drift)
    lst = set(listeners)
    sync = set(synced)
    result: dict[int, list] = {}
    for phase in sorted({p for _, _, p in transmissions}):
        txs = [(n, pkt) for n, pkt, p in transmissions if p == phase]
        for node, pkts in chan.resolve(txs, lst, phase, sync).decoded.items():
            result.setdefault(node, []).extend((phase, p) for p in pkts)
    return result
