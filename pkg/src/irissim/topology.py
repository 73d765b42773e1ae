"""Pipeline deployments: generation and the plain-text topology file."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np


class TopologyError(ValueError):
    pass


class TopologyKind(str, Enum):
    LINEAR = "linear"
    RANDOM_PIPELINE = "random_pipeline"
    FILE = "file"


@dataclass(frozen=True)
class Topology:
    """Node positions (km of chainage) keyed by node id, plus the radio range."""
    positions: dict
    range_km: float = 20.0

    def __post_init__(self):
        if self.range_km <= 0:
            raise TopologyError("range_km must be > 0")

    @property
    def ids(self) -> list[int]:
        return sorted(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    def position(self, node: int) -> float:
        try:
            return self.positions[node]
        except KeyError:
            raise TopologyError(f"unknown node id {node}") from None

    @property
    def length_km(self) -> float:
        pos = self.positions.values()
        return max(pos) - min(pos)

    def with_range(self, range_km: float) -> "Topology":
        return Topology(dict(self.positions), range_km)

    def neighbours(self) -> dict[int, frozenset]:
        """In-range neighbour set of every node (excluding itself)."""
        ids = np.array(self.ids)
        pos = np.array([self.positions[i] for i in ids], dtype=float)
        order = np.argsort(pos, kind="stable")
        spos = pos[order]
        sids = ids[order]
        eps = 1e-9
        lo = np.searchsorted(spos, spos - self.range_km - eps, side="left")
        hi = np.searchsorted(spos, spos + self.range_km + eps, side="right")
        out = {}
        for k in range(len(sids)):
            me = int(sids[k])
            members = sids[lo[k]:hi[k]]
            near = [int(m) for m, p in zip(members, spos[lo[k]:hi[k]])
                    if m != me and abs(p - spos[k]) <= self.range_km + eps]
            out[me] = frozenset(near)
        return out


@dataclass(frozen=True)
class TopologySpec:
    kind: TopologyKind = TopologyKind.LINEAR
    n_nodes: int = 300
    spacing_km: float = 0.5
    p_short: float = 0.8
    short_gap: tuple[float, float] = (0.1, 2.0)
    long_gap: tuple[float, float] = (2.0, 5.0)
    range_km: float = 20.0
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        errors = spec_errors(self)
        if errors:
            raise TopologyError("; ".join(errors))


def spec_errors(spec: TopologySpec) -> list[str]:
    errors = []
    kind = TopologyKind(spec.kind)
    if kind is TopologyKind.FILE:
        if not spec.path:
            errors.append("file topology needs a path")
        return errors
    if spec.n_nodes < 3:
        errors.append("n_nodes must be >= 3")
    if spec.spacing_km <= 0:
        errors.append("spacing_km must be > 0")
    if not 0 <= spec.p_short <= 1:
        errors.append("p_short must lie in [0, 1]")
    for name in ("short_gap", "long_gap"):
        lo, hi = getattr(spec, name)
        if not 0 <= lo < hi:
            errors.append(f"{name} must be an interval 0 <= lo < hi")
        if lo == 0:
            errors.append(f"{name} lower bound must be positive")
    if spec.range_km <= 0:
        errors.append("range_km must be > 0")
    return errors


def _open_uniform(rng: random.Random, lo: float, hi: float) -> float:
    # draw from (lo, hi]
    return hi - rng.random() * (hi - lo)


def draw_gaps(spec: TopologySpec, rng: random.Random, count: int) -> list[float]:
    gaps = []
    for _ in range(count):
        if rng.random() < spec.p_short:
            gaps.append(_open_uniform(rng, *spec.short_gap))
        else:
            gaps.append(_open_uniform(rng, *spec.long_gap))
    return gaps


def generate(spec: TopologySpec, rng: Optional[random.Random] = None) -> Topology:
    """Build the deployment described by ``spec``.

    Node 0 is the originating base station at chainage 0, node n-1 the end
    base station.  ``rng`` defaults to a generator seeded from ``spec.seed``.
    """
    kind = TopologyKind(spec.kind)
    if kind is TopologyKind.FILE:
        return load(spec.path)
    if kind is TopologyKind.LINEAR:
        pos = {i: round(i * spec.spacing_km, 9) for i in range(spec.n_nodes)}
        return Topology(pos, spec.range_km)
    rng = rng or random.Random(spec.seed)
    gaps = draw_gaps(spec, rng, spec.n_nodes - 1)
    # positions are stored at metre precision so files round-trip exactly
    chain = np.concatenate([[0.0], np.cumsum(gaps)])
    return Topology({i: round(float(x), 3) for i, x in enumerate(chain)}, spec.range_km)


def save(topology: Topology, path) -> None:
    lines = [f"{topology.n} {topology.range_km:.3f}"]
    for node in topology.ids:
        lines.append(f"{node} {topology.positions[node]:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> Topology:
    text = Path(path).read_text().splitlines()
    rows = [(no, line.split()) for no, line in enumerate(text, start=1)
            if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise TopologyError(f"{path}: empty topology file")
    head_no, head = rows[0]
    try:
        n, range_km = int(head[0]), float(head[1])
    except (ValueError, IndexError):
        raise TopologyError(f"{path}:{head_no}: header must be '<n> <range_km>'") from None
    positions: dict[int, float] = {}
    for no, parts in rows[1:]:
        try:
            node, km = int(parts[0]), float(parts[1])
        except (ValueError, IndexError):
            raise TopologyError(f"{path}:{no}: expected '<id> <position_km>'") from None
        if len(parts) != 2:
            raise TopologyError(f"{path}:{no}: expected two fields, got {len(parts)}")
        if node < 0:
            raise TopologyError(f"{path}:{no}: negative node id {node}")
        if node in positions:
            raise TopologyError(f"{path}:{no}: duplicate node id {node}")
        positions[node] = km
    if len(positions) != n:
        raise TopologyError(f"{path}: header announces {n} nodes, found {len(positions)}")
    return Topology(positions, range_km)


def expected_length(spec: TopologySpec) -> float:
    """Mean pipeline length of a random deployment."""
    if TopologyKind(spec.kind) is TopologyKind.LINEAR:
        return (spec.n_nodes - 1) * spec.spacing_km
    short = sum(spec.short_gap) / 2
    long_ = sum(spec.long_gap) / 2
    return (spec.n_nodes - 1) * (spec.p_short * short + (1 - spec.p_short) * long_)
