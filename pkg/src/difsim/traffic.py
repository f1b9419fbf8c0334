"""Benchmark traffic patterns and the all-to-all shuffle workload."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from difsim.topology import Topology
from difsim.types import FlowKey, NodeId, SimTime

PatternKind = Literal["stride", "staggered", "random", "randx", "randbij", "shuffle"]

DEFAULT_SHUFFLE_BYTES = 5 * 1000 * 1000
_UNITS = {"B": 1, "KB": 1000, "MB": 1000**2, "GB": 1000**3}
_SIZE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?B)?\s*$", re.IGNORECASE)
_MAX_DERANGEMENT_TRIES = 10_000


class PatternError(ValueError):
    """Invalid traffic pattern parameters."""


class FlowSpec(NamedTuple):
    key: FlowKey
    bytes_total: int | None
    start: SimTime


@dataclass(frozen=True)
class TrafficPattern:
    """One benchmark pattern with its parameters."""

    kind: PatternKind
    stride: int = 1
    p_edge: float = 0.0
    p_pod: float = 0.0
    flows_per_host: int = 1
    bytes_per_transfer: int = DEFAULT_SHUFFLE_BYTES

    def __post_init__(self) -> None:
        if self.kind == "stride" and self.stride < 1:
            raise PatternError(f"stride must be >= 1, got {self.stride}")
        if self.kind == "staggered":
            if self.p_edge < 0 or self.p_pod < 0 or self.p_edge + self.p_pod > 1:
                raise PatternError(
                    f"staggered needs Pe, Pp >= 0 and Pe + Pp <= 1, got {self.p_edge}, {self.p_pod}"
                )
        if self.kind in ("random", "randx") and self.flows_per_host < 1:
            raise PatternError(f"randx needs x >= 1, got {self.flows_per_host}")
        if self.kind == "shuffle" and self.bytes_per_transfer < 0:
            raise PatternError("shuffle transfer size must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == "stride":
            return f"stride:{self.stride}"
        if self.kind == "staggered":
            return f"stag:{self.p_edge:g}:{self.p_pod:g}"
        if self.kind == "randx":
            return f"randx:{self.flows_per_host}"
        if self.kind == "shuffle":
            return f"shuffle:{self.bytes_per_transfer}B"
        return self.kind


def parse_size(text: str) -> int:
    """Parse ``5MB``, ``500KB``, ``1.5GB`` or a bare byte count."""
    match = _SIZE.match(text)
    if not match:
        raise PatternError(f"bad size {text!r}")
    number, unit = match.groups()
    return int(float(number) * _UNITS[(unit or "B").upper()])


def parse_pattern(spec: str) -> TrafficPattern:
    """Parse a pattern string such as ``stride:4``, ``stag:0.5:0.3`` or ``shuffle:5MB``."""
    parts = spec.strip().split(":")
    name = parts[0].lower()
    args = parts[1:]
    try:
        if name == "stride" and len(args) == 1:
            return TrafficPattern("stride", stride=int(args[0]))
        if name in ("stag", "staggered") and len(args) == 2:
            return TrafficPattern("staggered", p_edge=float(args[0]), p_pod=float(args[1]))
        if name == "random" and not args:
            return TrafficPattern("random")
        if name == "randx" and len(args) == 1:
            return TrafficPattern("randx", flows_per_host=int(args[0]))
        if name == "randbij" and not args:
            return TrafficPattern("randbij")
        if name == "shuffle" and len(args) <= 1:
            size = parse_size(args[0]) if args else DEFAULT_SHUFFLE_BYTES
            return TrafficPattern("shuffle", bytes_per_transfer=size)
    except ValueError as exc:
        if isinstance(exc, PatternError):
            raise
        raise PatternError(f"bad pattern {spec!r}: {exc}") from exc
    raise PatternError(f"unknown pattern {spec!r}")


def _other(rng: np.random.Generator, pool: Sequence[NodeId], exclude: NodeId) -> NodeId:
    choices = [h for h in pool if h != exclude]
    return choices[int(rng.integers(len(choices)))]


def _keys(pairs: Sequence[tuple[NodeId, NodeId]]) -> List[FlowKey]:
    serial: Dict[tuple[NodeId, NodeId], int] = defaultdict(int)
    keys = []
    for src, dst in pairs:
        keys.append(FlowKey(src, dst, serial[(src, dst)]))
        serial[(src, dst)] += 1
    return keys


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` without fixed points."""
    if n < 2:
        raise PatternError("a derangement needs at least 2 elements")
    for _ in range(_MAX_DERANGEMENT_TRIES):
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
    raise PatternError("could not draw a derangement")


def staggered_destination(
    topology: Topology, src: NodeId, p_edge: float, p_pod: float, rng: np.random.Generator
) -> NodeId:
    """Draw one staggered destination for ``src``."""
    pod, edge_pos, _ = src.indices
    same_edge = [h for h in topology.hosts if h.indices[:2] == (pod, edge_pos) and h != src]
    same_pod = [h for h in topology.hosts if h.indices[0] == pod and h.indices[1] != edge_pos]
    remote = [h for h in topology.hosts if h.indices[0] != pod]
    u = rng.random()
    if u < p_edge:
        pool = same_edge
    elif u < p_edge + p_pod:
        pool = same_pod
    else:
        pool = remote
    return pool[int(rng.integers(len(pool)))]


def generate(
    pattern: TrafficPattern, topology: Topology, rng: np.random.Generator
) -> List[FlowSpec]:
    """Flows a pattern starts at time zero.

    Static patterns yield permanent flows. Shuffle yields only each
    receiver's first transfer; use :func:`workload` to keep the job that
    hands out the rest.
    """
    return workload(pattern, topology, rng)[0]


def workload(
    pattern: TrafficPattern, topology: Topology, rng: np.random.Generator
) -> Tuple[List[FlowSpec], Optional[ShuffleJob]]:
    """Initial flows of ``pattern`` plus the shuffle job driving later transfers."""
    hosts = list(topology.hosts)
    n = len(hosts)
    pairs: List[tuple[NodeId, NodeId]] = []
    if pattern.kind == "stride":
        if not 1 <= pattern.stride < n:
            raise PatternError(f"stride must be in [1, {n}), got {pattern.stride}")
        pairs = [(hosts[i], hosts[(i + pattern.stride) % n]) for i in range(n)]
    elif pattern.kind == "staggered":
        pairs = [
            (h, staggered_destination(topology, h, pattern.p_edge, pattern.p_pod, rng))
            for h in hosts
        ]
    elif pattern.kind in ("random", "randx"):
        x = 1 if pattern.kind == "random" else pattern.flows_per_host
        pairs = [(h, _other(rng, hosts, h)) for h in hosts for _ in range(x)]
    elif pattern.kind == "randbij":
        perm = derangement(n, rng)
        pairs = [(hosts[i], hosts[int(perm[i])]) for i in range(n)]
    elif pattern.kind == "shuffle":
        job = ShuffleJob(hosts, pattern.bytes_per_transfer, rng)
        return job.initial_transfers(), job
    return [FlowSpec(key, None, 0) for key in _keys(pairs)], None


@dataclass
class ShuffleJob:
    """All-to-all transfer where each host receives from its peers one at a time."""

    hosts: List[NodeId]
    bytes_per_transfer: int
    rng: np.random.Generator
    orders: Dict[NodeId, List[NodeId]] = field(init=False)
    progress: Dict[NodeId, int] = field(init=False)
    completed_at: Dict[NodeId, SimTime] = field(init=False)

    def __post_init__(self) -> None:
        self.orders = {}
        for receiver in self.hosts:
            senders = [h for h in self.hosts if h != receiver]
            perm = self.rng.permutation(len(senders))
            self.orders[receiver] = [senders[int(i)] for i in perm]
        self.progress = {h: 0 for h in self.hosts}
        self.completed_at = {}

    @property
    def total_transfers(self) -> int:
        return sum(len(order) for order in self.orders.values())

    @property
    def total_bytes(self) -> int:
        return self.total_transfers * self.bytes_per_transfer

    def initial_transfers(self) -> List[FlowSpec]:
        specs = []
        for receiver in self.hosts:
            key = self.next_shuffle_transfer(receiver, 0)
            if key is not None:
                specs.append(FlowSpec(key, self.bytes_per_transfer, 0))
        return specs

    def next_shuffle_transfer(self, receiver: NodeId, now: SimTime) -> Optional[FlowKey]:
        """Key of the receiver's next transfer, or None once it has heard from everyone."""
        order = self.orders[receiver]
        step = self.progress[receiver]
        if step >= len(order):
            self.completed_at.setdefault(receiver, now)
            return None
        self.progress[receiver] = step + 1
        return FlowKey(order[step], receiver, 0)

    @property
    def finished(self) -> bool:
        return len(self.completed_at) == len(self.hosts)
