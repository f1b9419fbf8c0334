"""Type definitions shared across the simulator.

Contains the network value types and the experiment pipeline State and
Context definitions, kept together to avoid circular imports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, List, NamedTuple

from typing_extensions import TypedDict

# Simulated time is an integer count of nanoseconds.
SimTime = int

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def seconds(value: float) -> SimTime:
    """Convert seconds to simulated nanoseconds."""
    return int(round(value * NS_PER_S))


def to_seconds(value: SimTime) -> float:
    """Convert simulated nanoseconds to seconds."""
    return value / NS_PER_S


class Layer(IntEnum):
    """Vertical layer of a node in a multi-rooted tree."""

    HOST = 0
    EDGE = 1
    AGGREGATE = 2
    CORE = 3


_PREFIX = {Layer.HOST: "h", Layer.EDGE: "e", Layer.AGGREGATE: "a", Layer.CORE: "c"}


class NodeId(NamedTuple):
    """Identity of a host or switch.

    ``indices`` is ``(pod, position)`` for edge and aggregate switches,
    ``(group, position)`` for cores and ``(pod, edge, position)`` for hosts.
    """

    layer: Layer
    indices: tuple[int, ...]

    @property
    def pod(self) -> int:
        """Pod index (hosts, edges, aggregates)."""
        if self.layer == Layer.CORE:
            raise AttributeError("core switches do not belong to a pod")
        return self.indices[0]

    @property
    def position(self) -> int:
        """Position inside the pod, core group or edge."""
        return self.indices[-1]

    @property
    def group(self) -> int:
        """Core group index."""
        if self.layer != Layer.CORE:
            raise AttributeError("only core switches have a group")
        return self.indices[0]

    @property
    def is_switch(self) -> bool:
        return self.layer != Layer.HOST

    @property
    def name(self) -> str:
        return _PREFIX[self.layer] + "_".join(str(i) for i in self.indices)

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> NodeId:
        """Parse a node name such as ``a1_0`` or ``h0_1_1``."""
        layers = {v: k for k, v in _PREFIX.items()}
        if not name or name[0] not in layers:
            raise ValueError(f"unknown node name: {name!r}")
        try:
            indices = tuple(int(part) for part in name[1:].split("_"))
        except ValueError as exc:
            raise ValueError(f"unknown node name: {name!r}") from exc
        return cls(layers[name[0]], indices)


def host(pod: int, edge: int, position: int) -> NodeId:
    return NodeId(Layer.HOST, (pod, edge, position))


def edge(pod: int, position: int) -> NodeId:
    return NodeId(Layer.EDGE, (pod, position))


def aggregate(pod: int, position: int) -> NodeId:
    return NodeId(Layer.AGGREGATE, (pod, position))


def core(group: int, position: int) -> NodeId:
    return NodeId(Layer.CORE, (group, position))


class LinkId(NamedTuple):
    """One direction of a physical cable."""

    src: NodeId
    dst: NodeId
    capacity_bps: int
    delay_ns: SimTime

    @property
    def name(self) -> str:
        return f"{self.src.name}->{self.dst.name}"

    def __str__(self) -> str:
        return self.name


class FlowKey(NamedTuple):
    """Identity of one TCP connection."""

    src_host: NodeId
    dst_host: NodeId
    flow_serial: int = 0

    @property
    def name(self) -> str:
        return f"{self.src_host.name}>{self.dst_host.name}#{self.flow_serial}"

    def __str__(self) -> str:
        return self.name


class PathSpec(NamedTuple):
    """Path recommendation carried by an EAR.

    An inter-pod path is named by its apex core or by its uphill aggregate.
    """

    core: NodeId | None = None
    uphill_aggregate: NodeId | None = None

    @property
    def target(self) -> NodeId:
        """The recommended next-hop switch."""
        node = self.core if self.core is not None else self.uphill_aggregate
        if node is None:
            raise ValueError("empty path recommendation")
        return node

    def __str__(self) -> str:
        if self.core is not None:
            return f"core={self.core.name}"
        return f"aggregate={self.target.name}"


class Context(TypedDict):
    """Context parameters for the experiment pipeline.

    Set these when invoking the graph.
    """

    out_dir: str | None
    write_outputs: bool


@dataclass
class State:
    """Input state for the experiment pipeline.

    Carries the configuration in, and the built fabric and results through
    the pipeline nodes.
    """

    # Input
    config: Any = None

    # Built by the pipeline
    fabric: Any = None
    flows_installed: int = 0
    finished_at_s: float | None = None

    # Results
    report: Any = None
    bounds_passed: bool | None = None
    violations: List[Dict[str, Any]] = field(default_factory=list)
    written_files: List[str] = field(default_factory=list)
