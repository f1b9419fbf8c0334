"""Fat-tree construction and structural queries.

Wiring convention: aggregate at pod position ``j`` connects to every core of
group ``j``; core ``(j, i)`` sits on port ``i`` of each such aggregate.
"""

from __future__ import annotations

import json
from typing import Dict, Iterable, List, Protocol, Sequence, Tuple

import networkx as nx

from difsim.types import (
    NS_PER_US,
    Layer,
    LinkId,
    NodeId,
    PathSpec,
    SimTime,
    aggregate,
    core,
    edge,
    host,
)

DEFAULT_CAPACITY_BPS = 1_000_000_000
DEFAULT_DELAY_NS = 10 * NS_PER_US


class TopologyError(ValueError):
    """Invalid topology parameters or structural query."""


class MultiRootedTree(Protocol):
    """Structural queries the scheduler relies on."""

    k: int
    hosts: Sequence[NodeId]

    def next_hops(self, node: NodeId, dst: NodeId) -> Tuple[LinkId, ...]: ...

    def equal_cost_paths(self, src: NodeId, dst: NodeId) -> List[List[LinkId]]: ...

    def mirror_uplink(
        self, downhill_switch: NodeId, underutilized_incoming_link: LinkId, flow_source_pod: int
    ) -> PathSpec: ...


class Topology:
    """Immutable k-pod fat-tree.

    Build instances with :func:`build_fat_tree`.
    """

    def __init__(
        self,
        k: int,
        hosts: List[NodeId],
        edges: List[NodeId],
        aggregates: List[NodeId],
        cores: List[NodeId],
        links: List[LinkId],
    ):
        self.k = k
        self.half = k // 2
        self.hosts: Tuple[NodeId, ...] = tuple(hosts)
        self.edges: Tuple[NodeId, ...] = tuple(edges)
        self.aggregates: Tuple[NodeId, ...] = tuple(aggregates)
        self.cores: Tuple[NodeId, ...] = tuple(cores)
        self.links: Tuple[LinkId, ...] = tuple(links)
        self.nodes: Tuple[NodeId, ...] = self.hosts + self.edges + self.aggregates + self.cores

        self._node_set = frozenset(self.nodes)
        self._link: Dict[Tuple[NodeId, NodeId], LinkId] = {}
        self._out: Dict[NodeId, List[LinkId]] = {n: [] for n in self.nodes}
        self._in: Dict[NodeId, List[LinkId]] = {n: [] for n in self.nodes}
        for link in self.links:
            if link.capacity_bps <= 0 or link.delay_ns <= 0:
                raise TopologyError(f"link {link.name} needs positive capacity and delay")
            self._link[(link.src, link.dst)] = link
            self._out[link.src].append(link)
            self._in[link.dst].append(link)
        self._uplinks: Dict[NodeId, Tuple[LinkId, ...]] = {
            n: tuple(l for l in self._out[n] if l.dst.layer > n.layer) for n in self.nodes
        }
        self._path_cache: Dict[Tuple[NodeId, NodeId], List[List[LinkId]]] = {}
        self._segment_cache: Dict[Tuple[NodeId, NodeId], Dict[NodeId, Tuple[set, set]]] = {}

    # ------------------------------------------------------------------
    # Lookups
    # ------------------------------------------------------------------
    def __contains__(self, node: object) -> bool:
        return node in self._node_set

    def check(self, *nodes: NodeId) -> None:
        """Raise :class:`TopologyError` for nodes outside this topology."""
        for node in nodes:
            if node not in self._node_set:
                raise TopologyError(f"unknown node {node!r}")

    def link(self, src: NodeId, dst: NodeId) -> LinkId:
        try:
            return self._link[(src, dst)]
        except KeyError:
            raise TopologyError(f"no link {src}->{dst}") from None

    def has_link(self, src: NodeId, dst: NodeId) -> bool:
        return (src, dst) in self._link

    def reverse(self, link: LinkId) -> LinkId:
        return self._link[(link.dst, link.src)]

    def out_links(self, node: NodeId) -> List[LinkId]:
        return self._out[node]

    def in_links(self, node: NodeId) -> List[LinkId]:
        return self._in[node]

    def uplinks(self, node: NodeId) -> Tuple[LinkId, ...]:
        return self._uplinks[node]

    def hosts_under(self, switch: NodeId) -> List[NodeId]:
        """Hosts in the subtree below ``switch``."""
        return [h for h in self.hosts if self.is_below(h, switch)]

    @staticmethod
    def is_below(host_node: NodeId, switch: NodeId) -> bool:
        """Whether ``host_node`` sits in the subtree of ``switch``."""
        if switch.layer == Layer.CORE:
            return True
        if switch.layer == Layer.AGGREGATE:
            return host_node.indices[0] == switch.indices[0]
        if switch.layer == Layer.EDGE:
            return host_node.indices[:2] == switch.indices
        return host_node == switch

    # ------------------------------------------------------------------
    # Routing structure
    # ------------------------------------------------------------------
    def next_hops(self, node: NodeId, dst: NodeId) -> Tuple[LinkId, ...]:
        """Outgoing links of ``node`` that lie on a shortest path to ``dst``."""
        layer = node.layer
        if layer == Layer.HOST:
            return () if node == dst else self._uplinks[node]
        if layer == Layer.EDGE:
            if dst.indices[:2] == node.indices:
                return (self._link[(node, dst)],)
            return self._uplinks[node]
        if layer == Layer.AGGREGATE:
            pod = node.indices[0]
            if dst.indices[0] == pod:
                return (self._link[(node, edge(pod, dst.indices[1]))],)
            return self._uplinks[node]
        return (self._link[(node, aggregate(dst.indices[0], node.indices[0]))],)

    def equal_cost_paths(self, src: NodeId, dst: NodeId) -> List[List[LinkId]]:
        """All shortest host-to-host paths as link sequences."""
        self.check(src, dst)
        if src.layer != Layer.HOST or dst.layer != Layer.HOST:
            raise TopologyError("equal-cost paths are defined between hosts")
        if src == dst:
            raise TopologyError("source and destination must differ")
        cached = self._path_cache.get((src, dst))
        if cached is not None:
            return cached
        paths: List[List[LinkId]] = []
        stack: List[Tuple[NodeId, List[LinkId]]] = [(src, [])]
        while stack:
            node, prefix = stack.pop()
            if node == dst:
                paths.append(prefix)
                continue
            for link in reversed(self.next_hops(node, dst)):
                stack.append((link.dst, prefix + [link]))
        self._path_cache[(src, dst)] = paths
        return paths

    def _segments(self, src: NodeId, dst: NodeId) -> Dict[NodeId, Tuple[set, set]]:
        seg = self._segment_cache.get((src, dst))
        if seg is None:
            seg = {}
            for path in self.equal_cost_paths(src, dst):
                for link in path:
                    seg.setdefault(link.src, (set(), set()))[1].add(link)
                    seg.setdefault(link.dst, (set(), set()))[0].add(link)
            self._segment_cache[(src, dst)] = seg
        return seg

    def feasible_in_links(self, node: NodeId, src: NodeId, dst: NodeId) -> List[LinkId]:
        """Incoming links of ``node`` used by some equal-cost path."""
        found = self._segments(src, dst).get(node)
        return sorted(found[0]) if found else []

    def feasible_out_links(self, node: NodeId, src: NodeId, dst: NodeId) -> List[LinkId]:
        """Outgoing links of ``node`` used by some equal-cost path."""
        found = self._segments(src, dst).get(node)
        return sorted(found[1]) if found else []

    def mirror_uplink(
        self, downhill_switch: NodeId, underutilized_incoming_link: LinkId, flow_source_pod: int
    ) -> PathSpec:
        """Recommendation that makes a flow arrive on the given incoming link.

        Args:
            downhill_switch: Aggregate or edge switch on the flow's downhill segment.
            underutilized_incoming_link: The incoming link the flow should move to.
            flow_source_pod: Pod of the flow's source host.
        """
        link = underutilized_incoming_link
        if link.dst != downhill_switch or link not in self._in.get(downhill_switch, ()):
            raise TopologyError(f"{link.name} is not an incoming link of {downhill_switch}")
        if downhill_switch.layer == Layer.AGGREGATE and link.src.layer == Layer.CORE:
            return PathSpec(core=link.src)
        if downhill_switch.layer == Layer.EDGE and link.src.layer == Layer.AGGREGATE:
            return PathSpec(uphill_aggregate=aggregate(flow_source_pod, link.src.position))
        raise TopologyError(f"{link.name} does not come from the layer above {downhill_switch}")

    # ------------------------------------------------------------------
    # Export
    # ------------------------------------------------------------------
    def to_networkx(self) -> nx.DiGraph:
        """Directed graph keyed by node names."""
        graph = nx.DiGraph(k=self.k)
        for node in self.nodes:
            graph.add_node(node.name, layer=node.layer.name.lower(), indices=list(node.indices))
        for link in self.links:
            graph.add_edge(
                link.src.name, link.dst.name, capacity_bps=link.capacity_bps, delay_ns=link.delay_ns
            )
        return graph

    def to_json(self, indent: int | None = 2) -> str:
        """Dump nodes and links as a node-link JSON document."""
        data = nx.node_link_data(self.to_networkx(), edges="links")
        return json.dumps(data, indent=indent, sort_keys=True)

    def __repr__(self) -> str:
        return (
            f"Topology(k={self.k}, hosts={len(self.hosts)}, edges={len(self.edges)}, "
            f"aggregates={len(self.aggregates)}, cores={len(self.cores)})"
        )


def build_fat_tree(
    k: int,
    capacity_bps: int = DEFAULT_CAPACITY_BPS,
    delay_ns: SimTime = DEFAULT_DELAY_NS,
) -> Topology:
    """Build a k-pod fat-tree with uniform links.

    Args:
        k: Switch port count; even and at least 4.
        capacity_bps: Bandwidth of every link.
        delay_ns: Propagation delay of every link.

    Returns:
        The wired topology.
    """
    if not isinstance(k, int) or k < 4 or k % 2:
        raise TopologyError(f"k must be an even integer >= 4, got {k!r}")
    if capacity_bps <= 0 or delay_ns <= 0:
        raise TopologyError("link capacity and delay must be positive")
    half = k // 2
    hosts = [host(p, e, h) for p in range(k) for e in range(half) for h in range(half)]
    edges = [edge(p, e) for p in range(k) for e in range(half)]
    aggs = [aggregate(p, a) for p in range(k) for a in range(half)]
    cores = [core(g, i) for g in range(half) for i in range(half)]

    links: List[LinkId] = []

    def cable(a: NodeId, b: NodeId) -> None:
        links.append(LinkId(a, b, capacity_bps, delay_ns))
        links.append(LinkId(b, a, capacity_bps, delay_ns))

    for p in range(k):
        for e in range(half):
            for h in range(half):
                cable(host(p, e, h), edge(p, e))
            for a in range(half):
                cable(edge(p, e), aggregate(p, a))
        for a in range(half):
            for i in range(half):
                cable(aggregate(p, a), core(a, i))
    return Topology(k, hosts, edges, aggs, cores, links)


def trace_path(topology: Topology, src: NodeId, choose: Iterable[LinkId]) -> List[NodeId]:
    """Nodes visited when following ``choose`` link by link from ``src``."""
    nodes = [src]
    for link in choose:
        if link.src != nodes[-1]:
            raise TopologyError(f"{link.name} does not continue from {nodes[-1]}")
        topology.link(link.src, link.dst)
        nodes.append(link.dst)
    return nodes
