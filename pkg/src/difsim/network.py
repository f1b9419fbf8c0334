"""Packets, drop-tail link queues, failure state and control-message delivery."""

from __future__ import annotations

import math
from collections import deque
from enum import IntFlag
from typing import Any, Callable, Deque, Dict, Iterable, List, Protocol, Set, Tuple

from loguru import logger

from difsim.engine import Simulator
from difsim.topology import Topology
from difsim.types import NS_PER_S, FlowKey, LinkId, NodeId, SimTime

MSS = 1460
HEADER_LEN = 40
MTU = MSS + HEADER_LEN
DEFAULT_PACKETS_MIN = 64


class PacketFlag(IntFlag):
    NONE = 0
    SYN = 1
    ACK = 2
    FIN = 4
    ELEPHANT_MARK = 8
    PAR_IMPLICIT = 16
    RETRANSMIT = 32


class Packet:
    """A TCP segment in flight.

    ``forward`` is true for packets travelling from the flow's source to its
    destination (SYN and data) and false for SYN-ACKs and pure ACKs.
    """

    __slots__ = (
        "flow",
        "seq",
        "payload_len",
        "flags",
        "ack_seq",
        "enq_time",
        "header_len",
        "forward",
        "tag",
        "sent_at",
        "tx_index",
    )

    def __init__(
        self,
        flow: FlowKey,
        seq: int = 0,
        payload_len: int = 0,
        flags: PacketFlag = PacketFlag.NONE,
        ack_seq: int = 0,
        forward: bool = True,
        tag: int = 0,
        header_len: int = HEADER_LEN,
    ):
        if payload_len > MSS:
            raise ValueError(f"payload {payload_len} exceeds MSS {MSS}")
        self.flow = flow
        self.seq = seq
        self.payload_len = payload_len
        self.flags = flags
        self.ack_seq = ack_seq
        self.enq_time: SimTime = 0
        self.header_len = header_len
        self.forward = forward
        self.tag = tag
        self.sent_at: SimTime = 0
        self.tx_index = 0

    @property
    def size(self) -> int:
        return self.payload_len + self.header_len

    @property
    def src(self) -> NodeId:
        return self.flow.src_host if self.forward else self.flow.dst_host

    @property
    def dst(self) -> NodeId:
        return self.flow.dst_host if self.forward else self.flow.src_host

    @property
    def is_data(self) -> bool:
        return self.forward and self.payload_len > 0

    def __repr__(self) -> str:
        return (
            f"Packet({self.flow}, seq={self.seq}, len={self.payload_len}, "
            f"flags={self.flags!r}, ack={self.ack_seq}, fwd={self.forward})"
        )


def delay_bandwidth_capacity(
    link: LinkId, packets_min: int = DEFAULT_PACKETS_MIN, packet_size: int = MTU
) -> int:
    """Queue capacity in bytes: the delay-bandwidth product, floored at ``packets_min`` packets."""
    raw = math.ceil(link.capacity_bps * link.delay_ns / (8 * NS_PER_S))
    return max(raw, packets_min * packet_size)


def serialization_ns(size_bytes: int, capacity_bps: int) -> SimTime:
    return -(-size_bytes * 8 * NS_PER_S // capacity_bps)


class LinkQueue:
    """Drop-tail FIFO in front of one directed link.

    Departures are drained lazily: a packet's bytes stay in ``occupancy``
    until its serialization ends.
    """

    __slots__ = (
        "link",
        "capacity_bytes",
        "occupancy",
        "busy_until",
        "_departures",
        "enqueued_packets",
        "enqueued_bytes",
        "dropped_packets",
        "dropped_bytes",
        "delivered_bytes",
        "busy_ns",
    )

    def __init__(self, link: LinkId, capacity_bytes: int):
        self.link = link
        self.capacity_bytes = capacity_bytes
        self.occupancy = 0
        self.busy_until: SimTime = 0
        self._departures: Deque[Tuple[SimTime, int]] = deque()
        self.enqueued_packets = 0
        self.enqueued_bytes = 0
        self.dropped_packets = 0
        self.dropped_bytes = 0
        self.delivered_bytes = 0
        self.busy_ns = 0

    def _drain(self, now: SimTime) -> None:
        departures = self._departures
        while departures and departures[0][0] <= now:
            self.occupancy -= departures.popleft()[1]

    def enqueue(self, packet: Packet, now: SimTime) -> SimTime | None:
        """Admit ``packet`` or drop it.

        Returns:
            The arrival time at the far end, or None if the packet was dropped.
        """
        self._drain(now)
        size = packet.size
        self.enqueued_packets += 1
        self.enqueued_bytes += size
        if self.occupancy + size > self.capacity_bytes:
            self.dropped_packets += 1
            self.dropped_bytes += size
            return None
        ser = serialization_ns(size, self.link.capacity_bps)
        start = now if now > self.busy_until else self.busy_until
        depart = start + ser
        self.busy_until = depart
        self.busy_ns += ser
        self.occupancy += size
        self._departures.append((depart, size))
        packet.enq_time = now
        return depart + self.link.delay_ns

    def lose(self, size: int) -> None:
        """Account an admitted packet that never reached the far end."""
        self.dropped_packets += 1
        self.dropped_bytes += size

    @property
    def in_flight_bytes(self) -> int:
        return self.enqueued_bytes - self.delivered_bytes - self.dropped_bytes

    def utilization(self, elapsed: SimTime) -> float:
        if elapsed <= 0:
            return 0.0
        return min(self.busy_ns, elapsed) / elapsed


class PacketSink(Protocol):
    """Anything attached to the network that accepts packets."""

    def receive(self, packet: Packet, link: LinkId) -> None: ...


class Network:
    """Owns every link queue of a topology and delivers packets between nodes.

    Also tracks failed links and nodes, and answers which next hops are still
    usable toward a destination host.
    """

    def __init__(self, sim: Simulator, topology: Topology, packets_min: int = DEFAULT_PACKETS_MIN):
        self.sim = sim
        self.topology = topology
        self.packets_min = packets_min
        self.queues: Dict[LinkId, LinkQueue] = {
            link: LinkQueue(link, delay_bandwidth_capacity(link, packets_min))
            for link in topology.links
        }
        self.sinks: Dict[NodeId, PacketSink] = {}
        self.down_links: Set[LinkId] = set()
        self.down_nodes: Set[NodeId] = set()
        self.failure_epoch = 0
        self.failure_listeners: List[Callable[[List[LinkId]], None]] = []
        self._reach: Dict[Tuple[NodeId, NodeId], bool] = {}
        self.control_messages = 0
        self.control_bytes = 0

    def attach(self, node: NodeId, sink: PacketSink) -> None:
        self.topology.check(node)
        self.sinks[node] = sink

    # ------------------------------------------------------------------
    # Data plane
    # ------------------------------------------------------------------
    def transmit(self, link: LinkId, packet: Packet) -> bool:
        """Hand ``packet`` to the queue of ``link``; returns whether it was admitted."""
        queue = self.queues[link]
        arrival = queue.enqueue(packet, self.sim.now)
        if arrival is None:
            return False
        self.sim.schedule(arrival, self._arrive, link, packet)
        return True

    def _arrive(self, link: LinkId, packet: Packet) -> None:
        queue = self.queues[link]
        if self.down_links and (link in self.down_links or link.dst in self.down_nodes):
            queue.lose(packet.size)
            return
        queue.delivered_bytes += packet.size
        self.sinks[link.dst].receive(packet, link)

    # ------------------------------------------------------------------
    # Control plane
    # ------------------------------------------------------------------
    def send_control(
        self, link: LinkId, deliver: Callable[..., Any], message: Any, size_bytes: int
    ) -> None:
        """Deliver a control message to ``link.dst`` after one link delay.

        Control messages bypass the data queues and are never dropped.
        """
        self.control_messages += 1
        self.control_bytes += size_bytes
        self.sim.schedule_in(link.delay_ns, deliver, message, link)

    # ------------------------------------------------------------------
    # Failures and reachability
    # ------------------------------------------------------------------
    def link_up(self, link: LinkId) -> bool:
        if not self.down_links:
            return True
        return link not in self.down_links and link.dst not in self.down_nodes

    def node_up(self, node: NodeId) -> bool:
        return node not in self.down_nodes

    def reachable(self, node: NodeId, dst: NodeId) -> bool:
        """Whether ``dst`` can still be reached from ``node`` over live links."""
        if not self.down_links:
            return True
        if node in self.down_nodes:
            return False
        if node == dst:
            return True
        key = (node, dst)
        cached = self._reach.get(key)
        if cached is None:
            cached = any(
                self.link_up(l) and self.reachable(l.dst, dst)
                for l in self.topology.next_hops(node, dst)
            )
            self._reach[key] = cached
        return cached

    def usable_next_hops(self, node: NodeId, dst: NodeId) -> Tuple[LinkId, ...]:
        """Structural next hops from ``node`` that are up and still lead to ``dst``."""
        hops = self.topology.next_hops(node, dst)
        if not self.down_links:
            return hops
        return tuple(l for l in hops if self.link_up(l) and self.reachable(l.dst, dst))

    def fail_link(self, a: NodeId, b: NodeId) -> List[LinkId]:
        """Fail the cable between ``a`` and ``b`` (both directions)."""
        links = [self.topology.link(a, b), self.topology.link(b, a)]
        self._fail(links)
        return links

    def fail_node(self, node: NodeId) -> List[LinkId]:
        """Crash ``node``; every link touching it goes down."""
        self.topology.check(node)
        self.down_nodes.add(node)
        links = list(self.topology.out_links(node)) + list(self.topology.in_links(node))
        self._fail(links)
        return links

    def restore_link(self, a: NodeId, b: NodeId) -> None:
        for link in (self.topology.link(a, b), self.topology.link(b, a)):
            self.down_links.discard(link)
        self.failure_epoch += 1
        self._reach.clear()

    def _fail(self, links: Iterable[LinkId]) -> None:
        failed = [l for l in links if l not in self.down_links]
        self.down_links.update(failed)
        self.failure_epoch += 1
        self._reach.clear()
        logger.info(
            "t={}ns: {} link(s) down, epoch {}", self.sim.now, len(failed), self.failure_epoch
        )
        for listener in self.failure_listeners:
            listener(failed)

    # ------------------------------------------------------------------
    # Accounting
    # ------------------------------------------------------------------
    def totals(self) -> Dict[str, int]:
        """Byte conservation totals over all queues."""
        enq = sum(q.enqueued_bytes for q in self.queues.values())
        dlv = sum(q.delivered_bytes for q in self.queues.values())
        drp = sum(q.dropped_bytes for q in self.queues.values())
        return {
            "enqueued_bytes": enq,
            "delivered_bytes": dlv,
            "dropped_bytes": drp,
            "in_flight_bytes": enq - dlv - drp,
        }

    def link_rows(self, elapsed: SimTime) -> List[Dict[str, Any]]:
        return [
            {
                "link": q.link.name,
                "enqueued_packets": q.enqueued_packets,
                "dropped_packets": q.dropped_packets,
                "dropped_bytes": q.dropped_bytes,
                "delivered_bytes": q.delivered_bytes,
                "utilization": round(q.utilization(elapsed), 6),
            }
            for q in self.queues.values()
        ]
