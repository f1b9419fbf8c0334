"""Per-switch data plane.

Forwarding, elephant detection at source edges, the elephant flow table and
the two port state vectors. Path choice for unseen elephants is delegated to
an attached allocator (the DiFS agent); without one every packet is hashed.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence

from difsim.network import Network, Packet, PacketFlag
from difsim.topology import Topology
from difsim.types import NS_PER_MS, FlowKey, Layer, LinkId, NodeId, SimTime

if TYPE_CHECKING:
    from difsim.difs import DifsAgent

DEFAULT_ELEPHANT_THRESHOLD = 100_000
RATE_WINDOW = 100 * NS_PER_MS
RATE_ALPHA = 0.5

_MASK = 0xFFFF_FFFF_FFFF_FFFF


class FlowClass(str, Enum):
    SISO = "SISO"
    SIMO = "SIMO"
    MISO = "MISO"


def mix64(value: int) -> int:
    """Splitmix64 finalizer."""
    value = (value + 0x9E3779B97F4A7C15) & _MASK
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _MASK
    return value ^ (value >> 31)


def flow_hash(key: FlowKey, salt: int, forward: bool = True) -> int:
    """64-bit hash of a flow identifier under ``salt``."""
    h = salt & _MASK
    for part in (*key.src_host.indices, *key.dst_host.indices, key.flow_serial, int(forward)):
        h = mix64(h ^ part)
    return h


@dataclass(slots=True)
class FlowTableEntry:
    """State kept for one elephant flow at one switch."""

    key: FlowKey
    L_i: LinkId
    L_o: LinkId
    t: SimTime
    installed_at: SimTime
    bytes_seen: int = 0
    measured_rate: float = 0.0
    window_start: SimTime = 0
    window_bytes: int = 0
    rate_samples: int = 0

    def observe(self, size: int, now: SimTime) -> None:
        self.t = now
        self.bytes_seen += size
        self.window_bytes += size
        elapsed = now - self.window_start
        if elapsed >= RATE_WINDOW:
            inst = self.window_bytes * 8e9 / elapsed
            if self.rate_samples == 0:
                self.measured_rate = inst
            else:
                self.measured_rate = RATE_ALPHA * inst + (1 - RATE_ALPHA) * self.measured_rate
            self.rate_samples += 1
            self.window_start = now
            self.window_bytes = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "flow": self.key.name,
            "L_i": self.L_i.name,
            "L_o": self.L_o.name,
            "t": self.t,
            "installed_at": self.installed_at,
            "bytes_seen": self.bytes_seen,
            "measured_rate": round(self.measured_rate, 3),
        }


class PortStateVector:
    """Elephant-flow count per link."""

    def __init__(self, links: Iterable[LinkId]):
        self.counts: Dict[LinkId, int] = {link: 0 for link in links}

    def __getitem__(self, link: LinkId) -> int:
        return self.counts[link]

    def add(self, link: LinkId, amount: int = 1) -> None:
        self.counts[link] += amount

    def total(self) -> int:
        return sum(self.counts.values())

    @staticmethod
    def recount(entries: Iterable[FlowTableEntry], attr: str) -> Counter:
        """Brute-force count of entries per link for ``attr`` (``L_i`` or ``L_o``)."""
        return Counter(getattr(e, attr) for e in entries)

    @staticmethod
    def rate_sums(entries: Iterable[FlowTableEntry], attr: str) -> Dict[LinkId, float]:
        sums: Dict[LinkId, float] = {}
        for e in entries:
            link = getattr(e, attr)
            sums[link] = sums.get(link, 0.0) + e.measured_rate
        return sums

    def matches(self, entries: Iterable[FlowTableEntry], attr: str) -> bool:
        expected = self.recount(entries, attr)
        return all(self.counts[l] == expected.get(l, 0) for l in self.counts) and set(
            expected
        ) <= set(self.counts)

    def to_dict(self) -> Dict[str, int]:
        return {link.name: n for link, n in self.counts.items()}


@dataclass
class SwitchCounters:
    ecmp_packets: int = 0
    elephant_packets: int = 0
    implicit_pars: int = 0
    unroutable_drops: int = 0
    expirations: int = 0
    reallocations: int = 0


@dataclass
class FabricSettings:
    """Data-plane knobs shared by every switch of a run."""

    elephant_threshold: int = DEFAULT_ELEPHANT_THRESHOLD
    measured_rate: bool = False
    salt: int = 0


class Switch:
    """One edge, aggregate or core switch."""

    def __init__(
        self,
        node: NodeId,
        topology: Topology,
        network: Network,
        settings: FabricSettings | None = None,
    ):
        if node.layer == Layer.HOST:
            raise ValueError(f"{node} is a host")
        self.node = node
        self.topology = topology
        self.network = network
        self.sim = network.sim
        self.settings = settings or FabricSettings()
        self.salt = mix64(self.settings.salt ^ zlib.crc32(node.name.encode()))
        self.agent: Optional[DifsAgent] = None
        self.flow_table: Dict[FlowKey, FlowTableEntry] = {}
        self.V_i = PortStateVector(topology.in_links(node))
        self.V_o = PortStateVector(topology.out_links(node))
        self.byte_counters: Dict[FlowKey, int] = {}
        self.marked: set[FlowKey] = set()
        self.counters = SwitchCounters()

    # ------------------------------------------------------------------
    # Packet path
    # ------------------------------------------------------------------
    def receive(self, packet: Packet, link: LinkId) -> None:
        if self.node.layer == Layer.EDGE and link.src.layer == Layer.HOST and packet.is_data:
            self.detect_elephant(packet)
        out = self.forward(packet, link)
        if out is not None:
            self.network.transmit(out, packet)

    def detect_elephant(self, packet: Packet) -> bool:
        """Count the flow's bytes and mark the packet once past the threshold.

        Returns:
            Whether the packet left carrying the elephant mark.
        """
        key = packet.flow
        if key in self.marked:
            packet.flags |= PacketFlag.ELEPHANT_MARK
            return True
        seen = self.byte_counters.get(key, 0)
        self.byte_counters[key] = seen + packet.payload_len
        threshold = self.settings.elephant_threshold
        if seen > threshold or threshold == 0:
            self.marked.add(key)
            del self.byte_counters[key]
            packet.flags |= PacketFlag.ELEPHANT_MARK
            return True
        return False

    def forward(self, packet: Packet, in_link: LinkId) -> LinkId | None:
        """Pick the outgoing link for ``packet`` or drop it when none is usable."""
        candidates = self.network.usable_next_hops(self.node, packet.dst)
        if not candidates:
            self.counters.unroutable_drops += 1
            return None
        agent = self.agent
        if agent is None or not (packet.flags & PacketFlag.ELEPHANT_MARK and packet.forward):
            self.counters.ecmp_packets += 1
            return self.ecmp_choice(packet.flow, candidates, packet.forward)

        self.counters.elephant_packets += 1
        now = self.sim.now
        entry = self.flow_table.get(packet.flow)
        if entry is not None:
            entry.observe(packet.size, now)
            if entry.L_i != in_link:
                self.V_i.add(entry.L_i, -1)
                self.V_i.add(in_link)
                entry.L_i = in_link
            if entry.L_o in candidates:
                return entry.L_o
            self.counters.reallocations += 1
            self.remove(packet.flow)

        packet.flags |= PacketFlag.PAR_IMPLICIT
        self.counters.implicit_pars += 1
        chosen = agent.allocate_implicit(packet.flow, in_link, candidates)
        self.flow_table[packet.flow].observe(packet.size, now)
        return chosen

    def ecmp_choice(
        self, key: FlowKey, candidates: Sequence[LinkId], forward: bool = True
    ) -> LinkId:
        if len(candidates) == 1:
            return candidates[0]
        return candidates[flow_hash(key, self.salt, forward) % len(candidates)]

    # ------------------------------------------------------------------
    # Flow table maintenance
    # ------------------------------------------------------------------
    def install(self, key: FlowKey, L_i: LinkId, L_o: LinkId) -> FlowTableEntry:
        if key in self.flow_table:
            self.remove(key)
        now = self.sim.now
        entry = FlowTableEntry(key, L_i, L_o, now, now, window_start=now)
        self.flow_table[key] = entry
        self.V_i.add(L_i)
        self.V_o.add(L_o)
        return entry

    def remove(self, key: FlowKey) -> FlowTableEntry | None:
        entry = self.flow_table.pop(key, None)
        if entry is not None:
            self.V_i.add(entry.L_i, -1)
            self.V_o.add(entry.L_o, -1)
        return entry

    def move(self, key: FlowKey, new_out: LinkId) -> LinkId:
        """Repoint an entry to ``new_out``; returns the previous outgoing link."""
        entry = self.flow_table[key]
        old = entry.L_o
        if old != new_out:
            self.V_o.add(old, -1)
            self.V_o.add(new_out)
            entry.L_o = new_out
        return old

    def expire_flows(self, now: SimTime, expiry: SimTime) -> List[FlowTableEntry]:
        """Drop entries idle for longer than ``expiry``."""
        stale = [e for e in self.flow_table.values() if now - e.t > expiry]
        for entry in stale:
            self.remove(entry.key)
        self.counters.expirations += len(stale)
        return stale

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------
    def classify(self, key: FlowKey) -> FlowClass:
        """Structural class of ``key`` at this switch."""
        n_in = len(self.topology.feasible_in_links(self.node, key.src_host, key.dst_host))
        n_out = len(self.topology.feasible_out_links(self.node, key.src_host, key.dst_host))
        if n_in > 1:
            return FlowClass.MISO
        if n_out > 1:
            return FlowClass.SIMO
        return FlowClass.SISO

    def entries_on(self, link: LinkId, attr: str = "L_o") -> List[FlowTableEntry]:
        return [e for e in self.flow_table.values() if getattr(e, attr) == link]

    def out_metric(self, links: Iterable[LinkId]) -> Dict[LinkId, float]:
        """V_o over ``links``: counts, or summed measured rates in rate mode."""
        if self.settings.measured_rate:
            sums = PortStateVector.rate_sums(self.flow_table.values(), "L_o")
            return {l: sums.get(l, 0.0) for l in links}
        return {l: float(self.V_o[l]) for l in links}

    def in_metric(self, links: Iterable[LinkId]) -> Dict[LinkId, float]:
        if self.settings.measured_rate:
            sums = PortStateVector.rate_sums(self.flow_table.values(), "L_i")
            return {l: sums.get(l, 0.0) for l in links}
        return {l: float(self.V_i[l]) for l in links}

    def psv_consistent(self) -> bool:
        entries = list(self.flow_table.values())
        return self.V_i.matches(entries, "L_i") and self.V_o.matches(entries, "L_o")

    def dump(self) -> Dict[str, Any]:
        """Flow table and PSVs as a JSON-ready dict."""
        return {
            "switch": self.node.name,
            "time_ns": self.sim.now,
            "flow_table": [e.to_dict() for e in self.flow_table.values()],
            "V_i": self.V_i.to_dict(),
            "V_o": self.V_o.to_dict(),
        }

    def __repr__(self) -> str:
        return f"Switch({self.node.name}, entries={len(self.flow_table)})"
