"""TCP New Reno endpoints, host NICs and receiver reorder accounting."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from loguru import logger

from difsim.engine import Event, Simulator
from difsim.network import MSS, Network, Packet, PacketFlag
from difsim.types import NS_PER_MS, NS_PER_S, FlowKey, Layer, LinkId, NodeId, SimTime

SYN = PacketFlag.SYN
ACK = PacketFlag.ACK
FIN = PacketFlag.FIN


class FlowError(ValueError):
    """Invalid flow request (duplicate key, unknown host, start in the past)."""


@dataclass(frozen=True)
class TcpConfig:
    """Endpoint constants."""

    mss: int = MSS
    init_cwnd_segments: int = 2
    init_ssthresh: int = 64 * 1024
    min_rto: SimTime = 10 * NS_PER_MS
    initial_rto: SimTime = 50 * NS_PER_MS
    max_rto: SimTime = NS_PER_S
    dupack_threshold: int = 3

    def __post_init__(self) -> None:
        if self.mss <= 0 or self.mss > MSS:
            raise ValueError(f"mss must be in (0, {MSS}]")
        if self.init_cwnd_segments < 1 or self.init_ssthresh < 2 * self.mss:
            raise ValueError("initial window must be >= 1 segment and ssthresh >= 2 segments")
        if not 0 < self.min_rto <= self.initial_rto <= self.max_rto:
            raise ValueError("need 0 < min_rto <= initial_rto <= max_rto")


class RttMonitor:
    """Network-wide smoothed RTT over all sender samples."""

    def __init__(self, fallback: SimTime, gain: float = 0.125):
        self.fallback = fallback
        self.gain = gain
        self.samples = 0
        self._avg: float | None = None

    def observe(self, rtt: SimTime) -> None:
        self.samples += 1
        if self._avg is None:
            self._avg = float(rtt)
        else:
            self._avg += self.gain * (rtt - self._avg)

    @property
    def average(self) -> SimTime:
        return self.fallback if self._avg is None else int(self._avg)


def segment_tag(flow_crc: int, seq: int, length: int) -> int:
    """Integrity tag of one segment's content."""
    return zlib.crc32(seq.to_bytes(8, "little") + length.to_bytes(2, "little"), flow_crc)


def flow_crc(key: FlowKey) -> int:
    return zlib.crc32(key.name.encode())


class TcpSender:
    """New Reno sender side of one flow.

    Sequence numbers are byte offsets into the flow's payload; the handshake
    does not consume sequence space. ``bytes_total`` of None means the flow
    never ends.
    """

    def __init__(
        self,
        key: FlowKey,
        bytes_total: int | None,
        sim: Simulator,
        transmit: Callable[[Packet], None],
        config: TcpConfig | None = None,
        monitor: RttMonitor | None = None,
        on_complete: Callable[[TcpSender], None] | None = None,
    ):
        self.key = key
        self.bytes_total = bytes_total
        self.sim = sim
        self.config = config or TcpConfig()
        self.monitor = monitor
        self.on_complete = on_complete
        self._transmit = transmit
        self._crc = flow_crc(key)
        self._limit: float = math.inf if bytes_total is None else bytes_total

        mss = self.config.mss
        self.cwnd = self.config.init_cwnd_segments * mss
        self.ssthresh = self.config.init_ssthresh
        self.snd_una = 0
        self.snd_next = 0
        self.high_sent = 0
        self.dup_acks = 0
        self.in_recovery = False
        self.recovery_point = 0
        self.rto = self.config.initial_rto
        self.srtt: float | None = None
        self.rttvar = 0.0

        self.established = False
        self.closed = False
        self.started_at: SimTime | None = None
        self.completed_at: SimTime | None = None
        self._syn_sent_at: SimTime = 0
        self._syn_retries = 0
        self._timer: Event | None = None
        self._timed: tuple[int, SimTime] | None = None
        self._out: List[Packet] = []
        self._tx_count = 0

        self.retransmits = 0
        self.fast_retransmits = 0
        self.timeouts = 0
        self.ignored_acks = 0

    # ------------------------------------------------------------------
    @property
    def bytes_acked(self) -> int:
        return self.snd_una

    @property
    def flight_size(self) -> int:
        return self.high_sent - self.snd_una

    @property
    def done(self) -> bool:
        return self.completed_at is not None

    def start(self) -> List[Packet]:
        """Send the SYN."""
        self.started_at = self.sim.now
        self._out = []
        self._send_syn()
        self._restart_timer()
        return self._out

    def close(self) -> None:
        """Stop sending; used for flows whose destination became unreachable."""
        self.closed = True
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    # ------------------------------------------------------------------
    def _emit(self, packet: Packet) -> None:
        packet.sent_at = self.sim.now
        self._out.append(packet)
        self._transmit(packet)

    def _send_syn(self) -> None:
        self._syn_sent_at = self.sim.now
        self._emit(Packet(self.key, flags=SYN))

    def _send_segment(self, seq: int, retransmit: bool = False) -> int:
        length = int(min(self.config.mss, self._limit - seq))
        flags = FIN if seq + length == self._limit else PacketFlag.NONE
        if retransmit:
            flags |= PacketFlag.RETRANSMIT
        packet = Packet(self.key, seq, length, flags, tag=segment_tag(self._crc, seq, length))
        # per-flow transmission order, read by the receiver for reorder accounting
        packet.tx_index = self._tx_count
        self._tx_count += 1
        self._emit(packet)
        if retransmit:
            self.retransmits += 1
            if self._timed is not None and seq < self._timed[0]:
                self._timed = None
        elif self._timed is None:
            self._timed = (seq + length, self.sim.now)
        return length

    def _send_window(self) -> None:
        while self.snd_next < self._limit and self.snd_next - self.snd_una < self.cwnd:
            retransmit = self.snd_next < self.high_sent
            self.snd_next += self._send_segment(self.snd_next, retransmit)
            if self.snd_next > self.high_sent:
                self.high_sent = self.snd_next

    def _restart_timer(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if self.closed or self.done:
            return
        if not self.established or self.snd_una < self.high_sent:
            self._timer = self.sim.schedule_in(self.rto, self._on_timeout)

    def _sample_rtt(self, rtt: SimTime) -> None:
        if self.srtt is None:
            self.srtt = float(rtt)
            self.rttvar = rtt / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - rtt)
            self.srtt = 0.875 * self.srtt + 0.125 * rtt
        rto = int(self.srtt + 4 * self.rttvar)
        self.rto = min(max(rto, self.config.min_rto), self.config.max_rto)
        if self.monitor is not None:
            self.monitor.observe(rtt)

    def _complete(self) -> None:
        self.completed_at = self.sim.now
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if self.on_complete is not None:
            self.on_complete(self)

    # ------------------------------------------------------------------
    def on_syn_ack(self, packet: Packet) -> List[Packet]:
        self._out = []
        if self.established or self.closed:
            return self._out
        self.established = True
        if self._syn_retries == 0:
            self._sample_rtt(self.sim.now - self._syn_sent_at)
        if self.bytes_total == 0:
            self._complete()
            return self._out
        self._send_window()
        self._restart_timer()
        return self._out

    def on_ack(self, ack: Packet) -> List[Packet]:
        """Process a cumulative ACK.

        Returns:
            The packets transmitted in response.
        """
        self._out = []
        if not ack.flags & ACK or self.closed or self.done:
            return self._out
        if ack.flags & SYN:
            return self.on_syn_ack(ack)
        mss = self.config.mss
        acked = ack.ack_seq
        if acked > self.high_sent:
            self.ignored_acks += 1
            return self._out

        if acked > self.snd_una:
            newly = acked - self.snd_una
            self.snd_una = acked
            if self.snd_next < acked:
                self.snd_next = acked
            self.dup_acks = 0
            if self._timed is not None and acked >= self._timed[0]:
                self._sample_rtt(self.sim.now - self._timed[1])
                self._timed = None
            if self.in_recovery:
                if acked >= self.recovery_point:
                    self.in_recovery = False
                    self.cwnd = max(self.ssthresh, mss)
                else:
                    # partial ack: retransmit the next hole and stay in recovery
                    self._send_segment(self.snd_una, retransmit=True)
                    self.cwnd = max(self.cwnd - newly + mss, mss)
            elif self.cwnd < self.ssthresh:
                self.cwnd += mss
            else:
                self.cwnd += max(1, mss * mss // self.cwnd)
            if self.snd_una >= self._limit:
                self._complete()
                return self._out
            self._send_window()
            self._restart_timer()
            return self._out

        if acked == self.snd_una and self.high_sent > self.snd_una:
            self.dup_acks += 1
            if not self.in_recovery and self.dup_acks == self.config.dupack_threshold:
                self.ssthresh = max(self.flight_size // 2, 2 * mss)
                self.recovery_point = self.high_sent
                self.in_recovery = True
                self.fast_retransmits += 1
                self._send_segment(self.snd_una, retransmit=True)
                self.cwnd = self.ssthresh + self.config.dupack_threshold * mss
                self._restart_timer()
            elif self.in_recovery:
                self.cwnd += mss
                self._send_window()
        return self._out

    def _on_timeout(self) -> None:
        self._timer = None
        if self.closed or self.done:
            return
        self._out = []
        self.rto = min(self.rto * 2, self.config.max_rto)
        if not self.established:
            self._syn_retries += 1
            self._send_syn()
            self._restart_timer()
            return
        if self.snd_una >= self.high_sent:
            return
        self.timeouts += 1
        mss = self.config.mss
        self.ssthresh = max(self.flight_size // 2, 2 * mss)
        self.cwnd = mss
        self.in_recovery = False
        self.dup_acks = 0
        self.snd_next = self.snd_una
        self._timed = None
        self._send_window()
        self._restart_timer()


@dataclass
class ReorderStats:
    out_of_order_pkts: int = 0
    in_order_pkts: int = 0
    gap_sum: float = 0.0
    gap_samples: int = 0

    @property
    def ratio(self) -> float | None:
        if self.in_order_pkts == 0:
            return None
        return self.out_of_order_pkts / self.in_order_pkts

    @property
    def window(self) -> float | None:
        if self.gap_samples == 0:
            return None
        return self.gap_sum / self.gap_samples

    def merge(self, other: ReorderStats) -> None:
        self.out_of_order_pkts += other.out_of_order_pkts
        self.in_order_pkts += other.in_order_pkts
        self.gap_sum += other.gap_sum
        self.gap_samples += other.gap_samples


class TcpReceiver:
    """Receiver side: cumulative ACKs, reassembly and reorder accounting."""

    def __init__(self, key: FlowKey, mss: int = MSS):
        self.key = key
        self.mss = mss
        self.rcv_next = 0
        self.delivered = 0
        self.stats = ReorderStats()
        self.duplicates = 0
        self.integrity_errors = 0
        self.fin_seq: int | None = None
        self._crc = flow_crc(key)
        self._buffer: Dict[int, int] = {}
        self._highest_tx = -1

    @property
    def finished(self) -> bool:
        return self.fin_seq is not None and self.rcv_next >= self.fin_seq

    def _ack(self, flags: PacketFlag = ACK) -> Packet:
        return Packet(self.key, ack_seq=self.rcv_next, flags=flags, forward=False)

    def on_receive(self, packet: Packet) -> Packet | None:
        """Consume one packet and return the ACK to send back."""
        if packet.flags & SYN:
            return self._ack(SYN | ACK)
        length = packet.payload_len
        if length == 0:
            return None
        seq = packet.seq
        if packet.tag != segment_tag(self._crc, seq, length):
            self.integrity_errors += 1
            return self._ack()
        if packet.flags & FIN:
            self.fin_seq = seq + length

        if seq < self.rcv_next or seq in self._buffer:
            self.duplicates += 1
            return self._ack()
        self._count_order(packet)
        if seq == self.rcv_next:
            self.rcv_next += length
            self.delivered += length
            while self.rcv_next in self._buffer:
                chunk = self._buffer.pop(self.rcv_next)
                self.rcv_next += chunk
                self.delivered += chunk
        else:
            self._buffer[seq] = length
        return self._ack()

    def _count_order(self, packet: Packet) -> None:
        """Out of order means a packet transmitted later already arrived.

        Retransmissions are left out, so a hole left by a loss and the
        segment that fills it do not count as reordering.
        """
        if packet.flags & PacketFlag.RETRANSMIT:
            return
        stats = self.stats
        if packet.tx_index < self._highest_tx:
            stats.out_of_order_pkts += 1
            stats.gap_sum += self._highest_tx - packet.tx_index
            stats.gap_samples += 1
        else:
            stats.in_order_pkts += 1
            self._highest_tx = packet.tx_index


class Host:
    """End host: owns its NIC uplink and the TCP endpoints it terminates."""

    def __init__(self, node: NodeId, network: Network):
        self.node = node
        self.network = network
        self.senders: Dict[FlowKey, TcpSender] = {}
        self.receivers: Dict[FlowKey, TcpReceiver] = {}
        self.rx_bytes = 0
        self.nic_drops = 0
        self.stray_packets = 0

    def send(self, packet: Packet) -> None:
        hops = self.network.usable_next_hops(self.node, packet.dst)
        if not hops:
            self.nic_drops += 1
            return
        self.network.transmit(hops[0], packet)

    def receive(self, packet: Packet, link: LinkId) -> None:
        if packet.forward:
            receiver = self.receivers.get(packet.flow)
            if receiver is None:
                self.stray_packets += 1
                return
            before = receiver.delivered
            reply = receiver.on_receive(packet)
            self.rx_bytes += receiver.delivered - before
            if reply is not None:
                self.send(reply)
            return
        sender = self.senders.get(packet.flow)
        if sender is None:
            self.stray_packets += 1
            return
        sender.on_ack(packet)


@dataclass
class TcpFlow:
    """Handle for one opened connection."""

    key: FlowKey
    bytes_total: int | None
    start: SimTime
    sender: TcpSender
    receiver: TcpReceiver
    failed: bool = False
    callbacks: List[Callable[[TcpFlow], None]] = field(default_factory=list)

    @property
    def completed_at(self) -> SimTime | None:
        return self.sender.completed_at

    @property
    def completion_time(self) -> SimTime | None:
        done = self.sender.completed_at
        return None if done is None else done - self.start


class Transport:
    """Opens flows between hosts and tracks them for the whole run."""

    def __init__(
        self,
        sim: Simulator,
        network: Network,
        config: TcpConfig | None = None,
        monitor: RttMonitor | None = None,
    ):
        self.sim = sim
        self.network = network
        self.config = config or TcpConfig()
        self.monitor = monitor or RttMonitor(self.config.min_rto)
        self.hosts: Dict[NodeId, Host] = {}
        self.flows: Dict[FlowKey, TcpFlow] = {}
        for node in network.topology.hosts:
            h = Host(node, network)
            self.hosts[node] = h
            network.attach(node, h)

    def open_flow(
        self,
        key: FlowKey,
        bytes_total: int | None,
        start: SimTime,
        on_complete: Optional[Callable[[TcpFlow], None]] = None,
    ) -> TcpFlow:
        """Register a flow and schedule its SYN at ``start``.

        Raises:
            FlowError: on a duplicate key, an unknown host, a negative size or
                a start time in the past.
        """
        if key in self.flows:
            raise FlowError(f"duplicate flow {key}")
        for node in (key.src_host, key.dst_host):
            if node not in self.hosts or node.layer != Layer.HOST:
                raise FlowError(f"unknown host {node}")
        if key.src_host == key.dst_host:
            raise FlowError(f"flow {key} loops back to its source")
        if bytes_total is not None and bytes_total < 0:
            raise FlowError("bytes_total must be >= 0")
        if start < self.sim.now:
            raise FlowError(f"flow {key} starts at {start} before now {self.sim.now}")

        src = self.hosts[key.src_host]
        dst = self.hosts[key.dst_host]
        sender = TcpSender(key, bytes_total, self.sim, src.send, self.config, self.monitor)
        receiver = TcpReceiver(key, self.config.mss)
        flow = TcpFlow(key, bytes_total, start, sender, receiver)
        if on_complete is not None:
            flow.callbacks.append(on_complete)
        sender.on_complete = lambda _s: self._completed(flow)
        src.senders[key] = sender
        dst.receivers[key] = receiver
        self.flows[key] = flow
        self.sim.schedule(start, sender.start)
        return flow

    def _completed(self, flow: TcpFlow) -> None:
        logger.debug("t={}ns: flow {} completed", self.sim.now, flow.key)
        for callback in flow.callbacks:
            callback(flow)

    def fail_flow(self, key: FlowKey) -> None:
        """Stop a flow whose destination can no longer be reached."""
        flow = self.flows[key]
        if flow.failed or flow.sender.done:
            return
        flow.failed = True
        flow.sender.close()
        logger.warning("t={}ns: flow {} unreachable, stopped", self.sim.now, key)

    def reorder_totals(self) -> ReorderStats:
        total = ReorderStats()
        for flow in self.flows.values():
            total.merge(flow.receiver.stats)
        return total
