import pytest

from difsim.engine import Simulator
from difsim.network import MSS, Packet, PacketFlag
from difsim.tcp import (
    FlowError,
    RttMonitor,
    TcpConfig,
    TcpReceiver,
    TcpSender,
    Transport,
    flow_crc,
    segment_tag,
)
from difsim.types import NS_PER_MS, FlowKey, host

KEY = FlowKey(host(0, 0, 0), host(1, 0, 0))


def _ack(seq: int, flags: PacketFlag = PacketFlag.ACK) -> Packet:
    return Packet(KEY, ack_seq=seq, flags=flags, forward=False)


def _segment(
    seq: int, length: int = MSS, flags: PacketFlag = PacketFlag.NONE, tx: int = 0
) -> Packet:
    packet = Packet(KEY, seq, length, flags, tag=segment_tag(flow_crc(KEY), seq, length))
    packet.tx_index = tx
    return packet


def _sender(bytes_total=None, **config) -> tuple[TcpSender, list]:
    sent: list = []
    sender = TcpSender(KEY, bytes_total, Simulator(), sent.append, TcpConfig(**config))
    return sender, sent


def test_handshake_then_initial_window() -> None:
    sender, sent = _sender()
    sender.start()
    assert sent[0].flags & PacketFlag.SYN
    out = sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    assert sender.established
    assert [p.seq for p in out] == [0, MSS]


def test_slow_start_grows_one_segment_per_ack() -> None:
    sender, _ = _sender()
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    out = sender.on_ack(_ack(MSS))
    assert sender.cwnd == 3 * MSS
    assert [p.seq for p in out] == [2 * MSS, 3 * MSS]


def test_slow_start_doubles_window_each_round_trip() -> None:
    sender, _ = _sender()
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    acked = 0
    for _ in range(4):
        window = sender.cwnd // MSS
        for _ in range(window):
            acked += MSS
            sender.on_ack(_ack(acked))
        assert sender.cwnd == 2 * window * MSS
        assert sender.high_sent == acked + sender.cwnd


def test_new_reno_partial_ack_with_two_losses() -> None:
    # ten segments in flight; segments 0 and 4 are lost
    sender, _ = _sender(init_cwnd_segments=10)
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    assert sender.high_sent == 10 * MSS

    sender.on_ack(_ack(0))
    sender.on_ack(_ack(0))
    out = sender.on_ack(_ack(0))
    assert sender.fast_retransmits == 1
    assert sender.in_recovery
    assert [p.seq for p in out] == [0]
    assert sender.ssthresh == 5 * MSS
    assert sender.cwnd == 8 * MSS
    assert sender.recovery_point == 10 * MSS

    # the retransmission fills the first hole; the receiver now waits for segment 4
    out = sender.on_ack(_ack(4 * MSS))
    assert sender.in_recovery
    assert [p.seq for p in out] == [4 * MSS]
    assert sender.retransmits == 2
    assert sender.cwnd == 5 * MSS

    # full ack ends recovery and deflates the window to ssthresh
    out = sender.on_ack(_ack(10 * MSS))
    assert not sender.in_recovery
    assert sender.cwnd == 5 * MSS
    assert [p.seq for p in out] == [(10 + i) * MSS for i in range(5)]
    assert sender.retransmits == 2


def test_timeout_collapses_window_and_backs_off() -> None:
    sender, sent = _sender()
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    rto = sender.rto
    sent.clear()
    sender.sim.run_until(rto)
    assert sender.timeouts == 1
    assert sender.cwnd == MSS
    assert sender.rto == 2 * rto
    assert [p.seq for p in sent] == [0]


def test_syn_is_retransmitted_on_timeout() -> None:
    sender, sent = _sender()
    sender.start()
    sender.sim.run_until(50 * NS_PER_MS)
    assert [bool(p.flags & PacketFlag.SYN) for p in sent] == [True, True]


def test_ack_beyond_sent_data_is_ignored() -> None:
    sender, _ = _sender()
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    sender.on_ack(_ack(50 * MSS))
    assert sender.ignored_acks == 1
    assert sender.snd_una == 0


def test_finite_flow_sets_fin_and_completes() -> None:
    done = []
    sender, _ = _sender(bytes_total=2 * MSS + 100)
    sender.on_complete = done.append
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    out = sender.on_ack(_ack(MSS))
    assert out[-1].flags & PacketFlag.FIN
    assert out[-1].payload_len == 100
    assert sender.on_ack(_ack(2 * MSS)) == []
    assert not sender.done
    sender.on_ack(_ack(2 * MSS + 100))
    assert sender.done and done == [sender]


def test_zero_byte_flow_completes_on_handshake() -> None:
    sender, _ = _sender(bytes_total=0)
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    assert sender.done


def test_receiver_reorder_accounting() -> None:
    rx = TcpReceiver(KEY)
    assert rx.on_receive(_segment(0, tx=0)).ack_seq == MSS
    assert rx.on_receive(_segment(2 * MSS, tx=2)).ack_seq == MSS
    assert rx.on_receive(_segment(MSS, tx=1)).ack_seq == 3 * MSS
    rx.on_receive(_segment(0, tx=0))
    assert rx.delivered == 3 * MSS
    assert rx.duplicates == 1
    assert rx.stats.in_order_pkts == 2
    assert rx.stats.out_of_order_pkts == 1
    assert rx.stats.ratio == 0.5
    assert rx.stats.window == 1.0


def test_loss_and_its_retransmission_are_not_reordering() -> None:
    rx = TcpReceiver(KEY)
    # segment 1 is lost; everything after it arrives in transmission order
    for n in (0, 2, 3, 4):
        rx.on_receive(_segment(n * MSS, tx=n))
    assert rx.rcv_next == MSS
    rx.on_receive(_segment(MSS, tx=5, flags=PacketFlag.RETRANSMIT))
    assert rx.delivered == 5 * MSS
    assert rx.stats.out_of_order_pkts == 0
    assert rx.stats.in_order_pkts == 4
    assert rx.stats.ratio == 0.0


def test_sender_stamps_transmission_order_and_retransmits() -> None:
    sender, sent = _sender(init_cwnd_segments=2)
    sender.start()
    sender.on_ack(_ack(0, PacketFlag.SYN | PacketFlag.ACK))
    data = [p for p in sent if p.payload_len]
    assert [p.tx_index for p in data] == [0, 1]
    assert not any(p.flags & PacketFlag.RETRANSMIT for p in data)
    for _ in range(3):
        sender.on_ack(_ack(0))
    resent = [p for p in sent if p.payload_len][-1]
    assert resent.seq == 0
    assert resent.flags & PacketFlag.RETRANSMIT
    assert resent.tx_index == 2


def test_receiver_checks_integrity_and_fin() -> None:
    rx = TcpReceiver(KEY)
    bad = _segment(0)
    bad.tag ^= 1
    rx.on_receive(bad)
    assert rx.integrity_errors == 1 and rx.delivered == 0
    rx.on_receive(_segment(0, 500, PacketFlag.FIN))
    assert rx.finished and rx.delivered == 500


def test_receiver_answers_syn() -> None:
    reply = TcpReceiver(KEY).on_receive(Packet(KEY, flags=PacketFlag.SYN))
    assert reply.flags == PacketFlag.SYN | PacketFlag.ACK
    assert not reply.forward


def test_rtt_monitor_smooths_samples() -> None:
    mon = RttMonitor(fallback=123)
    assert mon.average == 123
    mon.observe(800)
    mon.observe(0)
    assert mon.average == 700


def test_config_validation() -> None:
    with pytest.raises(ValueError):
        TcpConfig(mss=0)
    with pytest.raises(ValueError):
        TcpConfig(min_rto=10, initial_rto=5)


def test_open_flow_errors(sim, network) -> None:
    transport = Transport(sim, network)
    transport.open_flow(KEY, 1000, 0)
    with pytest.raises(FlowError):
        transport.open_flow(KEY, 1000, 0)
    with pytest.raises(FlowError):
        transport.open_flow(FlowKey(host(0, 0, 0), host(0, 0, 0)), 1000, 0)
    with pytest.raises(FlowError):
        transport.open_flow(FlowKey(host(0, 0, 0), host(9, 0, 0)), 1000, 0)
    with pytest.raises(FlowError):
        transport.open_flow(FlowKey(host(0, 0, 1), host(1, 0, 0)), -1, 0)
    sim.run_until(10)
    with pytest.raises(FlowError):
        transport.open_flow(FlowKey(host(0, 0, 1), host(1, 0, 0)), 1000, 5)
