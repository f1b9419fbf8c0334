import pytest

from difsim.network import (
    MSS,
    MTU,
    LinkQueue,
    Packet,
    delay_bandwidth_capacity,
    serialization_ns,
)
from difsim.types import FlowKey, LinkId, NS_PER_MS, aggregate, core, edge, host

KEY = FlowKey(host(0, 0, 0), host(1, 0, 0))


class Recorder:
    def __init__(self) -> None:
        self.got = []

    def receive(self, packet, link) -> None:
        self.got.append((packet, link))


def _link(capacity_bps: int = 1_000_000_000, delay_ns: int = 10_000) -> LinkId:
    return LinkId(host(0, 0, 0), edge(0, 0), capacity_bps, delay_ns)


def test_queue_capacity_is_floored_delay_bandwidth_product() -> None:
    assert delay_bandwidth_capacity(_link()) == 64 * MTU
    assert delay_bandwidth_capacity(_link(), packets_min=1) == MTU
    fat = _link(10_000_000_000, NS_PER_MS)
    assert delay_bandwidth_capacity(fat) == 1_250_000


def test_serialization_time() -> None:
    assert serialization_ns(1500, 1_000_000_000) == 12_000
    assert serialization_ns(1, 3) == 2_666_666_667


def test_packet_rejects_oversized_payload() -> None:
    with pytest.raises(ValueError):
        Packet(KEY, payload_len=MSS + 1)
    assert Packet(KEY, payload_len=MSS).size == MTU


def test_queue_serializes_back_to_back_and_drops_tail() -> None:
    q = LinkQueue(_link(), capacity_bytes=2 * MTU)
    p = [Packet(KEY, i * MSS, MSS) for i in range(3)]
    assert q.enqueue(p[0], 0) == 12_000 + 10_000
    assert q.enqueue(p[1], 0) == 24_000 + 10_000
    assert q.enqueue(p[2], 0) is None
    assert (q.enqueued_packets, q.dropped_packets, q.dropped_bytes) == (3, 1, MTU)
    # first packet has left the queue by t=12us
    assert q.enqueue(p[2], 12_000) == 36_000 + 10_000
    assert q.busy_ns == 36_000
    assert q.utilization(72_000) == pytest.approx(0.5)


def test_transmit_delivers_after_serialization_and_delay(sim, network) -> None:
    sink = Recorder()
    network.attach(edge(0, 0), sink)
    link = network.topology.link(host(0, 0, 0), edge(0, 0))
    assert network.transmit(link, Packet(KEY, 0, MSS))
    sim.run_until(21_999)
    assert sink.got == []
    sim.run_until(22_000)
    assert len(sink.got) == 1
    totals = network.totals()
    assert totals["delivered_bytes"] == MTU
    assert totals["in_flight_bytes"] == 0


def test_packets_on_failed_link_are_lost(sim, network) -> None:
    sink = Recorder()
    network.attach(aggregate(0, 0), sink)
    link = network.topology.link(edge(0, 0), aggregate(0, 0))
    network.transmit(link, Packet(KEY, 0, MSS))
    network.fail_link(edge(0, 0), aggregate(0, 0))
    sim.run_until(NS_PER_MS)
    assert sink.got == []
    assert network.queues[link].dropped_packets == 1
    assert network.totals()["in_flight_bytes"] == 0


def test_link_failure_updates_usable_next_hops(network) -> None:
    seen = []
    network.failure_listeners.append(seen.append)
    dst = host(1, 0, 0)
    assert len(network.usable_next_hops(edge(0, 0), dst)) == 2
    failed = network.fail_link(edge(0, 0), aggregate(0, 0))
    assert len(failed) == 2 and seen == [failed]
    hops = network.usable_next_hops(edge(0, 0), dst)
    assert [l.dst for l in hops] == [aggregate(0, 1)]
    network.restore_link(edge(0, 0), aggregate(0, 0))
    assert len(network.usable_next_hops(edge(0, 0), dst)) == 2


def test_core_failures_cut_aggregate_off(network) -> None:
    dst = host(1, 0, 0)
    network.fail_node(core(0, 0))
    assert network.reachable(aggregate(0, 0), dst)
    network.fail_node(core(0, 1))
    assert not network.reachable(aggregate(0, 0), dst)
    assert not network.node_up(core(0, 1))
    # the edge still reaches the pod through the other aggregate
    assert [l.dst for l in network.usable_next_hops(edge(0, 0), dst)] == [aggregate(0, 1)]
    assert network.usable_next_hops(aggregate(0, 0), dst) == ()
    # traffic inside the pod is unaffected
    assert network.reachable(aggregate(0, 0), host(0, 1, 0))


def test_control_messages_take_one_link_delay(sim, network) -> None:
    got = []
    link = network.topology.link(aggregate(1, 0), core(0, 0))
    network.send_control(link, lambda msg, l: got.append((sim.now, msg, l)), "ear", 26)
    sim.run_until(NS_PER_MS)
    assert got == [(10_000, "ear", link)]
    assert (network.control_messages, network.control_bytes) == (1, 26)
