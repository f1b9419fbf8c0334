import pytest

from difsim.config import ExperimentConfig
from difsim.fabric import DataCenter
from difsim.network import MSS, Packet, PacketFlag
from difsim.switch import (
    FabricSettings,
    FlowClass,
    FlowTableEntry,
    PortStateVector,
    Switch,
    flow_hash,
)
from difsim.types import NS_PER_MS, FlowKey, aggregate, core, edge, host

KEY = FlowKey(host(0, 0, 0), host(1, 0, 0))
OTHER = FlowKey(host(0, 0, 1), host(2, 0, 0))


def _data(key: FlowKey = KEY, seq: int = 0, marked: bool = False) -> Packet:
    flags = PacketFlag.ELEPHANT_MARK if marked else PacketFlag.NONE
    return Packet(key, seq, MSS, flags)


def test_flow_hash_is_stable_and_salted() -> None:
    assert flow_hash(KEY, 5) == flow_hash(KEY, 5)
    assert flow_hash(KEY, 5) != flow_hash(KEY, 6)
    assert flow_hash(KEY, 5) != flow_hash(KEY, 5, forward=False)
    assert flow_hash(KEY, 5) != flow_hash(FlowKey(KEY.src_host, KEY.dst_host, 1), 5)


def test_elephant_detection_after_threshold(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network, FabricSettings(elephant_threshold=3000))
    marks = [sw.detect_elephant(_data(seq=i * MSS)) for i in range(5)]
    assert marks == [False, False, False, True, True]


def test_zero_threshold_marks_first_packet(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network, FabricSettings(elephant_threshold=0))
    p = _data()
    assert sw.detect_elephant(p)
    assert p.flags & PacketFlag.ELEPHANT_MARK


def test_without_allocator_every_packet_is_hashed(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network)
    in_link = topo4.link(host(0, 0, 0), edge(0, 0))
    first = sw.forward(_data(marked=True), in_link)
    assert first in topo4.uplinks(edge(0, 0))
    assert all(sw.forward(_data(seq=i * MSS), in_link) == first for i in range(1, 10))
    assert sw.counters.ecmp_packets == 10
    assert sw.flow_table == {}


def test_unroutable_packet_is_dropped(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network)
    network.fail_link(edge(0, 0), aggregate(0, 0))
    network.fail_link(edge(0, 0), aggregate(0, 1))
    assert sw.forward(_data(), topo4.link(host(0, 0, 0), edge(0, 0))) is None
    assert sw.counters.unroutable_drops == 1


def test_flow_table_keeps_port_state_vectors_consistent(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network)
    up0, up1 = topo4.uplinks(edge(0, 0))
    in0 = topo4.link(host(0, 0, 0), edge(0, 0))
    in1 = topo4.link(host(0, 0, 1), edge(0, 0))
    sw.install(KEY, in0, up0)
    sw.install(OTHER, in1, up0)
    assert sw.V_o[up0] == 2 and sw.V_o[up1] == 0
    assert sw.move(OTHER, up1) == up0
    assert (sw.V_o[up0], sw.V_o[up1]) == (1, 1)
    assert sw.psv_consistent()
    assert PortStateVector.recount(sw.flow_table.values(), "L_i") == {in0: 1, in1: 1}
    sw.remove(KEY)
    assert sw.V_i.total() == 1 and sw.V_o.total() == 1
    assert sw.psv_consistent()


def test_idle_entries_expire(sim, topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network)
    up0, _ = topo4.uplinks(edge(0, 0))
    sw.install(KEY, topo4.link(host(0, 0, 0), edge(0, 0)), up0)
    sim.run_until(30 * NS_PER_MS)
    sw.install(OTHER, topo4.link(host(0, 0, 1), edge(0, 0)), up0)
    stale = sw.expire_flows(sim.now, 20 * NS_PER_MS)
    assert [e.key for e in stale] == [KEY]
    assert list(sw.flow_table) == [OTHER]
    assert sw.counters.expirations == 1


def test_structural_flow_classes(topo4, network) -> None:
    def cls(node, key=KEY):
        return Switch(node, topo4, network).classify(key)

    assert cls(edge(0, 0)) == FlowClass.SIMO
    assert cls(aggregate(0, 1)) == FlowClass.SIMO
    assert cls(core(0, 0)) == FlowClass.SISO
    assert cls(aggregate(1, 0)) == FlowClass.MISO
    assert cls(edge(1, 0)) == FlowClass.MISO
    assert cls(edge(0, 0), FlowKey(host(0, 0, 0), host(0, 0, 1))) == FlowClass.SISO


def test_windowed_rate_estimate(topo4) -> None:
    l_in = topo4.link(host(0, 0, 0), edge(0, 0))
    l_out = topo4.uplinks(edge(0, 0))[0]
    entry = FlowTableEntry(KEY, l_in, l_out, 0, 0)
    entry.observe(1_250_000, 50 * NS_PER_MS)
    assert entry.measured_rate == 0.0
    entry.observe(0, 100 * NS_PER_MS)
    assert entry.measured_rate == pytest.approx(1e8)
    entry.observe(0, 200 * NS_PER_MS)
    assert entry.measured_rate == pytest.approx(5e7)


def test_measured_rate_metric_sums_rates(topo4, network) -> None:
    sw = Switch(edge(0, 0), topo4, network, FabricSettings(measured_rate=True))
    up0, up1 = topo4.uplinks(edge(0, 0))
    sw.install(KEY, topo4.link(host(0, 0, 0), edge(0, 0)), up0).measured_rate = 3e8
    sw.install(OTHER, topo4.link(host(0, 0, 1), edge(0, 0)), up0).measured_rate = 2e8
    assert sw.out_metric([up0, up1]) == {up0: 5e8, up1: 0.0}


@pytest.fixture
def dc():
    return DataCenter(ExperimentConfig(k=4, duration_s=1.0, elephant_threshold_bytes=0, seed=3))


def test_unseen_elephant_triggers_path_allocation(dc) -> None:
    sw = dc.switches[edge(0, 0)]
    in0 = dc.topology.link(host(0, 0, 0), edge(0, 0))
    in1 = dc.topology.link(host(0, 0, 1), edge(0, 0))
    p = _data(marked=True)
    chosen = sw.forward(p, in0)
    assert p.flags & PacketFlag.PAR_IMPLICIT
    assert sw.flow_table[KEY].L_o == chosen
    assert sw.forward(_data(seq=MSS, marked=True), in0) == chosen
    assert sw.counters.implicit_pars == 1
    # the next elephant takes the other uplink
    other = sw.forward(_data(OTHER, marked=True), in1)
    assert {chosen, other} == set(dc.topology.uplinks(edge(0, 0)))


def test_acks_are_hashed_even_when_marked(dc) -> None:
    sw = dc.switches[aggregate(1, 0)]
    ack = Packet(KEY, ack_seq=MSS, flags=PacketFlag.ACK | PacketFlag.ELEPHANT_MARK, forward=False)
    out = sw.forward(ack, dc.topology.link(edge(1, 0), aggregate(1, 0)))
    assert out in dc.topology.uplinks(aggregate(1, 0))
    assert sw.flow_table == {}


def test_dump_lists_entries(dc) -> None:
    sw = dc.switches[edge(0, 0)]
    sw.forward(_data(marked=True), dc.topology.link(host(0, 0, 0), edge(0, 0)))
    dump = sw.dump()
    assert dump["switch"] == "e0_0"
    assert dump["flow_table"][0]["flow"] == KEY.name
    assert sum(dump["V_o"].values()) == 1
