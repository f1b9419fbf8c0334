import json
import random

import networkx as nx
import pytest

from difsim.topology import TopologyError, build_fat_tree, trace_path
from difsim.types import Layer, NodeId, PathSpec, aggregate, core, edge, host


@pytest.mark.parametrize("k", [4, 6, 8])
def test_fat_tree_sizes(k) -> None:
    topo = build_fat_tree(k)
    half = k // 2
    assert len(topo.hosts) == k**3 // 4
    assert len(topo.edges) == len(topo.aggregates) == k * half
    assert len(topo.cores) == half * half
    cables = len(topo.hosts) + k * half * half + k * half * half
    assert len(topo.links) == 2 * cables
    for sw in topo.edges + topo.aggregates + topo.cores:
        assert len(topo.out_links(sw)) == k


@pytest.mark.parametrize("k", [2, 3, 5, 0])
def test_bad_k_rejected(k) -> None:
    with pytest.raises(TopologyError):
        build_fat_tree(k)


def test_bad_link_attributes_rejected() -> None:
    with pytest.raises(TopologyError):
        build_fat_tree(4, capacity_bps=0)


def test_aggregate_j_connects_to_core_group_j(topo4) -> None:
    for pod in range(4):
        for j in range(2):
            ups = {l.dst for l in topo4.uplinks(aggregate(pod, j))}
            assert ups == {core(j, 0), core(j, 1)}


def test_equal_cost_path_counts(topo4) -> None:
    assert len(topo4.equal_cost_paths(host(0, 0, 0), host(0, 0, 1))) == 1
    assert len(topo4.equal_cost_paths(host(0, 0, 0), host(0, 1, 0))) == 2
    assert len(topo4.equal_cost_paths(host(0, 0, 0), host(3, 1, 1))) == 4
    topo6 = build_fat_tree(6)
    assert len(topo6.equal_cost_paths(host(0, 0, 0), host(5, 2, 2))) == 9


def test_equal_cost_paths_match_networkx_oracle() -> None:
    topo = build_fat_tree(6)
    g = topo.to_networkx()
    rng = random.Random(5)
    for _ in range(25):
        src, dst = rng.sample(list(topo.hosts), 2)
        ours = {
            tuple(n.name for n in trace_path(topo, src, path))
            for path in topo.equal_cost_paths(src, dst)
        }
        oracle = {tuple(p) for p in nx.all_shortest_paths(g, src.name, dst.name)}
        assert ours == oracle


def test_equal_cost_paths_errors(topo4) -> None:
    with pytest.raises(TopologyError):
        topo4.equal_cost_paths(host(0, 0, 0), host(0, 0, 0))
    with pytest.raises(TopologyError):
        topo4.equal_cost_paths(host(0, 0, 0), host(9, 0, 0))
    with pytest.raises(TopologyError):
        topo4.equal_cost_paths(edge(0, 0), host(1, 0, 0))


def test_feasible_links_per_layer(topo4) -> None:
    src, dst = host(0, 0, 0), host(1, 0, 0)
    assert len(topo4.feasible_out_links(edge(0, 0), src, dst)) == 2
    assert len(topo4.feasible_in_links(edge(0, 0), src, dst)) == 1
    assert [l.src for l in topo4.feasible_in_links(aggregate(1, 0), src, dst)] == [
        core(0, 0),
        core(0, 1),
    ]
    assert len(topo4.feasible_in_links(edge(1, 0), src, dst)) == 2
    assert topo4.feasible_out_links(edge(2, 0), src, dst) == []


def test_mirror_uplink(topo4) -> None:
    link = topo4.link(core(0, 0), aggregate(1, 0))
    assert topo4.mirror_uplink(aggregate(1, 0), link, 2) == PathSpec(core=core(0, 0))
    link = topo4.link(aggregate(1, 1), edge(1, 0))
    spec = topo4.mirror_uplink(edge(1, 0), link, 3)
    assert spec == PathSpec(uphill_aggregate=aggregate(3, 1))
    assert spec.target == aggregate(3, 1)
    with pytest.raises(TopologyError):
        topo4.mirror_uplink(edge(1, 1), link, 3)
    with pytest.raises(TopologyError):
        topo4.mirror_uplink(edge(1, 0), topo4.link(host(1, 0, 0), edge(1, 0)), 3)


def _steer(topo, src, dst, spec):
    """Follow shortest-path forwarding, preferring hops toward the recommended switch."""
    node, links = src, []
    while node != dst:
        hops = topo.next_hops(node, dst)
        pick = next((l for l in hops if l.dst == spec.target), None)
        if pick is None:
            pick = next((l for l in hops if topo.has_link(l.dst, spec.target)), hops[0])
        links.append(pick)
        node = pick.dst
    return links


@pytest.mark.parametrize("dst", [host(2, 1, 0), host(3, 0, 1), host(1, 1, 1)])
def test_mirror_uplink_steers_flow_onto_the_link(topo4, dst) -> None:
    src = host(0, 0, 0)
    downhill = [aggregate(dst.pod, j) for j in range(2)] + [edge(dst.pod, dst.indices[1])]
    for sw in downhill:
        for link in topo4.in_links(sw):
            if link.src.layer <= sw.layer:
                continue
            path = _steer(topo4, src, dst, topo4.mirror_uplink(sw, link, src.pod))
            assert trace_path(topo4, src, path)[-1] == dst
            assert path in topo4.equal_cost_paths(src, dst)
            assert link in path


def test_next_hops_structure(topo4) -> None:
    dst = host(2, 1, 0)
    assert len(topo4.next_hops(edge(0, 0), dst)) == 2
    assert [l.dst for l in topo4.next_hops(core(1, 0), dst)] == [aggregate(2, 1)]
    assert [l.dst for l in topo4.next_hops(aggregate(2, 0), dst)] == [edge(2, 1)]
    assert [l.dst for l in topo4.next_hops(edge(2, 1), dst)] == [dst]


def test_hosts_under(topo4) -> None:
    assert topo4.hosts_under(edge(1, 1)) == [host(1, 1, 0), host(1, 1, 1)]
    assert len(topo4.hosts_under(aggregate(3, 0))) == 4
    assert len(topo4.hosts_under(core(0, 0))) == 16


def test_node_names_round_trip() -> None:
    for node in (host(3, 1, 0), edge(0, 1), aggregate(2, 0), core(1, 1)):
        assert NodeId.parse(node.name) == node
    assert NodeId.parse("c1_0").layer == Layer.CORE
    with pytest.raises(ValueError):
        NodeId.parse("z1_0")


def test_json_dump_schema(topo4) -> None:
    doc = json.loads(topo4.to_json())
    assert len(doc["nodes"]) == 36
    assert len(doc["links"]) == 96
    first = doc["links"][0]
    assert {"source", "target", "capacity_bps", "delay_ns"} <= set(first)
    layers = {n["layer"] for n in doc["nodes"]}
    assert layers == {"host", "edge", "aggregate", "core"}


def test_trace_path_rejects_gaps(topo4) -> None:
    a = topo4.link(host(0, 0, 0), edge(0, 0))
    b = topo4.link(aggregate(0, 0), core(0, 0))
    with pytest.raises(TopologyError):
        trace_path(topo4, host(0, 0, 0), [a, b])
