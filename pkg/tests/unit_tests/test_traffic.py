import numpy as np
import pytest
from scipy import stats

from difsim.traffic import (
    DEFAULT_SHUFFLE_BYTES,
    PatternError,
    ShuffleJob,
    TrafficPattern,
    derangement,
    generate,
    parse_pattern,
    parse_size,
    staggered_destination,
    workload,
)
from difsim.types import host


@pytest.mark.parametrize(
    "text, expected",
    [
        ("stride:4", TrafficPattern("stride", stride=4)),
        ("stag:0.5:0.3", TrafficPattern("staggered", p_edge=0.5, p_pod=0.3)),
        ("random", TrafficPattern("random")),
        ("randx:3", TrafficPattern("randx", flows_per_host=3)),
        ("randbij", TrafficPattern("randbij")),
        ("shuffle", TrafficPattern("shuffle")),
        ("shuffle:500KB", TrafficPattern("shuffle", bytes_per_transfer=500_000)),
    ],
)
def test_parse_pattern(text, expected) -> None:
    assert parse_pattern(text) == expected


@pytest.mark.parametrize("text", ["stride", "stride:x", "stag:0.8:0.5", "randx:0", "mesh", ""])
def test_parse_pattern_rejects(text) -> None:
    with pytest.raises(PatternError):
        parse_pattern(text)


def test_parse_size() -> None:
    assert parse_size("5MB") == 5_000_000
    assert parse_size("1.5gb") == 1_500_000_000
    assert parse_size("42") == 42
    with pytest.raises(PatternError):
        parse_size("5 parsecs")


def test_labels() -> None:
    assert parse_pattern("stag:0.5:0.3").label == "stag:0.5:0.3"
    assert parse_pattern("shuffle").label == f"shuffle:{DEFAULT_SHUFFLE_BYTES}B"


def test_stride_maps_host_i_to_i_plus_s(topo4) -> None:
    flows = generate(parse_pattern("stride:8"), topo4, np.random.default_rng(0))
    assert len(flows) == 16
    assert flows[0].key.src_host == host(0, 0, 0)
    assert flows[0].key.dst_host == host(2, 0, 0)
    assert flows[-1].key.dst_host == host(1, 1, 1)
    assert all(f.bytes_total is None and f.start == 0 for f in flows)


def test_stride_out_of_range(topo4) -> None:
    with pytest.raises(PatternError):
        generate(parse_pattern("stride:16"), topo4, np.random.default_rng(0))


def test_randbij_is_a_derangement(topo4) -> None:
    flows = generate(parse_pattern("randbij"), topo4, np.random.default_rng(9))
    assert sorted(f.key.dst_host for f in flows) == sorted(topo4.hosts)
    assert all(f.key.src_host != f.key.dst_host for f in flows)
    with pytest.raises(PatternError):
        derangement(1, np.random.default_rng(0))


def test_random_never_targets_self(topo4) -> None:
    flows = generate(parse_pattern("random"), topo4, np.random.default_rng(2))
    assert len(flows) == 16
    assert all(f.key.src_host != f.key.dst_host for f in flows)


def test_randx_numbers_repeated_pairs(topo4) -> None:
    flows = generate(parse_pattern("randx:8"), topo4, np.random.default_rng(4))
    assert len(flows) == 16 * 8
    keys = [f.key for f in flows]
    assert len(set(keys)) == len(keys)
    assert any(k.flow_serial > 0 for k in keys)


def test_staggered_locality_within_three_sigma(topo4) -> None:
    rng = np.random.default_rng(11)
    src = host(1, 0, 0)
    n, p_edge, p_pod = 3000, 0.5, 0.3
    draws = [staggered_destination(topo4, src, p_edge, p_pod, rng) for _ in range(n)]
    same_edge = sum(d.indices[:2] == (1, 0) for d in draws)
    same_pod = sum(d.indices[0] == 1 and d.indices[1] != 0 for d in draws)
    for observed, p in ((same_edge, p_edge), (same_pod, p_pod)):
        dist = stats.binom(n, p)
        assert abs(observed - dist.mean()) <= 3 * dist.std()
    assert src not in draws


def test_patterns_are_deterministic_per_seed(topo4) -> None:
    def dsts(seed):
        flows = generate(parse_pattern("randx:2"), topo4, np.random.default_rng(seed))
        return [f.key for f in flows]

    assert dsts(3) == dsts(3)
    assert dsts(3) != dsts(4)


def test_shuffle_job_walks_every_sender_once(topo4) -> None:
    initial, job = workload(parse_pattern("shuffle:1MB"), topo4, np.random.default_rng(1))
    assert isinstance(job, ShuffleJob)
    assert len(initial) == 16
    assert job.total_transfers == 240
    assert job.total_bytes == 240 * 1_000_000
    for receiver in topo4.hosts:
        seen = {k.src_host for k in (s.key for s in initial) if k.dst_host == receiver}
        while (key := job.next_shuffle_transfer(receiver, 5)) is not None:
            seen.add(key.src_host)
        assert seen == set(topo4.hosts) - {receiver}
    assert job.finished
    assert set(job.completed_at.values()) == {5}
