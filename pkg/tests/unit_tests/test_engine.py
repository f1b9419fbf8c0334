import pytest

from difsim.engine import (
    DIFS_TIEBREAK,
    TRAFFIC_GEN,
    RandomStreams,
    SchedulingError,
    Simulator,
)


def test_events_fire_in_time_then_fifo_order() -> None:
    sim = Simulator()
    fired = []
    sim.schedule(30, fired.append, "c")
    sim.schedule(10, fired.append, "a")
    sim.schedule(10, fired.append, "b")
    sim.schedule(20, fired.append, "x")
    sim.run_until(100)
    assert fired == ["a", "b", "x", "c"]
    assert sim.now == 100
    assert sim.dispatched == 4


def test_run_until_leaves_later_events_pending() -> None:
    sim = Simulator()
    fired = []
    sim.schedule(5, fired.append, 1)
    sim.schedule(50, fired.append, 2)
    assert sim.run_until(10) == 10
    assert fired == [1]
    assert sim.pending == 1
    sim.run_until(50)
    assert fired == [1, 2]


def test_events_scheduled_from_handlers() -> None:
    sim = Simulator()
    times = []

    def tick() -> None:
        times.append(sim.now)
        if len(times) < 3:
            sim.schedule_in(7, tick)

    sim.schedule(0, tick)
    sim.run_until(1000)
    assert times == [0, 7, 14]


def test_cancelled_event_does_not_fire() -> None:
    sim = Simulator()
    fired = []
    ev = sim.schedule(10, fired.append, "gone")
    ev.cancel()
    sim.run_until(20)
    assert fired == []
    assert sim.pending == 0


def test_scheduling_in_the_past_raises_with_trace_tail() -> None:
    sim = Simulator()
    sim.schedule(10, lambda: None)
    sim.run_until(10)
    with pytest.raises(SchedulingError) as info:
        sim.schedule(5, lambda: None)
    assert info.value.trace_tail
    assert info.value.trace_tail[-1][0] == 10


def test_random_streams_are_reproducible_and_independent() -> None:
    a = RandomStreams(99)
    b = RandomStreams(99)
    assert list(a[TRAFFIC_GEN].integers(1000, size=5)) == list(b[TRAFFIC_GEN].integers(1000, size=5))
    # drawing from one stream leaves the others untouched
    c = RandomStreams(99)
    c[DIFS_TIEBREAK].random(100)
    d = RandomStreams(99)
    assert c[TRAFFIC_GEN].random() == d[TRAFFIC_GEN].random()
    assert RandomStreams(1)[TRAFFIC_GEN].random() != RandomStreams(2)[TRAFFIC_GEN].random()


def test_trace_digest() -> None:
    def run(record: bool) -> Simulator:
        sim = Simulator(seed=3, record_trace=record)
        for t in (5, 1, 5, 9):
            sim.schedule(t, lambda: None)
        sim.run_until(10)
        return sim

    assert run(False).trace_digest() is None
    assert run(True).trace_digest() == run(True).trace_digest()
