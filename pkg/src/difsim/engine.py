"""Deterministic discrete-event engine.

Provides the integer-nanosecond clock, the event queue and the named random
streams every other component draws from.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import zlib
from collections import deque
from typing import Any, Callable, Deque, Dict, List, Tuple

import numpy as np

from difsim.types import SimTime

ECMP_HASH_SALT = "ecmp-hash-salt"
DIFS_TIEBREAK = "difs-tiebreak"
TRAFFIC_GEN = "traffic-gen"
EAR_TARGET_PICK = "ear-target-pick"

TRACE_TAIL = 64


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current time."""

    def __init__(self, message: str, trace_tail: List[Tuple[SimTime, int, str]]):
        super().__init__(message)
        self.trace_tail = trace_tail


class Event:
    """A scheduled callback.

    Events order by ``(fire_at, seq)``; ``seq`` is unique, so ties on
    ``fire_at`` dispatch in scheduling order.
    """

    __slots__ = ("fire_at", "seq", "action", "args", "cancelled")

    def __init__(self, fire_at: SimTime, seq: int, action: Callable[..., Any], args: tuple):
        self.fire_at = fire_at
        self.seq = seq
        self.action = action
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        """Prevent the event from firing."""
        self.cancelled = True

    @property
    def label(self) -> str:
        return getattr(self.action, "__qualname__", repr(self.action))

    def __repr__(self) -> str:
        return f"Event(fire_at={self.fire_at}, seq={self.seq}, action={self.label})"


class RandomStreams:
    """Independent, reproducible random streams keyed by a label."""

    def __init__(self, seed: int):
        self.seed = seed & 0xFFFF_FFFF_FFFF_FFFF
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, stream_id: str) -> np.random.Generator:
        """Return the generator for ``stream_id``, creating it on first use."""
        gen = self._streams.get(stream_id)
        if gen is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(stream_id.encode()),))
            gen = np.random.Generator(np.random.PCG64(seq))
            self._streams[stream_id] = gen
        return gen

    def __getitem__(self, stream_id: str) -> np.random.Generator:
        return self.stream(stream_id)


class Simulator:
    """Single-timeline event loop.

    Args:
        seed: Run seed for all random streams.
        record_trace: Keep a blake2b digest of the dispatch sequence.
    """

    def __init__(self, seed: int = 0, record_trace: bool = False):
        self.now: SimTime = 0
        self.streams = RandomStreams(seed)
        self.dispatched = 0
        self._queue: List[Tuple[SimTime, int, Event]] = []
        self._counter = itertools.count()
        self._tail: Deque[Event] = deque(maxlen=TRACE_TAIL)
        self._digest = hashlib.blake2b(digest_size=16) if record_trace else None

    def schedule(self, fire_at: SimTime, action: Callable[..., Any], *args: Any) -> Event:
        """Enqueue ``action(*args)`` to run at ``fire_at``.

        Raises:
            SchedulingError: if ``fire_at`` lies before the current time.
        """
        if fire_at < self.now:
            raise SchedulingError(
                f"event scheduled at {fire_at} ns from {self.now} ns", self.trace_tail()
            )
        ev = Event(fire_at, next(self._counter), action, args)
        heapq.heappush(self._queue, (fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay: SimTime, action: Callable[..., Any], *args: Any) -> Event:
        """Enqueue ``action(*args)`` to run ``delay`` nanoseconds from now."""
        return self.schedule(self.now + delay, action, *args)

    def run_until(self, deadline: SimTime) -> SimTime:
        """Dispatch every event with ``fire_at <= deadline``.

        Returns:
            The final clock value, which equals ``deadline``.
        """
        queue = self._queue
        tail = self._tail
        digest = self._digest
        while queue and queue[0][0] <= deadline:
            fire_at, seq, ev = heapq.heappop(queue)
            if ev.cancelled:
                continue
            self.now = fire_at
            self.dispatched += 1
            tail.append(ev)
            if digest is not None:
                digest.update(fire_at.to_bytes(8, "little") + seq.to_bytes(8, "little"))
            ev.action(*ev.args)
        if deadline > self.now:
            self.now = deadline
        return self.now

    @property
    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def trace_tail(self) -> List[Tuple[SimTime, int, str]]:
        """Last dispatched ``(fire_at, seq, action)`` triples."""
        return [(ev.fire_at, ev.seq, ev.label) for ev in self._tail]

    def trace_digest(self) -> str | None:
        """Hex digest of the dispatch trace, if recording."""
        return self._digest.hexdigest() if self._digest is not None else None
