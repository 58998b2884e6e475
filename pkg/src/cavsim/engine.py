"""Discrete-event core: integer-microsecond clock, FIFO-on-tie event queue and
named random streams derived from one master seed."""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

# SimTime is a plain int holding microseconds since simulation start.
SimTime = int

US_PER_S = 1_000_000
US_PER_MS = 1_000


def seconds(s: float) -> SimTime:
    """Convert seconds to the nearest whole microsecond."""
    return int(round(s * US_PER_S))


def millis(ms: float) -> SimTime:
    return int(round(ms * US_PER_MS))


def to_seconds(t: SimTime) -> float:
    return t / US_PER_S


class CausalityError(RuntimeError):
    """An event was scheduled in the past."""


@dataclass(slots=True)
class Event:
    fire_at: SimTime
    target: Callable[..., Any]
    payload: tuple = ()
    seq: int = -1
    cancelled: bool = False

    def cancel(self) -> None:
        # tombstone; the queue skips it on pop
        self.cancelled = True


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def derive_seed(master_seed: int, *keys: int | str) -> int:
    """Deterministic 63-bit child seed for sweep runs and sub-streams."""
    ints = [label_hash(k) if isinstance(k, str) else int(k) for k in keys]
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(ints))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class Simulator:
    """Single-threaded event loop.

    Events with equal ``fire_at`` run in the order they were scheduled. Events
    past the horizon stay queued and never execute.
    """

    seed: int = 0
    horizon: SimTime | None = None
    record_log: bool = False
    _now: SimTime = 0
    _seq: int = 0
    _queue: list = field(default_factory=list)
    _streams: dict = field(default_factory=dict)
    executed: int = 0
    scheduled: int = 0
    log: list = field(default_factory=list)

    @property
    def now(self) -> SimTime:
        return self._now

    def schedule(self, event: Event) -> Event:
        if event.fire_at < self._now:
            raise CausalityError(
                f"event at {event.fire_at} us scheduled while clock is at {self._now} us"
            )
        event.seq = self._seq
        self._seq += 1
        self.scheduled += 1
        heapq.heappush(self._queue, (event.fire_at, event.seq, event))
        return event

    def at(self, t: SimTime, target: Callable[..., Any], *payload: Any) -> Event:
        return self.schedule(Event(int(t), target, payload))

    def after(self, delay: SimTime, target: Callable[..., Any], *payload: Any) -> Event:
        return self.schedule(Event(self._now + int(delay), target, payload))

    def pending(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def run_until(self, t: SimTime) -> int:
        """Execute every event with ``fire_at <= t`` and leave the clock at ``t``."""
        if t < self._now:
            raise CausalityError(f"run_until({t}) is before now ({self._now})")
        if self.horizon is not None:
            t = min(t, self.horizon)
        queue = self._queue
        pop = heapq.heappop
        count = 0
        log = self.log if self.record_log else None
        while queue and queue[0][0] <= t:
            fire_at, seq, ev = pop(queue)
            if ev.cancelled:
                continue
            self._now = fire_at
            if log is not None:
                log.append((fire_at, seq, getattr(ev.target, "__qualname__", repr(ev.target))))
            ev.target(*ev.payload)
            count += 1
        self._now = max(self._now, t)
        self.executed += count
        return count

    def rng(self, label: str) -> np.random.Generator:
        """Named stream; the same label always continues the same sequence."""
        gen = self._streams.get(label)
        if gen is None:
            ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(label_hash(label),))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[label] = gen
        return gen
