"""Deterministic discrete-event engine: integer-nanosecond clock, event queue, seeded streams.

Time is kept as integer nanoseconds so microsecond-scale MAC timings are exact
and replays are bit-identical across platforms. Events are totally ordered by
(fire_at, seq); seq is the insertion sequence number, which doubles as the
event id for cancellation.
"""

from __future__ import annotations

import heapq
from typing import Any, Callable, Optional

import numpy as np

from .errors import HandlerPanic, PastTime

# Tick helpers: 1 tick = 1 ns.
US = 1_000
MS = 1_000_000
SEC = 1_000_000_000


def ticks_from_s(seconds: float) -> int:
    return round(seconds * SEC)


def s_from_ticks(ticks: int) -> float:
    return ticks / SEC


# Named random streams. Each (master_seed, node, purpose) triple maps to an
# independent generator; the derivation is order-insensitive, so handlers may
# create streams lazily without perturbing each other.
PURPOSES = ("backoff", "shadowing", "traffic", "mobility", "selector", "placement")
_PURPOSE_INDEX = {name: i for i, name in enumerate(PURPOSES)}


def derive_stream(master_seed: int, node: int, purpose: str) -> np.random.Generator:
    """Return the generator for the (master_seed, node, purpose) triple."""
    idx = _PURPOSE_INDEX[purpose]
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(node, idx))
    return np.random.Generator(np.random.PCG64(ss))


class Kernel:
    """Single-run event queue. One instance per simulation run; never shared."""

    __slots__ = ("now", "_heap", "_live", "_seq", "_running", "trace")

    def __init__(self) -> None:
        self.now: int = 0
        self._heap: list = []
        self._live: dict = {}
        self._seq: int = 0
        self._running = False
        self.trace = None  # optional writable for the event-log dump

    def schedule(
        self,
        fire_at: int,
        callback: Callable[[Any], None],
        arg: Any = None,
        target: str = "",
        kind: str = "",
    ) -> int:
        """Enqueue callback(arg) at fire_at ticks. Returns the event id."""
        if fire_at < self.now:
            raise PastTime(f"schedule at {fire_at} before clock {self.now}")
        self._seq += 1
        seq = self._seq
        entry = [fire_at, seq, callback, arg, target, kind]
        self._live[seq] = entry
        heapq.heappush(self._heap, entry)
        return seq

    def cancel(self, event_id: int) -> bool:
        """Remove a pending event. False if it already fired, was cancelled, or is unknown."""
        entry = self._live.pop(event_id, None)
        if entry is None:
            return False
        entry[2] = None  # lazily discarded when popped
        return True

    def run_until(self, t_end: int) -> int:
        """Process every event with fire_at <= t_end in (fire_at, seq) order.

        The clock lands exactly on t_end. Handler exceptions surface as
        HandlerPanic carrying the failing event's identity.
        """
        if self._running:
            raise RuntimeError("kernel is already running")
        self._running = True
        processed = 0
        heap = self._heap
        live = self._live
        trace = self.trace
        try:
            while heap and heap[0][0] <= t_end:
                fire_at, seq, callback, arg, target, kind = heapq.heappop(heap)
                if callback is None:
                    continue  # cancelled
                del live[seq]
                self.now = fire_at
                if trace is not None:
                    trace.write(f"{fire_at}\t{seq}\t{target}\t{kind}\n")
                try:
                    callback(arg)
                except Exception as exc:
                    raise HandlerPanic(
                        f"handler {target or callback!r} failed at tick {fire_at} (seq {seq}): {exc}",
                        tick=fire_at,
                        seq=seq,
                        target=target or repr(callback),
                    ) from exc
                processed += 1
            self.now = t_end
        finally:
            self._running = False
        return processed

    def pending(self) -> int:
        return len(self._live)
