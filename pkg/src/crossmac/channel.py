"""Propagation and reception physics.

Log-distance path loss with per-pair log-normal shadowing, per-receiver
received powers, piecewise-constant interference with min-segment SINR,
capture, and carrier sense. The Radio class is the per-node receive chain
(lock-on, capture, abort, verdict accounting) that the MAC layer sits on.

Shadowing is a static symmetric draw per node pair: it models obstacles
between two positions, which do not flicker frame to frame. A learned power
level therefore stays valid until somebody moves.

Propagation delay is not modeled: at sub-kilometer ranges it is below the
microsecond scale of every MAC timing, so arrival order equals transmit order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BelowReferenceDistance, RadioBusy, UnknownSignal
from .frames import ACK, ACK_BYTES, CTS, CTS_BYTES, DATA, GCP_REPORT, RTS, RTS_BYTES, Frame

# Reception verdicts; exactly one per (receiver, signal) pair the receiver observed.
DECODED = "decoded"
COLLISION_LOSS = "collision"
BELOW_SENSITIVITY = "below_sensitivity"
CAPTURED = "captured"
ABORTED_TX_LOCAL = "aborted_local"

# Idle reports are withheld this long and back-dated on confirmation: an idle
# gap shorter than a backoff slot cannot advance any MAC timer, so sub-slot
# blips (the SIFS between a frame and its ACK) need never reach the MAC at
# all. Must sit strictly between SIFS (10 us) and one slot (20 us).
IDLE_HOLD_NS = 15_000


def dbm_from_w(watts: float) -> float:
    return 10.0 * math.log10(watts * 1e3)


def w_from_dbm(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1e3


def mw_from_dbm(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def dbm_from_mw(mw: float) -> float:
    return 10.0 * math.log10(mw)


@dataclass(slots=True)
class ChannelParams:
    rho: float = 3.0
    sigma_db: float = 6.0
    d0_m: float = 1.0
    pl_d0_db: float = 40.0
    noise_floor_dbm: float = -96.0
    cs_threshold_dbm: float = -85.0
    sinr_threshold_db: float = 22.05
    capture_threshold_db: float = 10.0
    # Signals weaker than cs_threshold - notify_margin at a node are tracked for
    # SINR but do not generate busy/idle edges there (speed/fidelity trade).
    notify_margin_db: float = 10.0

    def validate(self) -> None:
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.sigma_db < 0:
            raise ValueError("sigma_db must be >= 0")
        if self.d0_m <= 0:
            raise ValueError("d0_m must be > 0")
        for name in ("sinr_threshold_db", "capture_threshold_db"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(slots=True)
class PhyTimings:
    """802.11b-shaped airtime model: long preamble at 1 Mb/s, control at 2 Mb/s."""

    preamble_ns: int = 192_000
    data_rate_bps: int = 11_000_000
    ctrl_rate_bps: int = 2_000_000
    mac_header_bytes: int = 28

    def validate(self) -> None:
        if self.data_rate_bps <= 0 or self.ctrl_rate_bps <= 0:
            raise ValueError("bit rates must be > 0")
        if self.preamble_ns < 0 or self.mac_header_bytes < 0:
            raise ValueError("preamble and header must be >= 0")

    def payload_airtime_ns(self, payload_bytes: int) -> int:
        bits = payload_bytes * 8
        return -(-bits * 1_000_000_000 // self.data_rate_bps)

    def airtime_ns(self, frame: Frame) -> int:
        if frame.kind in (DATA, GCP_REPORT):
            bits = (self.mac_header_bytes + frame.payload_bytes) * 8
            return self.preamble_ns + -(-bits * 1_000_000_000 // self.data_rate_bps)
        if frame.kind in (ACK, CTS):
            bits = ACK_BYTES * 8 if frame.kind == ACK else CTS_BYTES * 8
        elif frame.kind == RTS:
            bits = RTS_BYTES * 8
        else:
            raise ValueError(f"unknown frame kind {frame.kind}")
        return self.preamble_ns + -(-bits * 1_000_000_000 // self.ctrl_rate_bps)


def path_loss_db(d_m: float, params: ChannelParams) -> float:
    """Log-distance path loss PL(d0) + 10*rho*log10(d/d0). Strictly increasing in d."""
    if d_m < params.d0_m:
        raise BelowReferenceDistance(f"d={d_m} below reference {params.d0_m}")
    return params.pl_d0_db + 10.0 * params.rho * math.log10(d_m / params.d0_m)


def rx_power_dbm(tx_power_dbm: float, d_m: float, shadow_db: float, params: ChannelParams) -> float:
    """Received power: tx - PL(d) - shadow. shadow is one draw per (tx, rx) pair."""
    return tx_power_dbm - path_loss_db(d_m, params) - shadow_db


class SignalEvent:
    """A frame in flight: per-receiver powers over [start, end)."""

    __slots__ = (
        "frame", "tx_node", "start", "end", "tx_power_dbm",
        "rx_dbm", "rx_mw", "observers", "verdicts", "end_event", "overlaps",
        "locked",
    )

    def __init__(self, frame, tx_node, start, end, tx_power_dbm, rx_dbm, rx_mw, observers):
        self.frame = frame
        self.tx_node = tx_node
        self.start = start
        self.end = end
        self.tx_power_dbm = tx_power_dbm
        self.rx_dbm = rx_dbm
        self.rx_mw = rx_mw
        self.observers = observers
        self.verdicts: dict = {}
        self.end_event = -1
        self.overlaps = None  # registry filter, shared by this signal's receivers
        self.locked: list = []  # nodes that locked on; checked against lock at end


class Radio:
    """Per-node receive chain: lock-on at frame start, capture relock, SINR verdict.

    The MAC layer plugs in three hooks: medium_hook(busy, now) on busy/idle
    edges, decode_hook(sig, now) on successful decode, and verdict_hook for
    metric accounting. nav_until is written by the MAC (virtual carrier sense
    from RTS/CTS duration fields).

    Busy-power bookkeeping lives in channel-wide vectors; the radio carries
    only the lock state and is dispatched solely for signals it can actually
    hear (at or above carrier sense) or events that flip its medium state.
    """

    __slots__ = (
        "node", "channel", "lock", "transmitting",
        "medium_hook", "decode_hook", "verdict_hook",
        "power_state_hook", "alive", "_capture_db",
    )

    def __init__(self, node: int, channel: "Channel"):
        self.node = node
        self.channel = channel
        self._capture_db = channel.params.capture_threshold_db
        self.lock: Optional[SignalEvent] = None
        self.transmitting = False
        self.alive = True
        self.medium_hook: Callable[[bool, int], None] = lambda busy, now: None
        self.decode_hook: Callable[[SignalEvent, int], None] = lambda sig, now: None
        self.verdict_hook: Callable[[SignalEvent, str, int], None] = lambda sig, v, now: None
        # fires when the TX/RX/IDLE draw state may have changed (energy model)
        self.power_state_hook: Optional[Callable[[int], None]] = None

    # -- state views ----------------------------------------------------------

    @property
    def busy_mw(self) -> float:
        return float(self.channel.busy_mw_vec[self.node])

    @property
    def medium_busy(self) -> bool:
        """Medium state as reported to the MAC (idle blips still withheld)."""
        return bool(self.channel.reported_busy[self.node])

    @property
    def nav_until(self) -> int:
        return int(self.channel.nav_until_vec[self.node])

    @nav_until.setter
    def nav_until(self, value: int) -> None:
        self.channel.nav_until_vec[self.node] = value

    def is_busy(self, now: int) -> bool:
        # The reported term keeps access decisions consistent with the edge
        # stream: a withheld idle blip must not open an access window the
        # medium hooks never announced.
        ch = self.channel
        i = self.node
        return bool(
            ch.reported_busy[i]
            or self.transmitting
            or now < ch.nav_until_vec[i]
            or ch.busy_mw_vec[i] >= ch.busy_thr_mw
        )

    def refresh_medium(self, now: int) -> None:
        ch = self.channel
        i = self.node
        busy = bool(
            self.transmitting
            or now < ch.nav_until_vec[i]
            or ch.busy_mw_vec[i] >= ch.busy_thr_mw
        )
        if busy != ch.medium_busy_vec[i]:
            ch.medium_busy_vec[i] = busy
            ch._flip_one(i, busy, now)

    # -- receive chain (called by the channel for audible signals) -------------

    def start_reception(self, sig: SignalEvent, now: int) -> None:
        if self.lock is None:
            self.lock = sig
            sig.locked.append(self.node)
            if self.power_state_hook is not None:
                self.power_state_hook(now)
        # capture: a sufficiently stronger later arrival steals the receiver
        elif sig.rx_dbm[self.node] >= self.lock.rx_dbm[self.node] + self._capture_db:
            old = self.lock
            old.verdicts[self.node] = CAPTURED
            self.verdict_hook(old, CAPTURED, now)
            self.lock = sig
            sig.locked.append(self.node)
        else:
            sig.verdicts[self.node] = COLLISION_LOSS
            self.verdict_hook(sig, COLLISION_LOSS, now)

    def finish_reception(self, sig: SignalEvent, now: int) -> None:
        self.lock = None
        if self.power_state_hook is not None:
            self.power_state_hook(now)
        sinr = self.channel.min_sinr_db(self.node, sig, sig.start, sig.end)
        if sinr >= self.channel.params.sinr_threshold_db:
            sig.verdicts[self.node] = DECODED
            self.verdict_hook(sig, DECODED, now)
            self.decode_hook(sig, now)
        else:
            sig.verdicts[self.node] = COLLISION_LOSS
            self.verdict_hook(sig, COLLISION_LOSS, now)

    # -- local transmit / death ---------------------------------------------

    def begin_local_tx(self, now: int) -> None:
        if self.lock is not None:
            self.lock.verdicts[self.node] = ABORTED_TX_LOCAL
            self.verdict_hook(self.lock, ABORTED_TX_LOCAL, now)
            self.lock = None
        self.transmitting = True
        self.channel.transmitting_vec[self.node] = True
        if self.power_state_hook is not None:
            self.power_state_hook(now)
        self.refresh_medium(now)

    def end_local_tx(self, now: int) -> None:
        self.transmitting = False
        self.channel.transmitting_vec[self.node] = False
        if self.power_state_hook is not None:
            self.power_state_hook(now)
        self.refresh_medium(now)

    def shut_down(self, now: int) -> None:
        """Radio off (node death): abort any in-progress reception."""
        self.alive = False
        if self.lock is not None:
            self.lock.verdicts[self.node] = ABORTED_TX_LOCAL
            self.verdict_hook(self.lock, ABORTED_TX_LOCAL, now)
            self.lock = None
        if self.power_state_hook is not None:
            self.power_state_hook(now)


class Channel:
    """Shared medium: signal registry, per-receiver power computation, dispatch.

    Receivers are notified of signal start/end edges only when the signal's
    power at them clears cs_threshold - notify_margin; weaker signals still
    count toward SINR through the registry, which min_sinr_db scans exactly.

    Edge dispatch is two-tier: busy power and medium state update as vectors
    over the observer set, then per-node python runs only for receivers the
    signal is audible to (lock/capture/decode), for nodes whose busy/idle
    state actually crossed, and for open noise-sampling taps. Faint signals
    are bulk-recorded as below-sensitivity without a verdict callback.
    """

    def __init__(self, kernel, params: ChannelParams, phy: PhyTimings,
                 positions: np.ndarray, shadow_rngs):
        params.validate()
        self.kernel = kernel
        self.params = params
        self.phy = phy
        self.positions = np.asarray(positions, dtype=float)
        self.n = len(self.positions)
        if params.sigma_db > 0.0:
            tri = np.zeros((self.n, self.n))
            for i, rng in enumerate(shadow_rngs):
                row = rng.normal(0.0, params.sigma_db, self.n)
                tri[i, i + 1:] = row[i + 1:]
            self.shadow_db = tri + tri.T  # reciprocal: obstacles cut both ways
        else:
            self.shadow_db = None
        self.noise_mw = mw_from_dbm(params.noise_floor_dbm)
        self.cs_mw = mw_from_dbm(params.cs_threshold_dbm)
        self.busy_thr_mw = self.cs_mw - self.noise_mw
        self.notify_floor_dbm = params.cs_threshold_dbm - params.notify_margin_db
        # per-node medium state, vectorized so signal edges touch python only
        # where something actually changed
        self.busy_mw_vec = np.zeros(self.n)
        self.medium_busy_vec = np.zeros(self.n, dtype=bool)  # physical state
        self.reported_busy = np.zeros(self.n, dtype=bool)    # state the MACs saw
        self.transmitting_vec = np.zeros(self.n, dtype=bool)
        self.nav_until_vec = np.zeros(self.n, dtype=np.int64)
        self._idle_pending: dict[int, int] = {}  # node -> withheld idle edge time
        self.samplers: dict[int, Callable[[float], None]] = {}  # noise-window taps
        self.radios = [Radio(i, self) for i in range(self.n)]
        self.alive = np.ones(self.n, dtype=bool)
        self.tx_active = [None] * self.n  # node -> in-flight SignalEvent
        self.signals: list[SignalEvent] = []  # active + recently ended
        self.tx_complete_hooks: list[Callable[[SignalEvent, int], None]] = [
            lambda sig, now: None for _ in range(self.n)
        ]
        self._pl_cache: Optional[np.ndarray] = None
        self._keep_ns = 0  # registry retention horizon, grows with longest airtime

    # -- geometry ------------------------------------------------------------

    def _pl_matrix(self) -> np.ndarray:
        if self._pl_cache is None:
            d = np.hypot(
                self.positions[:, 0][:, None] - self.positions[:, 0][None, :],
                self.positions[:, 1][:, None] - self.positions[:, 1][None, :],
            )
            np.maximum(d, self.params.d0_m, out=d)
            self._pl_cache = self.params.pl_d0_db + 10.0 * self.params.rho * np.log10(d / self.params.d0_m)
        return self._pl_cache

    def move_node(self, node: int, xy) -> None:
        self.positions[node] = xy
        self._pl_cache = None

    # -- transmission --------------------------------------------------------

    def begin_transmission(self, frame: Frame, tx_node: int, tx_power_dbm: float, now: int) -> SignalEvent:
        if self.tx_active[tx_node] is not None:
            raise RadioBusy(f"node {tx_node} already transmitting")
        dur = self.phy.airtime_ns(frame)
        if dur > self._keep_ns:
            self._keep_ns = dur
        pl = self._pl_matrix()[tx_node]
        rx_dbm = tx_power_dbm - pl
        if self.shadow_db is not None:
            rx_dbm = rx_dbm - self.shadow_db[tx_node]
        else:
            rx_dbm = rx_dbm.copy()
        rx_dbm[tx_node] = tx_power_dbm
        rx_mw = 10.0 ** (rx_dbm * 0.1)
        mask = (rx_dbm >= self.notify_floor_dbm) & self.alive
        mask[tx_node] = False
        observers = np.nonzero(mask)[0]
        sig = SignalEvent(frame, tx_node, now, now + dur, tx_power_dbm, rx_dbm, rx_mw, observers)
        self._prune(now)
        self.signals.append(sig)
        self.tx_active[tx_node] = sig
        self.radios[tx_node].begin_local_tx(now)
        if observers.size:
            radios = self.radios
            bm = self.busy_mw_vec
            bm[observers] += rx_mw[observers]
            if self.samplers:
                for i, tap in self.samplers.items():
                    if mask[i]:
                        tap(float(bm[i]))
            verdicts = sig.verdicts
            tx_flags = self.transmitting_vec[observers]
            audible = rx_dbm[observers] >= self.params.cs_threshold_dbm
            if tx_flags.any():
                for i in observers[tx_flags].tolist():
                    verdicts[i] = ABORTED_TX_LOCAL
                    radios[i].verdict_hook(sig, ABORTED_TX_LOCAL, now)
                audible &= ~tx_flags
            for i in observers[audible].tolist():
                radios[i].start_reception(sig, now)
            faint = observers[~(audible | tx_flags)]
            for i in faint.tolist():
                verdicts[i] = BELOW_SENSITIVITY
            self._dispatch_flips(observers, now)
        sig.end_event = self.kernel.schedule(sig.end, self._end, sig, target="channel", kind="sig_end")
        return sig

    def truncate_transmission(self, sig: SignalEvent, now: int) -> None:
        """Cut a transmission short (transmitter died mid-frame)."""
        if self.tx_active[sig.tx_node] is not sig:
            return
        self.kernel.cancel(sig.end_event)
        sig.end = now
        self._end(sig)

    def _end(self, sig: SignalEvent) -> None:
        now = self.kernel.now
        self.tx_active[sig.tx_node] = None
        # every locked receiver scans the same interval; filter the registry once
        sig.overlaps = [o for o in self.signals
                        if o is not sig and o.start < sig.end and o.end > sig.start]
        self.radios[sig.tx_node].end_local_tx(now)
        observers = sig.observers
        if observers.size:
            radios = self.radios
            bm = self.busy_mw_vec
            left = bm[observers] - sig.rx_mw[observers]
            left[left < 1e-30] = 0.0
            bm[observers] = left
            if self.samplers:
                for i, tap in self.samplers.items():
                    at = np.searchsorted(observers, i)
                    if at < observers.size and observers[at] == i:
                        tap(float(bm[i]))
            for i in sig.locked:
                radio = radios[i]
                if radio.lock is sig:
                    radio.finish_reception(sig, now)
            self._dispatch_flips(observers, now)
        self.tx_complete_hooks[sig.tx_node](sig, now)

    def _dispatch_flips(self, observers: np.ndarray, now: int) -> None:
        """Recompute medium busy/idle over observers; notify only the crossings.

        Busy crossings dispatch immediately. Idle crossings are withheld for
        IDLE_HOLD_NS: if the medium turns busy again first (a sub-slot blip),
        the MAC hears nothing; otherwise the idle report arrives back-dated
        to the true edge, so every DIFS and backoff deadline computed from it
        is identical to eager dispatch.
        """
        new_busy = (
            (self.busy_mw_vec[observers] >= self.busy_thr_mw)
            | self.transmitting_vec[observers]
            | (self.nav_until_vec[observers] > now)
        )
        changed = new_busy != self.medium_busy_vec[observers]
        if changed.any():
            flipped = observers[changed]
            self.medium_busy_vec[flipped] = new_busy[changed]
            radios = self.radios
            pending = self._idle_pending
            reported = self.reported_busy
            went_idle = None
            for i, busy in zip(flipped.tolist(), new_busy[changed].tolist()):
                if busy:
                    if pending.pop(i, None) is None:
                        reported[i] = True
                        radios[i].medium_hook(True, now)
                else:
                    pending[i] = now
                    if went_idle is None:
                        went_idle = [i]
                    else:
                        went_idle.append(i)
            if went_idle is not None:
                self.kernel.schedule(now + IDLE_HOLD_NS, self._confirm_idle,
                                     (now, went_idle), target="channel", kind="idle")

    def _flip_one(self, node: int, busy: bool, now: int) -> None:
        """Single-node physical crossing (local tx edges, NAV refresh)."""
        if busy:
            if self._idle_pending.pop(node, None) is None:
                self.reported_busy[node] = True
                self.radios[node].medium_hook(True, now)
        else:
            self._idle_pending[node] = now
            self.kernel.schedule(now + IDLE_HOLD_NS, self._confirm_idle,
                                 (now, (node,)), target="channel", kind="idle")

    def _confirm_idle(self, stamp_batch) -> None:
        edge_time, batch = stamp_batch
        pending = self._idle_pending
        radios = self.radios
        reported = self.reported_busy
        for i in batch:
            if pending.get(i) == edge_time:
                del pending[i]
                reported[i] = False
                radios[i].medium_hook(False, edge_time)

    def _prune(self, now: int) -> None:
        if len(self.signals) > 64:
            horizon = now - 2 * self._keep_ns
            self.signals = [s for s in self.signals if s.end > horizon]

    # -- queries ---------------------------------------------------------------

    def sinr_db(self, receiver: int, sig: SignalEvent, t0: int, t1: int) -> float:
        """Minimum-segment SINR of sig at receiver over [t0, t1) in dB."""
        if sig not in self.signals:
            raise UnknownSignal(f"signal from node {sig.tx_node} not on channel")
        return self.min_sinr_db(receiver, sig, t0, t1)

    def min_sinr_db(self, receiver: int, sig: SignalEvent, t0: int, t1: int) -> float:
        s_mw = sig.rx_mw[receiver]
        base = 0.0
        edges = None
        pool = self.signals
        if sig.overlaps is not None and t0 >= sig.start and t1 <= sig.end:
            pool = sig.overlaps
        for other in pool:
            if other is sig or other.start >= t1 or other.end <= t0:
                continue
            p = other.rx_mw[receiver]
            if other.start <= t0:
                base += p
            else:
                if edges is None:
                    edges = []
                edges.append((other.start, p))
            if other.end < t1:
                if edges is None:
                    edges = []
                edges.append((other.end, -p))
        max_i = level = base
        if edges is not None:
            edges.sort()
            for _, delta in edges:
                level += delta
                if level > max_i:
                    max_i = level
        return 10.0 * math.log10(s_mw / (self.noise_mw + max_i))

    def carrier_sense(self, node: int, now: int) -> bool:
        """True (busy) iff transmitting or total in-band power clears the threshold."""
        if self.tx_active[node] is not None:
            return True
        total = self.noise_mw
        for s in self.signals:
            if s.start <= now < s.end and s.tx_node != node:
                total += s.rx_mw[node]
        return bool(total >= self.cs_mw)

    def reception_outcome(self, receiver: int, sig: SignalEvent) -> Optional[str]:
        """Verdict for a fully elapsed signal at receiver; None if never observed."""
        return sig.verdicts.get(receiver)
