"""802.11 DCF medium access: timings, exponential backoff, ACK/retry, RTS/CTS.

Mac is the per-node access state machine. Protocol variants plug in as policy
objects that choose the contention range, transmit power, and post-outcome
state updates: DcfPolicy (standard BEB, fixed power), BasicPcPolicy (BEB plus
a blind power nudge), and the knowledge-driven policy in cla.py.

Backoff is timed with a single fire-at-the-end event instead of per-slot
events; freezes recompute the remaining whole-slot count, and a timer that
fires on the very tick the medium turned busy still commits (stations decide
at the slot boundary, so simultaneous commits must collide on air).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .channel import dbm_from_mw
from .errors import IllegalTransition
from .frames import ACK, BROADCAST, CTS, DATA, RTS, Frame
from .kernel import US

# access-cycle states
IDLE = "idle"
DEFER = "defer"          # frame pending, medium busy, waiting for the idle edge
WAIT_DIFS = "wait_difs"  # medium idle, DIFS timer running
BACKOFF = "backoff"      # counter armed, finish event scheduled
FROZEN = "frozen"        # counter suspended by a busy medium
TX = "tx"
WAIT_ACK = "wait_ack"
WAIT_CTS = "wait_cts"
DEAD = "dead"


@dataclass(slots=True)
class MacTimings:
    slot_us: int = 20
    sifs_us: int = 10
    difs_us: int = 50
    ack_timeout_us: int = 298  # SIFS + ACK airtime + 2 slots
    cts_timeout_us: int = 298
    retry_limit: int = 7
    cw_min: int = 15
    cw_max: int = 1023
    rts_threshold_bytes: int | None = None  # None: basic access (default)
    queue_cap: int = 50

    def validate(self) -> None:
        if self.difs_us != self.sifs_us + 2 * self.slot_us:
            raise ValueError("difs must equal sifs + 2*slot")
        if self.ack_timeout_us * US <= self.sifs_us * US:
            raise ValueError("ack_timeout must exceed sifs + ack airtime")
        if not 0 < self.cw_min <= self.cw_max:
            raise ValueError("need 0 < cw_min <= cw_max")

    @property
    def slot_ns(self) -> int:
        return self.slot_us * US

    @property
    def sifs_ns(self) -> int:
        return self.sifs_us * US

    @property
    def difs_ns(self) -> int:
        return self.difs_us * US

    @property
    def max_stage(self) -> int:
        stage, upper = 0, self.cw_min
        while upper < self.cw_max:
            stage += 1
            upper = min((self.cw_min + 1) * 2**stage - 1, self.cw_max)
        return stage


def beb_next_range(stage: int, cw_min: int = 15, cw_max: int = 1023) -> tuple[int, int]:
    """Standard binary exponential backoff range [0, min((cw_min+1)*2^s - 1, cw_max)]."""
    return 0, min((cw_min + 1) * 2**stage - 1, cw_max)


def backoff_draw(rng, lower: int, upper: int) -> int:
    """Uniform integer in [lower, upper] inclusive from the node's backoff stream."""
    if lower == upper:
        return lower
    return int(rng.integers(lower, upper + 1))


def basic_pc_adjust(tx_power_dbm: float, success: bool,
                    pt_min_dbm: float, pt_max_dbm: float) -> float:
    """Blind baseline: -1 dB on success, +2 dB on failure, clamped to bounds."""
    if success:
        return max(tx_power_dbm - 1.0, pt_min_dbm)
    return min(tx_power_dbm + 2.0, pt_max_dbm)


class DcfPolicy:
    """Plain DCF: BEB ladder, reset-to-0 on success, fixed transmit power."""

    def __init__(self, timings: MacTimings, tx_power_dbm: float):
        self.timings = timings
        self.power_dbm = tx_power_dbm

    def attempt_range(self, stage: int) -> tuple[int, int]:
        return beb_next_range(stage, self.timings.cw_min, self.timings.cw_max)

    def tx_power_dbm(self, dst: int) -> float:
        return self.power_dbm

    def on_ack(self, frame: Frame, noise_mw: list, now: int, stage: int = 0) -> int:
        return 0

    def on_timeout(self, frame: Frame, noise_mw: list, now: int) -> str:
        return "timeout"

    def on_drop(self, stage: int) -> int:
        return 0

    def observe_slots(self, busy: bool, count: int) -> None:
        pass

    def on_overheard(self, frame: Frame, prx_dbm: float, now: int) -> None:
        pass


class BasicPcPolicy(DcfPolicy):
    """DCF plus the blind power nudge: down 1 dB on ACK, up 2 dB on timeout."""

    def __init__(self, timings: MacTimings, pt_min_dbm: float, pt_max_dbm: float):
        super().__init__(timings, pt_max_dbm)
        self.pt_min_dbm = pt_min_dbm
        self.pt_max_dbm = pt_max_dbm

    def on_ack(self, frame: Frame, noise_mw: list, now: int, stage: int = 0) -> int:
        self.power_dbm = basic_pc_adjust(self.power_dbm, True, self.pt_min_dbm, self.pt_max_dbm)
        return 0

    def on_timeout(self, frame: Frame, noise_mw: list, now: int) -> str:
        self.power_dbm = basic_pc_adjust(self.power_dbm, False, self.pt_min_dbm, self.pt_max_dbm)
        return "timeout"


class Mac:
    """One DCF access state machine, driven by radio hooks and kernel timers."""

    __slots__ = (
        "node", "kernel", "channel", "radio", "timings", "policy", "rng",
        "state", "queue", "stage", "retries", "remaining",
        "finish_at", "freeze_tick", "difs_deadline", "gen", "wait_gen", "cts_cleared",
        "busy_obs_since", "noise_mw_samples", "sampling", "_ev_target",
        "deliver_hook", "drop_hook", "ack_hook", "timeout_hook", "trace_hook",
    )

    def __init__(self, node: int, kernel, channel, timings: MacTimings, policy, rng):
        timings.validate()
        self.node = node
        self.kernel = kernel
        self.channel = channel
        self.radio = channel.radios[node]
        self.timings = timings
        self.policy = policy
        self.rng = rng
        self._ev_target = f"mac{node}"
        self.state = IDLE
        self.queue: deque[Frame] = deque()
        self.stage = 0
        self.retries = 0
        self.remaining: int | None = None  # None: next attempt draws afresh
        self.finish_at = 0
        self.freeze_tick = -1
        self.difs_deadline = -1
        self.gen = 0        # invalidates difs/backoff timers
        self.wait_gen = 0   # invalidates ack/cts timers and queued sends
        self.cts_cleared = False
        self.busy_obs_since = -1
        self.noise_mw_samples: list[float] = []
        self.sampling = False
        self.deliver_hook = lambda frame, sig, now: None
        self.drop_hook = lambda frame, reason, now: None
        self.ack_hook = lambda frame, now: None
        self.timeout_hook = lambda frame, label, now: None
        self.trace_hook = None
        self.radio.medium_hook = self._on_medium
        self.radio.decode_hook = self._on_decode
        self.channel.tx_complete_hooks[node] = self._on_tx_complete

    # -- upper-layer interface -------------------------------------------------

    def enqueue(self, frame: Frame) -> bool:
        """Queue a DATA frame; returns False (and counts a drop) when full."""
        if self.state == DEAD:
            return False
        if len(self.queue) >= self.timings.queue_cap:
            self.drop_hook(frame, "queue_full", self.kernel.now)
            return False
        self.queue.append(frame)
        if self.state == IDLE:
            self._start_access(self.kernel.now)
        return True

    def shutdown(self) -> None:
        self.state = DEAD
        self.gen += 1
        self.wait_gen += 1
        self.queue.clear()
        self._set_sampling(False)

    def _set_sampling(self, on: bool) -> None:
        """Open or close the noise-sampling window (a channel-level tap)."""
        if on != self.sampling:
            self.sampling = on
            if on:
                self.channel.samplers[self.node] = self._on_sample
            else:
                self.channel.samplers.pop(self.node, None)

    # -- access cycle ------------------------------------------------------------

    def _start_access(self, now: int) -> None:
        if self.radio.is_busy(now):
            self.state = DEFER
            self.busy_obs_since = now
        else:
            self.state = WAIT_DIFS
            self.gen += 1
            self.difs_deadline = now + self.timings.difs_ns
            self.kernel.schedule(self.difs_deadline, self._difs_done, self.gen,
                                 target=self._ev_target, kind="difs")

    def _on_medium(self, busy: bool, now: int) -> None:
        if busy:
            if self.state == WAIT_DIFS:
                self.gen += 1
                self.state = DEFER
                self.busy_obs_since = now
            elif self.state == BACKOFF:
                left = -(-(self.finish_at - now) // self.timings.slot_ns)
                elapsed = self.remaining - left
                if elapsed:
                    self.policy.observe_slots(False, elapsed)
                self.remaining = left
                self.gen += 1
                self.state = FROZEN
                self.freeze_tick = now
                self.busy_obs_since = now
        else:
            if self.state in (DEFER, FROZEN):
                if self.busy_obs_since >= 0:
                    span = now - self.busy_obs_since
                    self.policy.observe_slots(True, max(1, round(span / self.timings.slot_ns)))
                    self.busy_obs_since = -1
                self.state = WAIT_DIFS
                self.gen += 1
                self.difs_deadline = now + self.timings.difs_ns
                self.kernel.schedule(self.difs_deadline, self._difs_done, self.gen,
                                     target=self._ev_target, kind="difs")

    def _difs_done(self, gen: int) -> None:
        if self.state == DEAD:
            return
        now = self.kernel.now
        # a transmission starting on the expiry tick itself does not void the
        # wait: the station decided at the boundary (that is how collisions form)
        late = (gen != self.gen and self.state == DEFER
                and self.busy_obs_since == now and self.difs_deadline == now)
        if gen != self.gen and not late:
            return
        if not late and self.state != WAIT_DIFS:
            raise IllegalTransition(f"difs expiry in state {self.state}")
        if self.remaining is None:
            lo, hi = self.policy.attempt_range(self.stage)
            self.remaining = backoff_draw(self.rng, lo, hi)
            self._trace("draw", now)
        if self.remaining == 0:
            self._commit_tx(now)
        elif late:
            pass  # drew at the boundary and froze in place; idle edge resumes it
        else:
            self.state = BACKOFF
            self.finish_at = now + self.remaining * self.timings.slot_ns
            self.kernel.schedule(self.finish_at, self._backoff_done, self.gen,
                                 target=self._ev_target, kind="slot0")

    def _backoff_done(self, gen: int) -> None:
        now = self.kernel.now
        if self.state == BACKOFF and gen == self.gen:
            self.policy.observe_slots(False, self.remaining)
            self.remaining = 0
            self._commit_tx(now)
        elif self.state == FROZEN and self.freeze_tick == now and self.remaining == 0:
            # frozen by a transmission starting this very tick: both stations
            # committed at the same slot boundary, so transmit into the collision
            self.busy_obs_since = -1
            self._commit_tx(now)

    def _commit_tx(self, now: int) -> None:
        head = self.queue[0]
        power = self.policy.tx_power_dbm(head.dst)
        use_rts = (
            self.timings.rts_threshold_bytes is not None
            and head.payload_bytes >= self.timings.rts_threshold_bytes
            and not self.cts_cleared
        )
        self.state = TX
        if use_rts:
            phy = self.channel.phy
            dur = (3 * self.timings.sifs_ns
                   + phy.airtime_ns(Frame(CTS, head.dst, self.node, head.seq))
                   + phy.airtime_ns(head)
                   + phy.airtime_ns(Frame(ACK, head.dst, self.node, head.seq)))
            rts = Frame(RTS, self.node, head.dst, head.seq, duration_ns=dur,
                        tx_power_dbm=power)
            self.channel.begin_transmission(rts, self.node, power, now)
            self._trace("tx_rts", now)
        else:
            head.tx_power_dbm = power
            self.noise_mw_samples = [self.radio.busy_mw + self.channel.noise_mw]
            self._set_sampling(True)
            self.channel.begin_transmission(head, self.node, power, now)
            self._trace("tx_data", now)

    def _on_tx_complete(self, sig, now: int) -> None:
        if self.state == DEAD:
            return
        kind = sig.frame.kind
        if kind == RTS:
            self.state = WAIT_CTS
            self.wait_gen += 1
            self.kernel.schedule(now + self.timings.cts_timeout_us * US, self._cts_timeout,
                                 self.wait_gen, target=self._ev_target, kind="cts_to")
        elif kind == DATA and self.queue and sig.frame is self.queue[0]:
            if sig.frame.dst == BROADCAST:
                self._finish_head(success=True, now=now)
            else:
                self.state = WAIT_ACK
                self.wait_gen += 1
                self.kernel.schedule(now + self.timings.ack_timeout_us * US, self._ack_timeout,
                                     self.wait_gen, target=self._ev_target, kind="ack_to")
        # ACK/CTS responses need no follow-up; the idle edge resumes any access

    # -- receive path ---------------------------------------------------------

    def _on_decode(self, sig, now: int) -> None:
        frame = sig.frame
        self.policy.on_overheard(frame, float(sig.rx_dbm[self.node]), now)
        if frame.kind == DATA:
            if frame.dst == self.node:
                ack = Frame(ACK, self.node, frame.src, frame.seq)
                self._schedule_response(ack, sig.end + self.timings.sifs_ns)
                self.deliver_hook(frame, sig, now)
        elif frame.kind == ACK:
            if (frame.dst == self.node and self.state == WAIT_ACK
                    and self.queue and frame.seq == self.queue[0].seq):
                self.wait_gen += 1
                self._set_sampling(False)
                self._finish_head(success=True, now=now)
        elif frame.kind == CTS:
            if (frame.dst == self.node and self.state == WAIT_CTS
                    and self.queue and frame.seq == self.queue[0].seq):
                self.wait_gen += 1
                self.cts_cleared = True
                gen = self.wait_gen
                self.kernel.schedule(sig.end + self.timings.sifs_ns,
                                     lambda _: self._send_data_after_cts(gen),
                                     target=self._ev_target, kind="cts_ok")
            elif frame.dst != self.node and frame.duration_ns:
                self._apply_nav(sig.end + frame.duration_ns, now)
        elif frame.kind == RTS:
            if frame.dst == self.node:
                cts_dur = frame.duration_ns - self.timings.sifs_ns - self.channel.phy.airtime_ns(
                    Frame(CTS, self.node, frame.src, frame.seq))
                cts = Frame(CTS, self.node, frame.src, frame.seq,
                            duration_ns=max(0, cts_dur))
                self._schedule_response(cts, sig.end + self.timings.sifs_ns)
            elif frame.duration_ns:
                self._apply_nav(sig.end + frame.duration_ns, now)

    def _apply_nav(self, until: int, now: int) -> None:
        if until > self.radio.nav_until:
            self.radio.nav_until = until
            self.radio.refresh_medium(now)
            self.kernel.schedule(until, lambda _: self.radio.refresh_medium(self.kernel.now),
                                 target=self._ev_target, kind="nav")

    def _schedule_response(self, frame: Frame, at: int) -> None:
        def fire(_):
            if self.state == DEAD or self.channel.tx_active[self.node] is not None:
                return
            frame.tx_power_dbm = self.policy.tx_power_dbm(frame.dst)
            self.channel.begin_transmission(frame, self.node, frame.tx_power_dbm, self.kernel.now)
            self._trace("tx_" + frame.kind, self.kernel.now)

        self.kernel.schedule(at, fire, target=self._ev_target, kind="resp")

    def _send_data_after_cts(self, gen: int) -> None:
        if gen != self.wait_gen or self.state == DEAD or not self.queue:
            return
        now = self.kernel.now
        head = self.queue[0]
        head.tx_power_dbm = self.policy.tx_power_dbm(head.dst)
        self.state = TX
        self.noise_mw_samples = [self.radio.busy_mw + self.channel.noise_mw]
        self._set_sampling(True)
        self.channel.begin_transmission(head, self.node, head.tx_power_dbm, now)
        self._trace("tx_data", now)

    # -- attempt outcomes --------------------------------------------------------

    def _ack_timeout(self, gen: int) -> None:
        if gen != self.wait_gen or self.state != WAIT_ACK:
            return
        now = self.kernel.now
        self._set_sampling(False)
        label = self.policy.on_timeout(self.queue[0], self.noise_mw_samples, now)
        self.timeout_hook(self.queue[0], label, now)
        self._trace("ack_timeout:" + label, now)
        self._fail_attempt(now)

    def _cts_timeout(self, gen: int) -> None:
        if gen != self.wait_gen or self.state != WAIT_CTS:
            return
        now = self.kernel.now
        label = self.policy.on_timeout(self.queue[0], self.noise_mw_samples, now)
        self.timeout_hook(self.queue[0], label, now)
        self._trace("cts_timeout:" + label, now)
        self._fail_attempt(now)

    def _fail_attempt(self, now: int) -> None:
        self.retries += 1
        self.cts_cleared = False
        if self.retries > self.timings.retry_limit:
            frame = self.queue.popleft()
            self.drop_hook(frame, "retry_limit", now)
            self.stage = self.policy.on_drop(self.stage)
            self._next_frame(now)
        else:
            head = self.queue[0]
            head.retry = True
            self.stage = min(self.stage + 1, self.timings.max_stage)
            self.remaining = None
            self._start_access(now)

    def _finish_head(self, success: bool, now: int) -> None:
        self._set_sampling(False)
        frame = self.queue.popleft()
        if success:
            self.stage = self.policy.on_ack(frame, self.noise_mw_samples, now, self.stage)
            self.ack_hook(frame, now)
            self._trace("acked", now)
        self._next_frame(now)

    def _next_frame(self, now: int) -> None:
        self.retries = 0
        self.remaining = None
        self.cts_cleared = False
        if self.queue:
            self._start_access(now)
        else:
            self.state = IDLE

    # -- instrumentation -----------------------------------------------------------

    def _on_sample(self, busy_mw: float) -> None:
        if self.sampling:
            self.noise_mw_samples.append(busy_mw + self.channel.noise_mw)

    def _trace(self, event: str, now: int) -> None:
        if self.trace_hook is not None:
            counter = self.remaining if self.remaining is not None else -1
            self.trace_hook(now, self.node, event, self.stage, counter,
                            self.policy.tx_power_dbm(-1))

    def noise_mean_dbm(self) -> float:
        """Linear-domain mean of the current sample window, in dBm."""
        if not self.noise_mw_samples:
            return dbm_from_mw(self.channel.noise_mw)
        return dbm_from_mw(sum(self.noise_mw_samples) / len(self.noise_mw_samples))
