"""Knowledge-driven MAC adaptation: mEsB contention bounds, collision
prediction, noise-classified power control, and the advisory protocol selector.

The ClaPolicy plugs into mac.Mac and replaces DCF's range/reset/power rules:
backoff ranges come from a non-overlapping stage ladder shrunk by the estimated
number of active neighbors, the post-success stage reset is driven by a
collision-probability EWMA, and transmit power moves up multiplicatively when
a destination looks out of reach but decays linearly when the vicinity is loud.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .channel import dbm_from_mw
from .frames import Frame
from .kernel import SEC
from .mac import DcfPolicy, MacTimings

# ack-timeout classifications / power triggers
OUT_OF_REACH = "out_of_reach"
COLLISION_LIKELY = "collision_likely"
ACK_SUCCESS = "ack_success"

DOUBLE_DB = 10.0 * math.log10(2.0)  # x2 in linear power

CSMA = "CSMA"
TDMA = "TDMA"
MULTI_CHANNEL = "MULTI_CHANNEL"


@dataclass(slots=True)
class ClaParams:
    n_ref: int = 8
    horizon_s: float = 1.0
    window_slots: int = 100
    alpha: float = 0.25
    ttl_s: float = 5.0
    streak_min: int = 3
    delta_down_db: float = 1.0
    # headroom over the decode requirement; must dominate the shadowing sigma
    # or floored links shed frames to below-sensitivity loss
    margin_db: float = 8.0
    eta_low_dbm: float = -90.0   # noise floor + 6
    eta_high_dbm: float = -84.0  # noise floor + 12

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.n_ref < 1 or self.window_slots < 1 or self.streak_min < 0:
            raise ValueError("n_ref/window_slots/streak_min out of range")
        if self.delta_down_db <= 0:
            raise ValueError("delta_down_db must be > 0")


def mesb_base_range(stage: int, cw_min: int = 15, cw_max: int = 1023) -> tuple[int, int]:
    """Non-overlapping stage ladder: [0,15],[16,31],[32,63],...,[512,1023], then
    the top range repeats for any later stage."""
    lo, hi = 0, cw_min
    for _ in range(stage):
        if hi >= cw_max:
            break
        lo = hi + 1
        hi = min(2 * (hi + 1) - 1, cw_max)
    return lo, hi


def mesb_effective_range(lo: int, hi: int, n_active_est: int, n_ref: int) -> tuple[int, int]:
    """Shrink the draw range toward its lower bound when few neighbors contend."""
    frac = min(1.0, n_active_est / n_ref)
    return lo, lo + math.ceil((hi - lo) * frac)


def update_collision_ewma(prev: float, observed: int, alpha: float) -> float:
    return alpha * observed + (1.0 - alpha) * prev


def reset_stage(collision_ewma: float, current_stage: int, max_stage: int) -> int:
    """Post-success stage: predicted-collision share of the ladder, never above
    the stage the attempt ended at. Half-away-from-zero rounding."""
    predicted = math.floor(collision_ewma * max_stage + 0.5)
    return min(predicted, current_stage)


def classify_ack_timeout(noise_samples_mw: list[float], eta_low_dbm: float) -> str:
    """A quiet ACK window means the destination is out of reach; a loud one
    means contention. No samples defaults to the conservative read."""
    if not noise_samples_mw:
        return COLLISION_LIKELY
    mean_dbm = dbm_from_mw(sum(noise_samples_mw) / len(noise_samples_mw))
    return OUT_OF_REACH if mean_dbm < eta_low_dbm else COLLISION_LIKELY


def min_power_to_reach(their_prx_dbm: float, our_tx_dbm: float, sinr_thr_db: float,
                       noise_floor_dbm: float, margin_db: float) -> float:
    """Power needed so the peer hears us at decode level, from one observation."""
    required_prx = noise_floor_dbm + sinr_thr_db
    link_loss = our_tx_dbm - their_prx_dbm
    return required_prx + link_loss + margin_db


@dataclass(slots=True)
class PowerControlState:
    tx_power_dbm: float
    pt_min_dbm: float
    pt_max_dbm: float
    success_streak: int = 0
    delta_down_db: float = 1.0
    eta_low_dbm: float = -90.0
    eta_high_dbm: float = -84.0
    streak_min: int = 3


def power_adjust(state: PowerControlState, trigger: str,
                 noise_mean_dbm: float, dst_floor_dbm: float | None = None) -> None:
    """Asymmetric control: x2 linear when out of reach, linear dB decay when
    the vicinity is loud (on collision, or after a streak of noisy successes)."""
    floor = state.pt_min_dbm if dst_floor_dbm is None else max(state.pt_min_dbm, dst_floor_dbm)
    # a destination may need more than the radio has; the floor can hold the
    # level at pt_max but never push it beyond the hardware bound
    floor = min(floor, state.pt_max_dbm)
    if trigger == OUT_OF_REACH:
        state.tx_power_dbm = min(state.tx_power_dbm + DOUBLE_DB, state.pt_max_dbm)
        state.success_streak = 0
    elif trigger == COLLISION_LIKELY:
        if noise_mean_dbm > state.eta_high_dbm:
            state.tx_power_dbm = max(state.tx_power_dbm - state.delta_down_db, floor)
        state.success_streak = 0
    elif trigger == ACK_SUCCESS:
        if noise_mean_dbm > state.eta_high_dbm and state.success_streak >= state.streak_min:
            state.tx_power_dbm = max(state.tx_power_dbm - state.delta_down_db, floor)
            state.success_streak = 0
        else:
            state.success_streak += 1
    else:
        raise ValueError(f"unknown power trigger {trigger}")


@dataclass(slots=True)
class NeighborEntry:
    prx_dbm: float                 # how they hear us (their report)
    their_tx_dbm: float            # their announced power
    min_power_dbm: float | None    # what we need to reach them, when reported
    updated_at: int


class KnowledgeBase:
    """Per-node reasoning state feeding the policy and the control-plane reports."""

    __slots__ = (
        "collision_ewma", "slot_window", "window_slots", "decode_log",
        "neighbor_power_table", "heard_acc", "sinr_acc", "_win_total",
    )

    def __init__(self, window_slots: int = 100):
        self.collision_ewma = 0.0
        self.slot_window: deque[tuple[bool, int]] = deque()  # run-length (busy, count)
        self.window_slots = window_slots
        self._win_total = 0
        self.decode_log: dict[int, int] = {}
        self.neighbor_power_table: dict[int, NeighborEntry] = {}
        # per-neighbor (sum linear prx, frames, last announced tx power) since last report
        self.heard_acc: dict[int, list] = {}
        self.sinr_acc: list[float] = []

    def observe_slots(self, busy: bool, count: int) -> None:
        self.slot_window.append((busy, count))
        self._win_total += count
        while self._win_total - self.slot_window[0][1] >= self.window_slots:
            self._win_total -= self.slot_window.popleft()[1]

    def slot_utilization(self) -> float:
        total = busy = 0
        for is_busy, count in self.slot_window:
            total += count
            if is_busy:
                busy += count
        return busy / total if total else 0.0

    def heard_frame(self, src: int, prx_dbm: float, tx_power_dbm: float,
                    now: int, sinr_db: float | None = None) -> None:
        self.decode_log[src] = now
        # accumulate dB-domain link loss: frames arrive at varying powers, and
        # averaging losses (not linear powers) keeps the location estimate
        # unbiased under lognormal shadowing
        acc = self.heard_acc.get(src)
        if acc is None:
            self.heard_acc[src] = [tx_power_dbm - prx_dbm, 1, tx_power_dbm]
        else:
            acc[0] += tx_power_dbm - prx_dbm
            acc[1] += 1
            acc[2] = tx_power_dbm
        if sinr_db is not None:
            self.sinr_acc.append(sinr_db)

    def active_neighbors(self, now: int, horizon_ns: int) -> int:
        cutoff = now - horizon_ns
        return sum(1 for t in self.decode_log.values() if t >= cutoff)

    def observe_collision(self, observed: int, alpha: float) -> None:
        self.collision_ewma = update_collision_ewma(self.collision_ewma, observed, alpha)

    def power_floor(self, dst: int, now: int, ttl_ns: int) -> float | None:
        entry = self.neighbor_power_table.get(dst)
        if entry is None or entry.min_power_dbm is None or now - entry.updated_at > ttl_ns:
            return None
        return entry.min_power_dbm

    def drain_report_window(self) -> tuple[list[tuple[int, float, float]], tuple[float, float] | None]:
        """Heard list (neighbor, mean prx dBm, announced tx dBm) and SINR (mean, min).

        The reported prx is the announced power minus the mean dB link loss,
        i.e. normalized to the last announced power level.
        """
        heard = [
            (src, acc[2] - acc[0] / acc[1], acc[2])
            for src, acc in sorted(self.heard_acc.items())
        ]
        sinr = None
        if self.sinr_acc:
            sinr = (sum(self.sinr_acc) / len(self.sinr_acc), min(self.sinr_acc))
        self.heard_acc = {}
        self.sinr_acc = []
        return heard, sinr


class ClaPolicy(DcfPolicy):
    """The adaptive policy: mEsB ranges, predicted-collision reset, power control."""

    def __init__(self, timings: MacTimings, params: ClaParams,
                 pt_min_dbm: float, pt_max_dbm: float, kernel):
        params.validate()
        super().__init__(timings, pt_max_dbm)
        self.params = params
        self.kernel = kernel
        self.kb = KnowledgeBase(params.window_slots)
        self.power = PowerControlState(
            tx_power_dbm=pt_max_dbm, pt_min_dbm=pt_min_dbm, pt_max_dbm=pt_max_dbm,
            delta_down_db=params.delta_down_db, eta_low_dbm=params.eta_low_dbm,
            eta_high_dbm=params.eta_high_dbm, streak_min=params.streak_min,
        )
        self.horizon_ns = round(params.horizon_s * SEC)
        self.ttl_ns = round(params.ttl_s * SEC)

    def attempt_range(self, stage: int) -> tuple[int, int]:
        lo, hi = mesb_base_range(stage, self.timings.cw_min, self.timings.cw_max)
        n_est = self.kb.active_neighbors(self.kernel.now, self.horizon_ns)
        return mesb_effective_range(lo, hi, n_est, self.params.n_ref)

    def tx_power_dbm(self, dst: int) -> float:
        # The adapted level applies where the KB knows what the destination
        # needs; a first contact (or stale entry) goes out at full power so a
        # quiet node can never talk itself out of its own links.
        if dst < 0:
            return self.power.tx_power_dbm
        floor = self.kb.power_floor(dst, self.kernel.now, self.ttl_ns)
        if floor is None:
            return self.power.pt_max_dbm
        return max(self.power.tx_power_dbm,
                   min(floor, self.power.pt_max_dbm))

    def on_ack(self, frame: Frame, noise_mw: list, now: int, stage: int = 0) -> int:
        self.kb.observe_collision(0, self.params.alpha)
        power_adjust(self.power, ACK_SUCCESS, _mean_dbm(noise_mw),
                     self.kb.power_floor(frame.dst, now, self.ttl_ns))
        return reset_stage(self.kb.collision_ewma, stage, self.timings.max_stage)

    def on_timeout(self, frame: Frame, noise_mw: list, now: int) -> str:
        verdict = classify_ack_timeout(noise_mw, self.params.eta_low_dbm)
        if verdict == OUT_OF_REACH:
            self.kb.observe_collision(0, self.params.alpha)
        else:
            self.kb.observe_collision(1, self.params.alpha)
        power_adjust(self.power, verdict, _mean_dbm(noise_mw),
                     self.kb.power_floor(frame.dst, now, self.ttl_ns))
        return verdict

    def on_drop(self, stage: int) -> int:
        return reset_stage(self.kb.collision_ewma, stage, self.timings.max_stage)

    def observe_slots(self, busy: bool, count: int) -> None:
        self.kb.observe_slots(busy, count)

    def on_overheard(self, frame: Frame, prx_dbm: float, now: int) -> None:
        self.kb.heard_frame(frame.src, prx_dbm, frame.tx_power_dbm, now)


def _mean_dbm(samples_mw: list[float]) -> float:
    if not samples_mw:
        return -math.inf
    return dbm_from_mw(sum(samples_mw) / len(samples_mw))


@dataclass(slots=True)
class FlowStats:
    mean_rate_bps: float
    interarrival_cov: float
    realtime: bool = False


def select_protocol(stats: FlowStats, cov_thr: float = 0.2,
                    rate_thr_bps: float = 50_000.0) -> str:
    """Advisory recommendation from short-term flow statistics (logged only)."""
    if stats.realtime:
        return MULTI_CHANNEL
    if stats.interarrival_cov < cov_thr and stats.mean_rate_bps >= rate_thr_bps:
        return TDMA
    return CSMA
