"""Per-node plumbing around the MAC: energy accounting, CBR traffic,
waypoint mobility, and deterministic min-hop routing.

The energy ledger is double-entry: a compensated running balance drives death
timing, while exact integer nanosecond buckets per (state, power) allow the
whole run's consumption to be recomputed independently and reconciled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelParams, w_from_dbm

TX = "tx"
RX = "rx"
IDLE = "idle"


@dataclass(slots=True)
class EnergyModel:
    pt_max_w: float
    rx_fraction: float = 0.45
    idle_fraction: float = 0.30
    pa_efficiency: float = 1.0

    @property
    def rx_w(self) -> float:
        return self.rx_fraction * self.pt_max_w

    @property
    def idle_w(self) -> float:
        return self.idle_fraction * self.pt_max_w

    def tx_w(self, tx_power_dbm: float) -> float:
        return w_from_dbm(tx_power_dbm) / self.pa_efficiency


def energy_elapse(energy_j: float, power_w: float, dt_ns: int) -> tuple[float, int | None]:
    """Drain dt at constant power; on crossing zero return the interpolated
    time-to-death in ns and clamp the balance."""
    spend = power_w * dt_ns * 1e-9
    if spend < energy_j:
        return energy_j - spend, None
    if power_w <= 0.0:
        return energy_j, None
    return 0.0, min(dt_ns, round(energy_j / power_w * 1e9))


class EnergyLedger:
    """Running balance plus exact (state, power) duration buckets for audit."""

    __slots__ = ("energy_j", "_comp", "state", "power_w", "since",
                 "buckets", "gcp_debit_j", "alive", "died_at")

    def __init__(self, initial_j: float, idle_w: float, start: int = 0):
        self.energy_j = initial_j
        self._comp = 0.0  # Kahan compensation for the running subtraction
        self.state = IDLE
        self.power_w = idle_w
        self.since = start
        self.buckets: dict[tuple[str, float], int] = {}
        self.gcp_debit_j = 0.0
        self.alive = True
        self.died_at: int | None = None

    def _spend(self, amount: float) -> None:
        y = -amount - self._comp
        t = self.energy_j + y
        self._comp = (t - self.energy_j) - y
        self.energy_j = t

    def settle(self, now: int) -> None:
        dur = now - self.since
        if dur:
            key = (self.state, self.power_w)
            self.buckets[key] = self.buckets.get(key, 0) + dur
            self._spend(self.power_w * dur * 1e-9)
            self.since = now

    def switch(self, state: str, power_w: float, now: int) -> None:
        if state != self.state or power_w != self.power_w:
            self.settle(now)
            self.state = state
            self.power_w = power_w

    def debit_gcp(self, joules: float) -> None:
        self.gcp_debit_j += joules
        self._spend(joules)

    def remaining_at(self, now: int) -> float:
        """Energy left at `now`, the running segment's draw included."""
        return self.energy_j - self.power_w * (now - self.since) * 1e-9

    def death_eta(self, now: int) -> int | None:
        """Predicted death tick at the current draw; None if not draining."""
        if self.power_w <= 0.0:
            return None
        return now + max(0, math.floor(self.remaining_at(now) / self.power_w * 1e9))

    def mark_dead(self, now: int) -> None:
        self.settle(now)
        self.alive = False
        self.died_at = now
        if self.energy_j < 0.0:
            self.energy_j = 0.0
        self.power_w = 0.0

    def consumed_audit_j(self) -> float:
        """Independent recompute: exact durations times power, plus GCP debits."""
        return math.fsum(p * ns * 1e-9 for (_, p), ns in self.buckets.items()) + self.gcp_debit_j


# -- traffic ---------------------------------------------------------------------


@dataclass(slots=True)
class TrafficSpec:
    src: int
    dst: int
    payload_bytes: int
    interval_ns: int
    start_ns: int = 0
    stop_ns: int | None = None  # None: run end

    def validate(self, node_count: int) -> list[str]:
        problems = []
        if not 0 <= self.src < node_count:
            problems.append(f"traffic src {self.src} out of range")
        if not 0 <= self.dst < node_count:
            problems.append(f"traffic dst {self.dst} out of range")
        if self.src == self.dst:
            problems.append("traffic src == dst")
        if self.interval_ns <= 0:
            problems.append("traffic interval must be > 0")
        if self.payload_bytes < 0:
            problems.append("traffic payload must be >= 0")
        return problems

    def emission_count(self, run_end_ns: int) -> int:
        stop = run_end_ns if self.stop_ns is None else min(self.stop_ns, run_end_ns)
        if stop <= self.start_ns:
            return 0
        return -(-(stop - self.start_ns) // self.interval_ns)


# -- mobility ---------------------------------------------------------------------


@dataclass(slots=True)
class MobilitySpec:
    kind: str = "static"  # static | waypoint
    speed_min: float = 0.0
    speed_max: float = 2.0
    step_ns: int = 1_000_000_000

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("static", "waypoint"):
            problems.append(f"unknown mobility kind {self.kind!r}")
        if self.kind == "waypoint" and not 0 <= self.speed_min <= self.speed_max:
            problems.append("need 0 <= speed_min <= speed_max")
        if self.step_ns <= 0:
            problems.append("mobility step must be > 0")
        return problems


class WaypointWalker:
    """Random-waypoint state for one node: head to a target, then draw anew."""

    __slots__ = ("area_w", "area_h", "speed_min", "speed_max", "target", "speed")

    def __init__(self, area_w: float, area_h: float, spec: MobilitySpec, rng):
        self.area_w = area_w
        self.area_h = area_h
        self.speed_min = spec.speed_min
        self.speed_max = spec.speed_max
        self.target = (rng.uniform(0.0, area_w), rng.uniform(0.0, area_h))
        self.speed = rng.uniform(spec.speed_min, spec.speed_max)

    def move_step(self, pos: tuple[float, float], dt_s: float, rng) -> tuple[float, float]:
        x, y = pos
        budget = self.speed * dt_s
        while budget > 0.0:
            dx, dy = self.target[0] - x, self.target[1] - y
            dist = math.hypot(dx, dy)
            if dist <= budget:
                x, y = self.target
                budget -= dist
                self.target = (rng.uniform(0.0, self.area_w), rng.uniform(0.0, self.area_h))
                self.speed = rng.uniform(self.speed_min, self.speed_max)
                if self.speed == 0.0:
                    break
            else:
                x += dx / dist * budget
                y += dy / dist * budget
                budget = 0.0
        return min(max(x, 0.0), self.area_w), min(max(y, 0.0), self.area_h)


def move_step(pos, walker: WaypointWalker | None, dt_s: float, rng):
    """Advance one node: waypoint travel, or identity for static scenarios."""
    if walker is None:
        return pos
    return walker.move_step(pos, dt_s, rng)


# -- routing -----------------------------------------------------------------------


def link_matrix(positions: np.ndarray, tx_powers_dbm: np.ndarray,
                params: ChannelParams, alive: np.ndarray,
                margin_db: float = 0.0,
                shadow_db: np.ndarray | None = None) -> np.ndarray:
    """Directed reachability: expected Prx clears the decode level.

    tx_powers_dbm is per-sender (shape (n,)) or per-link (shape (n, n)) when
    the sender picks a different power per destination.  shadow_db is the
    run's static per-pair shadowing field when there is one: a link buried
    under a deep shadow is permanently dead, and a routing oracle that feeds
    traffic into it measures the black hole, not the MAC.  margin_db demands
    headroom over the bare decode level.
    """
    d = np.hypot(positions[:, 0][:, None] - positions[:, 0][None, :],
                 positions[:, 1][:, None] - positions[:, 1][None, :])
    np.maximum(d, params.d0_m, out=d)
    pl = params.pl_d0_db + 10.0 * params.rho * np.log10(d / params.d0_m)
    if shadow_db is not None:
        pl = pl + shadow_db
    need = params.noise_floor_dbm + params.sinr_threshold_db + margin_db
    powers = tx_powers_dbm if tx_powers_dbm.ndim == 2 else tx_powers_dbm[:, None]
    adj = (powers - pl) >= need
    np.fill_diagonal(adj, False)
    adj &= alive[:, None] & alive[None, :]
    return adj


def compute_routes(positions: np.ndarray, tx_powers_dbm: np.ndarray,
                   params: ChannelParams, alive: np.ndarray,
                   margin_db: float = 0.0,
                   shadow_db: np.ndarray | None = None) -> list[dict[int, int]]:
    """Min-hop next-hop tables over the directed link graph, lowest-id ties.

    For each destination, a reverse breadth-first pass yields hop distances;
    each source then forwards to its lowest-id out-neighbor one hop closer.
    """
    n = len(positions)
    adj = link_matrix(positions, tx_powers_dbm, params, alive, margin_db, shadow_db)
    out_neighbors = [np.nonzero(adj[i])[0] for i in range(n)]
    in_neighbors = [np.nonzero(adj[:, j])[0] for j in range(n)]
    routes: list[dict[int, int]] = [{} for _ in range(n)]
    unreached = n * 2  # sentinel distance
    for dst in range(n):
        if not alive[dst]:
            continue
        dist = [unreached] * n
        dist[dst] = 0
        frontier = [dst]
        while frontier:
            nxt = []
            for node in frontier:
                for prev in in_neighbors[node]:
                    if dist[prev] == unreached:
                        dist[prev] = dist[node] + 1
                        nxt.append(int(prev))
            frontier = sorted(nxt)
        for src in range(n):
            if src == dst or dist[src] == unreached or not alive[src]:
                continue
            hop = min(int(m) for m in out_neighbors[src] if dist[m] == dist[src] - 1)
            routes[src][dst] = hop
    return routes
