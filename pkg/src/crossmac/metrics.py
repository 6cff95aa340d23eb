"""Run metrics: per-run results, cross-run summaries, and gain comparison.

Metric orientation: packets received, throughput, and the three lifetime
numbers are higher-is-better; collisions, delay, and consumed energy are
lower-is-better, so their gains flip sign (positive gain = improvement).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from scipy import stats

from .errors import MixedScenarios, ZeroBaseline

METRICS = ("packets_received", "throughput_mbps", "packets_per_s",
           "fnd_s", "lnd_s", "lifetime_rcvd_s", "mean_delay_s",
           "collisions", "energy_j")

LOWER_IS_BETTER = frozenset({"mean_delay_s", "collisions", "energy_j"})


@dataclass(slots=True)
class NodeStats:
    node: int
    collisions: int = 0
    drops: int = 0
    energy_j: float = 0.0  # consumed
    packets_rx: int = 0


@dataclass(slots=True)
class RunResult:
    packets_sent: int
    packets_received: int
    throughput_mbps: float
    packets_per_s: float
    fnd_s: float | None
    lnd_s: float | None
    lifetime_rcvd_s: float | None
    mean_delay_s: float | None
    per_node: list[NodeStats]
    metadata: dict

    def metric(self, name: str) -> float | None:
        if name == "collisions":
            return float(sum(n.collisions for n in self.per_node))
        if name == "energy_j":
            return float(sum(n.energy_j for n in self.per_node))
        if name == "packets_received":
            return float(self.packets_received)
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_node"] = [asdict(n) for n in self.per_node]
        return d

    def check(self) -> None:
        assert self.packets_received <= self.packets_sent
        if self.fnd_s is not None and self.lnd_s is not None:
            assert self.fnd_s <= self.lnd_s
        if self.lifetime_rcvd_s is not None:
            assert self.lifetime_rcvd_s <= self.metadata["sim_time_s"] + 1e-12


@dataclass(slots=True)
class MetricSummary:
    mean: float
    stddev: float | None  # sample stddev; None for a single value
    ci95_half: float | None  # t-based half width; None for a single value
    n: int


@dataclass(slots=True)
class Summary:
    scenario_hash: str
    protocol: str
    run_count: int
    metrics: dict[str, MetricSummary] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scenario_hash": self.scenario_hash, "protocol": self.protocol,
                "run_count": self.run_count,
                "metrics": {k: asdict(v) for k, v in self.metrics.items()}}


def throughput_mbps(total_payload_bits: int, sim_time_s: float) -> float:
    """Delivered payload bits per second, in Mbps."""
    if sim_time_s <= 0:
        raise ValueError("sim_time must be > 0")
    return total_payload_bits / sim_time_s / 1e6


def mean_delay_s(delays_ns: list[int]) -> float | None:
    """Mean end-to-end delivery delay; None when nothing was delivered."""
    if not delays_ns:
        return None
    return math.fsum(delays_ns) / len(delays_ns) / 1e9


def lifetimes(deaths: list[tuple[int, bool]],
              viability: list[tuple[int, bool]],
              decode_times_ns: list[int]) -> tuple[float | None, float | None, float | None]:
    """(FND, LND, lifetime-of-last-reception) in seconds, None where undefined.

    deaths: (tick, node-was-ever-active) per death, in order. FND counts only
    active nodes. viability: (tick, any traffic src→dst pair still connected)
    snapshots taken after each death; LND is the first tick it goes false.
    """
    fnd = next((t for t, active in deaths if active), None)
    lnd = next((t for t, viable in viability if not viable), None)
    rcvd = max(decode_times_ns, default=None)
    return tuple(None if v is None else v / 1e9 for v in (fnd, lnd, rcvd))


def t_ci_half_width(stddev: float, n: int) -> float:
    """95% confidence half-width for a mean from n samples."""
    return float(stats.t.ppf(0.975, n - 1)) * stddev / math.sqrt(n)


def summarize_values(values: list[float]) -> MetricSummary:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return MetricSummary(mean, None, None, n)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    sd = math.sqrt(var)
    return MetricSummary(mean, sd, t_ci_half_width(sd, n), n)


def aggregate(results: list[RunResult]) -> Summary:
    """Per-metric mean/stddev/CI over runs of one (scenario, protocol)."""
    if not results:
        raise ValueError("need at least one result")
    hashes = {r.metadata["scenario_hash"] for r in results}
    protocols = {r.metadata["protocol"] for r in results}
    if len(hashes) > 1 or len(protocols) > 1:
        raise MixedScenarios(f"refusing to aggregate across {sorted(hashes)} / {sorted(protocols)}")
    summary = Summary(hashes.pop(), protocols.pop(), len(results))
    for name in METRICS:
        values = [v for r in results if (v := r.metric(name)) is not None]
        if values:
            summary.metrics[name] = summarize_values(values)
    return summary


def gain_percent(baseline: Summary, variant: Summary, metric: str) -> float:
    """Figure-1-style gain: positive means the variant improved the metric."""
    if baseline.scenario_hash != variant.scenario_hash:
        raise MixedScenarios("gain comparison needs identical scenarios")
    if metric not in baseline.metrics or metric not in variant.metrics:
        raise KeyError(f"metric {metric!r} missing from one side")
    b = baseline.metrics[metric].mean
    v = variant.metrics[metric].mean
    if b == 0.0:
        raise ZeroBaseline(f"baseline mean for {metric} is zero")
    raw = 100.0 * (v - b) / b
    return -raw if metric in LOWER_IS_BETTER else raw
