"""Global control plane: periodic node reports on an idealized side channel.

Reports carry what each node measured over the last period (per-neighbor mean
received powers, SINR stats, slot utilization) and are delivered to every
alive node after a fixed latency — reliable, contention-free, and out of band,
so the data-channel MAC comparison stays unconfounded. Receivers use entries
naming them to learn the minimum power that reaches the reporter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cla import KnowledgeBase, NeighborEntry, min_power_to_reach
from .kernel import MS

APPLIED = "applied"
STALE = "stale"
DUPLICATE = "duplicate"


@dataclass(slots=True)
class GcpReport:
    origin: int
    issued_at: int
    tx_power_dbm: float
    heard: list  # (neighbor id, mean prx dBm over window, neighbor's announced tx dBm)
    sinr_stats: tuple | None  # (mean dB, min dB) over window, None if nothing decoded
    slot_util: float


@dataclass(slots=True)
class GcpChannel:
    latency_ns: int = 10 * MS
    period_ns: int = 500 * MS
    control_power_w: float = 0.01
    report_airtime_ns: int = 5 * MS

    def validate(self) -> None:
        if self.latency_ns <= 0:
            raise ValueError("latency must be > 0")
        if self.period_ns <= self.latency_ns:
            raise ValueError("period must exceed latency")

    @property
    def report_energy_j(self) -> float:
        return self.control_power_w * self.report_airtime_ns * 1e-9


def build_report(origin: int, kb: KnowledgeBase, tx_power_dbm: float, now: int) -> GcpReport:
    """Snapshot and reset the node's measurement window."""
    heard, sinr = kb.drain_report_window()
    return GcpReport(origin, now, tx_power_dbm, heard, sinr, kb.slot_utilization())


def apply_report(kb: KnowledgeBase, report: GcpReport, me: int, now: int,
                 ttl_ns: int, sinr_thr_db: float, noise_floor_dbm: float,
                 margin_db: float, seen: dict[int, int]) -> str:
    """Fold one received report into the knowledge base; returns what happened."""
    if report.issued_at < now - ttl_ns:
        return STALE
    last = seen.get(report.origin)
    if last is not None and report.issued_at <= last:
        return DUPLICATE
    seen[report.origin] = report.issued_at
    entry = kb.neighbor_power_table.get(report.origin)
    mine = None
    for neighbor, prx_dbm, announced_tx_dbm in report.heard:
        if neighbor == me:
            mine = (prx_dbm, announced_tx_dbm)
            break
    if mine is not None:
        prx_dbm, our_tx_then = mine
        need = min_power_to_reach(prx_dbm, our_tx_then, sinr_thr_db,
                                  noise_floor_dbm, margin_db)
        kb.neighbor_power_table[report.origin] = NeighborEntry(
            prx_dbm=prx_dbm, their_tx_dbm=report.tx_power_dbm,
            min_power_dbm=need, updated_at=report.issued_at)
    elif entry is not None:
        entry.their_tx_dbm = report.tx_power_dbm
    else:
        kb.neighbor_power_table[report.origin] = NeighborEntry(
            prx_dbm=float("nan"), their_tx_dbm=report.tx_power_dbm,
            min_power_dbm=None, updated_at=report.issued_at)
    return APPLIED


class ControlPlane:
    """Publishes reports as fixed-latency reliable broadcasts with energy debits."""

    def __init__(self, kernel, cfg: GcpChannel, n_nodes: int, deliver, debit, alive):
        cfg.validate()
        self.kernel = kernel
        self.cfg = cfg
        self.n_nodes = n_nodes
        self.deliver = deliver  # (recipient, report) -> None
        self.debit = debit      # (origin, joules) -> None
        self.alive = alive      # node -> bool
        self.published = 0

    def publish(self, report: GcpReport) -> None:
        self.debit(report.origin, self.cfg.report_energy_j)
        self.published += 1
        self.kernel.schedule(report.issued_at + self.cfg.latency_ns, self._fan_out,
                             report, target="gcp", kind="gcp_rx")

    def _fan_out(self, report: GcpReport) -> None:
        for node in range(self.n_nodes):
            if node != report.origin and self.alive(node):
                self.deliver(node, report)
