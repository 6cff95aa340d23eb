"""Run orchestration: wires kernel, channel, MACs, policies, traffic, energy,
routing, and the control plane into one deterministic simulation run.

Node addressing is end-to-end: CBR emissions carry (origin, final_dst) and are
relayed hop by hop along deterministic min-hop routes. Each receiving node
ACKs at the MAC layer but forwards/delivers only first copies (duplicate
suppression per origin), so MAC retries cannot inflate delivery counts.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import RNG_ALGORITHM, __version__
from .channel import COLLISION_LOSS, Channel, SignalEvent, w_from_dbm
from .cla import CSMA, ClaPolicy, FlowStats, select_protocol
from .errors import InvalidScenario
from .frames import DATA, Frame
from .gcp import ControlPlane, apply_report, build_report
from .kernel import Kernel, derive_stream, s_from_ticks
from .mac import BasicPcPolicy, DcfPolicy, Mac
from .metrics import NodeStats, RunResult, lifetimes, mean_delay_s, throughput_mbps
from .nodestack import (EnergyLedger, EnergyModel, WaypointWalker,
                        compute_routes)
from .scenario import Scenario


class DedupWindow:
    """First-copy filter keyed by (origin, seq) with a bounded recent window."""

    __slots__ = ("seen", "span")

    def __init__(self, span: int = 256):
        self.seen: dict[int, list] = {}  # origin -> [max_seq, recent_set]
        self.span = span

    def accept(self, origin: int, seq: int) -> bool:
        rec = self.seen.get(origin)
        if rec is None:
            self.seen[origin] = [seq, {seq}]
            return True
        max_seq, recent = rec
        if seq in recent or seq <= max_seq - self.span:
            return False
        recent.add(seq)
        if seq > max_seq:
            rec[0] = seq
            if len(recent) > 2 * self.span:
                floor = seq - self.span
                rec[1] = {s for s in recent if s > floor}
        return True


class EnergyTracker:
    """Maps radio activity to ledger draw states and keeps the death alarm.

    The alarm is pessimistic: it is armed at the crossing the node would hit
    drawing its worst-case wattage the whole way, so it always fires at or
    before the true crossing and simply re-arms while energy remains. State
    flips then cost only the ledger settle, not an alarm recomputation.
    """

    __slots__ = ("node", "sim", "ledger", "model", "worst_w", "alarm_at", "alarm_gen")

    def __init__(self, node: int, sim: "Simulation", initial_j: float,
                 model: EnergyModel, worst_w: float):
        self.node = node
        self.sim = sim
        self.model = model
        self.worst_w = worst_w
        self.ledger = EnergyLedger(initial_j, model.idle_w)
        self.alarm_at: Optional[int] = None
        self.alarm_gen = 0

    def on_state(self, now: int) -> None:
        if not self.ledger.alive:
            return
        sig = self.sim.channel.tx_active[self.node]
        if sig is not None:
            state, power = "tx", self.model.tx_w(sig.tx_power_dbm)
        elif self.sim.channel.radios[self.node].lock is not None:
            state, power = "rx", self.model.rx_w
        else:
            state, power = "idle", self.model.idle_w
        self.ledger.switch(state, power, now)

    def poke(self, now: int) -> None:
        """Re-arm the death alarm; needed after instantaneous debits.

        Death itself always happens from the alarm event, never synchronously:
        pokes fire from inside channel dispatch, where tearing the node down
        would corrupt the in-progress signal bookkeeping.
        """
        if not self.ledger.alive:
            return
        ticks = int(self.ledger.remaining_at(now) / self.worst_w * 1e9)
        self._arm(now + max(0, ticks))

    def _arm(self, at: int) -> None:
        self.alarm_gen += 1
        self.alarm_at = at
        self.sim.kernel.schedule(at, self._alarm, self.alarm_gen,
                                 target=f"energy{self.node}", kind="death")

    def _alarm(self, gen: int) -> None:
        if gen != self.alarm_gen or not self.ledger.alive:
            return
        now = self.sim.kernel.now
        self.alarm_at = None
        ticks = int(self.ledger.remaining_at(now) / self.worst_w * 1e9)
        if ticks <= 0:
            self.sim._die(self.node, now)
        else:
            self._arm(now + ticks)


class Simulation:
    """One sealed (scenario, protocol, seed) run."""

    def __init__(self, scenario: Scenario, protocol: str | None = None,
                 seed: int = 0, traces: dict | None = None):
        scenario.validate()
        self.scenario = scenario
        self.protocol = protocol or scenario.protocol
        if self.protocol not in ("dcf", "basic-pc", "cla-amac"):
            raise InvalidScenario([f"protocol: {self.protocol!r} unknown"])
        self.seed = seed
        self.traces = traces or {}
        self.kernel = Kernel()
        if "events" in self.traces:
            self.kernel.trace = self.traces["events"]
        self.t_end = scenario.sim_time_ns()
        self.n = scenario.node_count
        self._setup()

    # -- construction ---------------------------------------------------------

    def _setup(self) -> None:
        sc, n, seed = self.scenario, self.n, self.seed
        if isinstance(sc.placement, list):
            positions = np.asarray(sc.placement, dtype=float)
        else:
            w, h = sc.area_m
            positions = np.empty((n, 2))
            for i in range(n):
                rng = derive_stream(seed, i, "placement")
                positions[i, 0] = rng.uniform(0.0, w)
                positions[i, 1] = rng.uniform(0.0, h)
        self.initial_positions = positions.copy()

        shadow_rngs = [derive_stream(seed, i, "shadowing") for i in range(n)]
        self.channel = Channel(self.kernel, sc.channel, sc.phy, positions, shadow_rngs)

        self.policies = [self._make_policy() for _ in range(n)]
        self.macs = [Mac(i, self.kernel, self.channel, sc.mac, self.policies[i],
                         derive_stream(seed, i, "backoff")) for i in range(n)]

        model = EnergyModel(pt_max_w=w_from_dbm(sc.power.pt_max_dbm),
                            rx_fraction=sc.energy.rx_fraction,
                            idle_fraction=sc.energy.idle_fraction,
                            pa_efficiency=sc.energy.pa_efficiency)
        self.energy_model = model
        worst_w = max(model.tx_w(sc.power.pt_max_dbm), model.rx_w, model.idle_w)
        self.trackers = [EnergyTracker(i, self, sc.initial_energy(i), model, worst_w)
                         for i in range(n)]

        # traffic flows: explicit, or every node toward a seeded partner
        if sc.traffic.kind == "all_to_random":
            dst_for = {}
            for i in range(n):
                rng = derive_stream(seed, i, "traffic")
                d = int(rng.integers(0, n - 1))
                dst_for[i] = d + 1 if d >= i else d
            self.flows = sc.traffic_specs(dst_for)
        else:
            self.flows = sc.traffic_specs()

        # counters and logs
        self.packets_sent = 0
        self.packets_received = 0
        self.delivered_bits = 0
        self.delays_ns: list[int] = []
        self.decode_times: list[int] = []
        self.collisions_tx = [0] * n
        self.collisions_rx = [0] * n
        self.drops = [0] * n
        self.drop_reasons: dict[str, int] = {}
        self.timeout_labels: dict[str, int] = {}
        self.packets_rx_node = [0] * n
        self.tx_data_attempts = 0
        self.deaths: list[tuple[int, bool]] = []
        self.viability: list[tuple[int, bool]] = []
        self.ever_active: set[int] = set()
        self.dedup = [DedupWindow() for _ in range(n)]
        self.seq_next = [0] * n
        self.alive_count = n
        self.selector_log: list = []
        self.gcp_stats = {"published": 0, "applied": 0, "stale": 0, "duplicate": 0}
        self.unroutable = 0

        for i, mac in enumerate(self.macs):
            mac.deliver_hook = self._make_deliver(i)
            mac.drop_hook = self._make_drop(i)
            mac.timeout_hook = self._on_timeout_label
            if "mac" in self.traces:
                mac.trace_hook = self._make_mac_trace(self.traces["mac"])
            self.channel.radios[i].power_state_hook = self.trackers[i].on_state
            self.channel.radios[i].verdict_hook = self._make_verdict(i)
            mac_complete = self.channel.tx_complete_hooks[i]
            self.channel.tx_complete_hooks[i] = self._make_tx_complete(i, mac_complete)

        self.routes = compute_routes(self.channel.positions, self._tx_powers(),
                                     sc.channel, self.channel.alive,
                                     sc.routing_margin_db, self.channel.shadow_db)
        self.routing_epoch_ns = round(sc.routing_epoch_s * 1e9)
        self.kernel.schedule(self.routing_epoch_ns, self._routing_tick,
                             target="routing", kind="epoch")

        # CBR sources are phase-staggered across one interval: atomically
        # aligned application clocks would synchronize every first access
        # into one slot, which no real deployment exhibits.
        for idx, flow in enumerate(self.flows):
            phase = (idx * flow.interval_ns) // max(1, len(self.flows))
            if flow.start_ns + phase < self._flow_stop(flow):
                self.kernel.schedule(flow.start_ns + phase, self._emit, idx,
                                     target=f"cbr{flow.src}", kind="emit")

        if sc.mobility.kind == "waypoint":
            # one stream per node drives both the initial and all later waypoint draws
            self.mobility_rngs = [derive_stream(seed, i, "mobility") for i in range(n)]
            spec = sc.mobility.to_spec()
            self.walkers = [WaypointWalker(sc.area_m[0], sc.area_m[1], spec,
                                           self.mobility_rngs[i]) for i in range(n)]
            self.mobility_step_ns = spec.step_ns
            self.kernel.schedule(self.mobility_step_ns, self._mobility_tick,
                                 target="mobility", kind="step")
        else:
            self.walkers = None

        self.gcp_seen = [dict() for _ in range(n)]
        if self.protocol == "cla-amac" and sc.gcp.enabled:
            cfg = sc.gcp.to_channel()
            self.gcp_cfg = cfg
            self.control_plane = ControlPlane(
                self.kernel, cfg, n,
                deliver=self._gcp_deliver,
                debit=self._gcp_debit,
                alive=lambda i: self.trackers[i].ledger.alive)
            self.kernel.schedule(cfg.period_ns, self._gcp_round, target="gcp", kind="round")
        else:
            self.control_plane = None

        if sc.selector.enabled:
            self.selector_window_ns = round(sc.selector.window_s * 1e9)
            self.kernel.schedule(self.selector_window_ns, self._selector_tick,
                                 target="selector", kind="window")

        for tracker in self.trackers:
            tracker.poke(0)

    def _make_policy(self):
        sc = self.scenario
        if self.protocol == "dcf":
            return DcfPolicy(sc.mac, sc.power.pt_max_dbm)
        if self.protocol == "basic-pc":
            return BasicPcPolicy(sc.mac, sc.power.pt_min_dbm, sc.power.pt_max_dbm)
        return ClaPolicy(sc.mac, sc.cla, sc.power.pt_min_dbm, sc.power.pt_max_dbm,
                         self.kernel)

    def _tx_powers(self) -> np.ndarray:
        # Per-link powers: a link (a, b) exists when it would survive at the
        # power a actually uses toward b, not at some unrelated aggregate.
        return np.array([[p.tx_power_dbm(j) for j in range(self.n)]
                         for p in self.policies])

    def _flow_stop(self, flow) -> int:
        return self.t_end if flow.stop_ns is None else min(flow.stop_ns, self.t_end)

    # -- hooks -----------------------------------------------------------------

    def _make_deliver(self, node: int):
        def deliver(frame: Frame, sig: SignalEvent, now: int) -> None:
            self.ever_active.add(node)
            if frame.final_dst == node:
                self.decode_times.append(now)
            if not self.dedup[node].accept(frame.origin, frame.seq):
                return
            if frame.final_dst == node:
                self.packets_received += 1
                self.packets_rx_node[node] += 1
                self.delivered_bits += frame.payload_bytes * 8
                self.delays_ns.append(now - frame.created_at)
            else:
                self._forward(node, frame, now)
        return deliver

    def _forward(self, node: int, frame: Frame, now: int) -> None:
        hop = self.routes[node].get(frame.final_dst)
        if hop is None:
            self.drops[node] += 1
            self._count_drop("unroutable")
            return
        copy = Frame(DATA, node, hop, frame.seq, payload_bytes=frame.payload_bytes,
                     created_at=frame.created_at, origin=frame.origin,
                     final_dst=frame.final_dst)
        self.macs[node].enqueue(copy)

    def _make_drop(self, node: int):
        def drop(frame: Frame, reason: str, now: int) -> None:
            self.drops[node] += 1
            self._count_drop(reason)
        return drop

    def _count_drop(self, reason: str) -> None:
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1
        if reason == "unroutable":
            self.unroutable += 1

    def _on_timeout_label(self, frame: Frame, label: str, now: int) -> None:
        self.timeout_labels[label] = self.timeout_labels.get(label, 0) + 1

    def _make_verdict(self, node: int):
        def verdict(sig: SignalEvent, v: str, now: int) -> None:
            if v == COLLISION_LOSS and sig.frame.kind == DATA and sig.frame.dst == node:
                self.collisions_rx[node] += 1
        return verdict

    def _make_tx_complete(self, node: int, mac_hook):
        def tx_complete(sig: SignalEvent, now: int) -> None:
            mac_hook(sig, now)
            self.ever_active.add(node)
            frame = sig.frame
            if frame.kind == DATA and frame.dst >= 0:
                self.tx_data_attempts += 1
                if sig.verdicts.get(frame.dst) == COLLISION_LOSS:
                    self.collisions_tx[node] += 1
        return tx_complete

    def _make_mac_trace(self, sink):
        def trace(now, node, event, stage, counter, power):
            sink.write(f"{now}\t{node}\t{event}\t{stage}\t{counter}\t{power:.2f}\n")
        return trace

    # -- periodic drivers ----------------------------------------------------------

    def _emit(self, flow_idx: int) -> None:
        flow = self.flows[flow_idx]
        now = self.kernel.now
        if self.trackers[flow.src].ledger.alive:
            self.packets_sent += 1
            seq = self.seq_next[flow.src]
            self.seq_next[flow.src] += 1
            hop = self.routes[flow.src].get(flow.dst)
            if hop is None:
                self.drops[flow.src] += 1
                self._count_drop("unroutable")
            else:
                frame = Frame(DATA, flow.src, hop, seq, payload_bytes=flow.payload_bytes,
                              created_at=now, origin=flow.src, final_dst=flow.dst)
                self.macs[flow.src].enqueue(frame)
        nxt = now + flow.interval_ns
        if nxt < self._flow_stop(flow):
            self.kernel.schedule(nxt, self._emit, flow_idx,
                                 target=f"cbr{flow.src}", kind="emit")

    def _routing_tick(self, _=None) -> None:
        self._recompute_routes()
        nxt = self.kernel.now + self.routing_epoch_ns
        if nxt <= self.t_end:
            self.kernel.schedule(nxt, self._routing_tick, target="routing", kind="epoch")

    def _recompute_routes(self) -> None:
        self.routes = compute_routes(self.channel.positions, self._tx_powers(),
                                     self.scenario.channel, self.channel.alive,
                                     self.scenario.routing_margin_db,
                                     self.channel.shadow_db)

    def _mobility_tick(self, _=None) -> None:
        now = self.kernel.now
        dt_s = self.mobility_step_ns / 1e9
        for i in range(self.n):
            if self.trackers[i].ledger.alive:
                pos = tuple(self.channel.positions[i])
                self.channel.move_node(i, self.walkers[i].move_step(pos, dt_s,
                                                                    self.mobility_rngs[i]))
        nxt = now + self.mobility_step_ns
        if nxt <= self.t_end:
            self.kernel.schedule(nxt, self._mobility_tick, target="mobility", kind="step")

    def _gcp_round(self, _=None) -> None:
        now = self.kernel.now
        for i in range(self.n):
            if self.trackers[i].ledger.alive:
                report = build_report(i, self.policies[i].kb,
                                      self.policies[i].power.tx_power_dbm, now)
                self.control_plane.publish(report)
                self.gcp_stats["published"] += 1
                if "gcp" in self.traces:
                    self.traces["gcp"].write(
                        f"{now}\tpublish\t{i}\theard={len(report.heard)}\t"
                        f"util={report.slot_util:.3f}\n")
                if "kb" in self.traces:
                    kb = self.policies[i].kb
                    self.traces["kb"].write(
                        f"{now}\t{i}\tewma={kb.collision_ewma:.4f}\t"
                        f"neighbors={kb.active_neighbors(now, self.policies[i].horizon_ns)}\t"
                        f"power={self.policies[i].power.tx_power_dbm:.2f}\n")
        nxt = now + self.gcp_cfg.period_ns
        if nxt <= self.t_end:
            self.kernel.schedule(nxt, self._gcp_round, target="gcp", kind="round")

    def _gcp_deliver(self, node: int, report) -> None:
        sc = self.scenario
        status = apply_report(self.policies[node].kb, report, node, self.kernel.now,
                              self.policies[node].ttl_ns, sc.channel.sinr_threshold_db,
                              sc.channel.noise_floor_dbm, sc.cla.margin_db,
                              self.gcp_seen[node])
        self.gcp_stats[status] += 1
        if "gcp" in self.traces:
            self.traces["gcp"].write(f"{self.kernel.now}\tdeliver\t{report.origin}->{node}\t{status}\n")

    def _gcp_debit(self, origin: int, joules: float) -> None:
        tracker = self.trackers[origin]
        tracker.ledger.debit_gcp(joules)
        tracker.poke(self.kernel.now)

    def _selector_tick(self, _=None) -> None:
        now = self.kernel.now
        choice = CSMA
        live = [f for f in self.flows if self.trackers[f.src].ledger.alive]
        if live:
            rate = math.fsum(f.payload_bytes * 8 / (f.interval_ns / 1e9) for f in live) / len(live)
            choice = select_protocol(FlowStats(mean_rate_bps=rate, interarrival_cov=0.0))
        self.selector_log.append({"t_s": s_from_ticks(now), "choice": choice})
        nxt = now + self.selector_window_ns
        if nxt <= self.t_end:
            self.kernel.schedule(nxt, self._selector_tick, target="selector", kind="window")

    # -- death ----------------------------------------------------------------------

    def _die(self, node: int, now: int) -> None:
        tracker = self.trackers[node]
        if not tracker.ledger.alive:
            return
        tracker.ledger.mark_dead(now)
        self.alive_count -= 1
        self.macs[node].shutdown()
        sig = self.channel.tx_active[node]
        if sig is not None:
            self.channel.truncate_transmission(sig, now)
        self.channel.radios[node].shut_down(now)
        self.channel.alive[node] = False
        self._recompute_routes()
        self.deaths.append((now, node in self.ever_active))
        self.viability.append((now, self._any_viable_flow()))

    def _any_viable_flow(self) -> bool:
        for flow in self.flows:
            if (self.trackers[flow.src].ledger.alive
                    and self.trackers[flow.dst].ledger.alive
                    and flow.dst in self.routes[flow.src]):
                return True
        return False

    # -- run ---------------------------------------------------------------------

    def run(self) -> RunResult:
        self.kernel.run_until(self.t_end)
        for tracker in self.trackers:
            if tracker.ledger.alive:
                tracker.ledger.settle(self.t_end)

        audit_err = 0.0
        per_node = []
        for i, tracker in enumerate(self.trackers):
            consumed = self.scenario.initial_energy(i) - tracker.ledger.energy_j
            audit_err = max(audit_err, abs(consumed - tracker.ledger.consumed_audit_j()))
            per_node.append(NodeStats(node=i, collisions=self.collisions_tx[i],
                                      drops=self.drops[i], energy_j=consumed,
                                      packets_rx=self.packets_rx_node[i]))

        fnd_s, lnd_s, rcvd_s = lifetimes(self.deaths, self.viability, self.decode_times)
        sim_time_s = s_from_ticks(self.t_end)
        metadata = {
            "seed": self.seed,
            "protocol": self.protocol,
            "scenario": self.scenario.to_dict(),
            "scenario_hash": self.scenario.effective_hash(),
            "scenario_name": self.scenario.name,
            "sim_time_s": sim_time_s,
            "version": __version__,
            "rng": RNG_ALGORITHM,
            "positions": [[float(x), float(y)] for x, y in self.initial_positions],
            "flows": [[f.src, f.dst] for f in self.flows],
            "tx_data_attempts": self.tx_data_attempts,
            "collisions_rx": list(self.collisions_rx),
            "drop_reasons": dict(sorted(self.drop_reasons.items())),
            "timeout_labels": dict(sorted(self.timeout_labels.items())),
            "deaths": [[s_from_ticks(t), active] for t, active in self.deaths],
            "alive_at_end": self.alive_count,
            "energy_audit_max_err_j": audit_err,
            "gcp": dict(self.gcp_stats),
            "selector": self.selector_log,
        }
        result = RunResult(
            packets_sent=self.packets_sent,
            packets_received=self.packets_received,
            throughput_mbps=throughput_mbps(self.delivered_bits, sim_time_s),
            packets_per_s=self.packets_received / sim_time_s,
            fnd_s=fnd_s, lnd_s=lnd_s, lifetime_rcvd_s=rcvd_s,
            mean_delay_s=mean_delay_s(self.delays_ns),
            per_node=per_node, metadata=metadata)
        result.check()
        return result


def run_scenario(scenario: Scenario, protocol: str | None = None, seed: int = 0,
                 traces: dict | None = None) -> RunResult:
    """Build and execute one deterministic run."""
    return Simulation(scenario, protocol, seed, traces).run()
