"""Scenario files: strict JSON schema, defaults, and the effective-param hash.

A scenario resolves to plain dataclasses from the other modules. Loading is
strict — unknown keys and out-of-range values raise InvalidScenario with
field-level diagnostics instead of being silently ignored. The effective
parameter hash deliberately excludes the protocol choice so that runs of
different protocols on the same physical setup compare as the same scenario.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .channel import ChannelParams, PhyTimings
from .cla import ClaParams
from .errors import InvalidScenario
from .gcp import GcpChannel
from .kernel import MS, ticks_from_s
from .mac import MacTimings
from .nodestack import MobilitySpec, TrafficSpec

PROTOCOLS = ("dcf", "basic-pc", "cla-amac")

MAX_SIM_TIME_S = 3600.0
MAX_AREA_M = 1000.0


@dataclass(slots=True)
class PowerConfig:
    pt_max_dbm: float = 23.03  # 0.200888 W
    pt_min_dbm: float = 10.03  # 0.010072 W


@dataclass(slots=True)
class EnergyConfig:
    initial_j: float | list = 5.0
    rx_fraction: float = 0.45
    idle_fraction: float = 0.30
    pa_efficiency: float = 1.0


@dataclass(slots=True)
class TrafficConfig:
    kind: str = "all_to_random"  # or "flows" with an explicit list
    payload_bytes: int = 2048
    interval_ms: float = 25.0
    start_s: float = 0.0
    stop_s: float | None = None
    flows: list = field(default_factory=list)  # dicts: src,dst,payload_bytes,interval_ms[,start_s,stop_s]


@dataclass(slots=True)
class GcpConfig:
    enabled: bool = True
    period_ms: float = 500.0
    latency_ms: float = 10.0
    control_power_w: float = 0.01
    report_airtime_ms: float = 5.0

    def to_channel(self) -> GcpChannel:
        return GcpChannel(latency_ns=round(self.latency_ms * MS),
                          period_ns=round(self.period_ms * MS),
                          control_power_w=self.control_power_w,
                          report_airtime_ns=round(self.report_airtime_ms * MS))


@dataclass(slots=True)
class SelectorConfig:
    enabled: bool = False
    window_s: float = 1.0


@dataclass(slots=True)
class MobilityConfig:
    kind: str = "static"
    speed_min: float = 0.0
    speed_max: float = 2.0
    step_s: float = 1.0

    def to_spec(self) -> MobilitySpec:
        return MobilitySpec(kind=self.kind, speed_min=self.speed_min,
                            speed_max=self.speed_max, step_ns=ticks_from_s(self.step_s))


@dataclass(slots=True)
class Scenario:
    name: str = "unnamed"
    node_count: int = 40
    area_m: tuple = (600.0, 600.0)
    placement: str | list = "random"  # or explicit [[x, y], ...]
    sim_time_s: float = 100.0
    protocol: str = "dcf"
    routing_epoch_s: float = 1.0
    # extra headroom a link must clear before routing will use it; the link
    # field already includes static shadowing, so 0 admits exactly the links
    # that decode in the clear, and raising it buys interference headroom at
    # the price of extra hops
    routing_margin_db: float = 0.0
    max_sim_time_s: float = MAX_SIM_TIME_S
    channel: ChannelParams = field(default_factory=ChannelParams)
    phy: PhyTimings = field(default_factory=PhyTimings)
    mac: MacTimings = field(default_factory=MacTimings)
    cla: ClaParams = field(default_factory=ClaParams)
    power: PowerConfig = field(default_factory=PowerConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    gcp: GcpConfig = field(default_factory=GcpConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)

    # -- validation ---------------------------------------------------------

    def problems(self) -> list[str]:
        out = []
        if self.node_count < 1:
            out.append("node_count: must be >= 1")
        if self.protocol not in PROTOCOLS:
            out.append(f"protocol: {self.protocol!r} not one of {PROTOCOLS}")
        if not (0 < self.sim_time_s <= self.max_sim_time_s):
            out.append(f"sim_time_s: must be in (0, {self.max_sim_time_s}]")
        w, h = self.area_m
        if not (0 < w <= MAX_AREA_M and 0 < h <= MAX_AREA_M):
            out.append(f"area_m: each side must be in (0, {MAX_AREA_M}]")
        if isinstance(self.placement, list):
            if len(self.placement) != self.node_count:
                out.append(f"placement: {len(self.placement)} positions for {self.node_count} nodes")
            for i, pos in enumerate(self.placement):
                if len(pos) != 2 or not (0 <= pos[0] <= w and 0 <= pos[1] <= h):
                    out.append(f"placement[{i}]: outside area")
        elif self.placement != "random":
            out.append(f"placement: {self.placement!r} is neither 'random' nor a list")
        if not self.power.pt_min_dbm <= self.power.pt_max_dbm:
            out.append("power: pt_min_dbm must be <= pt_max_dbm")
        if isinstance(self.energy.initial_j, list):
            if len(self.energy.initial_j) != self.node_count:
                out.append("energy.initial_j: list length must equal node_count")
            if any(e <= 0 for e in self.energy.initial_j):
                out.append("energy.initial_j: all entries must be > 0")
        elif self.energy.initial_j <= 0:
            out.append("energy.initial_j: must be > 0")
        if self.traffic.kind not in ("all_to_random", "flows", "none"):
            out.append(f"traffic.kind: {self.traffic.kind!r} unknown")
        if self.traffic.kind == "all_to_random" and self.node_count < 2:
            out.append("traffic.kind all_to_random needs >= 2 nodes")
        if self.traffic.interval_ms <= 0:
            out.append("traffic.interval_ms: must be > 0")
        for i, f in enumerate(self.traffic.flows):
            spec = self._flow_spec(f)
            for p in spec.validate(self.node_count):
                out.append(f"traffic.flows[{i}]: {p}")
        for p in self.mobility.to_spec().validate():
            out.append(f"mobility: {p}")
        if self.routing_epoch_s <= 0:
            out.append("routing_epoch_s: must be > 0")
        if self.routing_margin_db < 0:
            out.append("routing_margin_db: must be >= 0")
        for label, params in (("channel", self.channel), ("phy", self.phy),
                              ("mac", self.mac), ("cla", self.cla)):
            try:
                params.validate()
            except ValueError as exc:
                out.append(f"{label}: {exc}")
        if self.gcp.enabled:
            try:
                self.gcp.to_channel().validate()
            except ValueError as exc:
                out.append(f"gcp: {exc}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise InvalidScenario(problems)

    # -- resolution ---------------------------------------------------------

    def _flow_spec(self, f: dict) -> TrafficSpec:
        return TrafficSpec(src=f["src"], dst=f["dst"],
                           payload_bytes=f.get("payload_bytes", self.traffic.payload_bytes),
                           interval_ns=round(f.get("interval_ms", self.traffic.interval_ms) * MS),
                           start_ns=ticks_from_s(f.get("start_s", self.traffic.start_s)),
                           stop_ns=None if f.get("stop_s") is None else ticks_from_s(f["stop_s"]))

    def traffic_specs(self, dst_for: dict[int, int] | None = None) -> list[TrafficSpec]:
        """Concrete flows; all_to_random needs the seeded dst map from the engine."""
        if self.traffic.kind == "none":
            return []
        if self.traffic.kind == "flows":
            return [self._flow_spec(f) for f in self.traffic.flows]
        assert dst_for is not None, "all_to_random traffic needs resolved destinations"
        stop = None if self.traffic.stop_s is None else ticks_from_s(self.traffic.stop_s)
        return [TrafficSpec(src=src, dst=dst, payload_bytes=self.traffic.payload_bytes,
                            interval_ns=round(self.traffic.interval_ms * MS),
                            start_ns=ticks_from_s(self.traffic.start_s), stop_ns=stop)
                for src, dst in sorted(dst_for.items())]

    def initial_energy(self, node: int) -> float:
        e = self.energy.initial_j
        return e[node] if isinstance(e, list) else e

    def sim_time_ns(self) -> int:
        return ticks_from_s(self.sim_time_s)

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _SECTIONS:
                d[f.name] = {sf.name: getattr(v, sf.name) for sf in fields(v)}
            elif f.name == "area_m":
                d[f.name] = list(v)
            else:
                d[f.name] = v
        return d

    def effective_hash(self) -> str:
        """Parameter fingerprint; protocol excluded so variants stay comparable."""
        d = self.to_dict()
        del d["protocol"]
        del d["name"]
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONS = {"channel": ChannelParams, "phy": PhyTimings, "mac": MacTimings,
             "cla": ClaParams, "power": PowerConfig, "energy": EnergyConfig,
             "traffic": TrafficConfig, "mobility": MobilityConfig,
             "gcp": GcpConfig, "selector": SelectorConfig}


def _build_section(name: str, cls, data: dict, problems: list[str]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        problems.append(f"{name}: unknown keys {sorted(unknown)}")
    kwargs = {k: v for k, v in data.items() if k in known}
    if name == "energy" and isinstance(kwargs.get("initial_j"), int):
        kwargs["initial_j"] = float(kwargs["initial_j"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{name}: {exc}")
        return cls()


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise InvalidScenario(["scenario file must hold a JSON object"])
    top_known = {f.name for f in fields(Scenario)}
    problems = []
    unknown = set(data) - top_known
    if unknown:
        problems.append(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: must be an object")
                continue
            kwargs[key] = _build_section(key, _SECTIONS[key], value, problems)
        elif key in top_known:
            kwargs[key] = tuple(value) if key == "area_m" else value
    if problems:
        raise InvalidScenario(problems)
    sc = Scenario(**kwargs)
    sc.validate()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenario([f"not valid JSON: {exc}"]) from None
    return scenario_from_dict(data)


def dump_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2) + "\n", encoding="utf-8")
