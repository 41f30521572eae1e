"""Fixed-step simulation of a mobile router travelling past fixed nodes.

One tick is 1/tick_hz seconds (1 ms by default). Per tick the loop
completes a pending handoff, sends probes, sends the bidirectional data
packets of the current slot, and on decision ticks runs the handoff engine.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any

from . import channel
from .channel import DIRECTIONS, UPLINK, ChannelConfig, RssiSample
from .handoff import HandoffEngine, NodePlan, TriggerConfig, TriggerDecision
from .mpls import (PROTO_ICMP, Fec, ForwardingPlane, NhlfeEntry, NodeTables, Op,
                   Packet, Verdict, flow)
from .rssi_filter import FilterConfig

KMH = 1.0 / 3.6

# order of events within one tick
EVENT_KINDS = ("handoff_complete", "decision", "handoff_start", "probe", "packet_tx",
               "packet_drop", "sample")
_KIND_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}

UPLINK_LSP = "uplink"
DOWNLINK_LSP = "downlink"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class FixedNode:
    id: str
    position_m: float
    channel: ChannelConfig = field(default_factory=ChannelConfig)


@dataclass(frozen=True)
class Fade:
    """Scripted extra attenuation on one link."""

    node: str
    start_s: float
    duration_s: float
    depth: float

    def covers(self, t_s: float) -> bool:
        return self.start_s <= t_s < self.start_s + self.duration_s


@dataclass(frozen=True)
class Scenario:
    fixed_nodes: tuple[FixedNode, ...]
    route_length_m: float = 100.0
    # constant speed, or ((t_start_s, speed), ...) segments starting at t=0
    mobile_speed_mps: float | tuple[tuple[float, float], ...] = 5.0 * KMH
    start_position_m: float = 0.0
    tick_hz: int = 1000
    traffic_pps: int = 75
    traffic_rate_mbps: float = 6.0
    handoff_exec_delay_ms: float = 20.0
    duration_s: float | None = None
    seed: int = 1
    fades: tuple[Fade, ...] = ()
    route: tuple[str, ...] | None = None
    mobile_id: str = "M"
    gateway_id: str = "GW"
    mobile_ip: str = "10.0.0.1"
    gateway_ip: str = "10.0.0.254"

    def __post_init__(self):
        object.__setattr__(self, "fixed_nodes", tuple(self.fixed_nodes))
        object.__setattr__(self, "fades", tuple(self.fades))
        if not isinstance(self.mobile_speed_mps, (int, float)):
            segs = tuple((float(a), float(b)) for a, b in self.mobile_speed_mps)
            object.__setattr__(self, "mobile_speed_mps", segs)
        if self.route is not None:
            object.__setattr__(self, "route", tuple(self.route))
        self.validate()

    def validate(self) -> None:
        if not self.fixed_nodes:
            raise ScenarioError("scenario has no fixed nodes")
        ids = [n.id for n in self.fixed_nodes]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate fixed node ids: {ids}")
        if {self.mobile_id, self.gateway_id} & set(ids):
            raise ScenarioError("mobile/gateway ids clash with fixed node ids")
        pos = [n.position_m for n in self.fixed_nodes]
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ScenarioError(f"fixed node positions must be strictly increasing: {pos}")
        if self.route_length_m <= 0:
            raise ScenarioError("route_length_m must be positive")
        if self.tick_hz <= 0:
            raise ScenarioError("tick_hz must be positive")
        if not 0 < self.traffic_pps <= self.tick_hz:
            raise ScenarioError("traffic_pps must be in (0, tick_hz]")
        if self.handoff_exec_delay_ms < 0:
            raise ScenarioError("handoff_exec_delay_ms must be >= 0")
        if isinstance(self.mobile_speed_mps, tuple):
            segs = self.mobile_speed_mps
            if not segs or segs[0][0] != 0.0:
                raise ScenarioError("speed segments must start at t=0")
            if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
                raise ScenarioError("speed segment start times must increase")
            if any(s < 0 for _, s in segs):
                raise ScenarioError("speed must be >= 0")
        elif self.mobile_speed_mps < 0:
            raise ScenarioError("speed must be >= 0")
        for fade in self.fades:
            if fade.node not in ids:
                raise ScenarioError(f"fade references unknown node {fade.node!r}")
        if self.route is not None:
            missing = [r for r in self.route if r not in ids]
            if missing:
                raise ScenarioError(f"route lists nodes absent from fixed_nodes: {missing}")
            order = [ids.index(r) for r in self.route]
            if order != sorted(order):
                raise ScenarioError("route order must follow fixed node positions")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ScenarioError("duration_s must be positive")
        self.total_duration_s()

    @property
    def plan_nodes(self) -> tuple[str, ...]:
        return self.route if self.route is not None else tuple(n.id for n in self.fixed_nodes)

    def node(self, node_id: str) -> FixedNode:
        for n in self.fixed_nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def _segments(self) -> tuple[tuple[float, float], ...]:
        if isinstance(self.mobile_speed_mps, tuple):
            return self.mobile_speed_mps
        return ((0.0, float(self.mobile_speed_mps)),)

    def position(self, t_s: float) -> float:
        segs = self._segments()
        x = self.start_position_m
        for i, (start, speed) in enumerate(segs):
            if t_s <= start:
                break
            end = segs[i + 1][0] if i + 1 < len(segs) else math.inf
            x += speed * (min(t_s, end) - start)
        return min(max(x, 0.0), self.route_length_m)

    def total_duration_s(self) -> float:
        if self.duration_s is not None:
            return self.duration_s
        remaining = self.route_length_m - self.start_position_m
        segs = self._segments()
        for i, (start, speed) in enumerate(segs):
            end = segs[i + 1][0] if i + 1 < len(segs) else math.inf
            span = end - start
            if speed > 0 and remaining <= speed * span:
                return start + remaining / speed
            remaining -= speed * span if math.isfinite(span) else 0.0
        raise ScenarioError("mobile never reaches the route end and no duration_s given")

    @property
    def n_ticks(self) -> int:
        return int(round(self.total_duration_s() * self.tick_hz))

    def ms_to_ticks(self, ms: float) -> int:
        return int(round(ms * self.tick_hz / 1000.0))

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def default_scenario(seed: int = 1, **overrides) -> Scenario:
    """Three fixed nodes 30 m apart along a 100 m corridor, pedestrian speed."""
    nodes = (FixedNode("R2", 20.0), FixedNode("R3", 50.0), FixedNode("R4", 80.0))
    params = dict(fixed_nodes=nodes, route_length_m=100.0, seed=seed)
    params.update(overrides)
    return Scenario(**params)


def build_static_lsps(scenario: Scenario, attach: str | None = None) -> ForwardingPlane:
    """Static uplink (mobile -> fixed -> gateway) and downlink LSPs.

    Every fixed node swaps the same labels, so a handoff only has to rewrite
    the next hop at the mobile (uplink) and at the gateway (downlink).
    """
    attach = attach or scenario.plan_nodes[0]
    m, gw = scenario.mobile_id, scenario.gateway_id
    tables = {
        m: NodeTables(
            ftn=[(Fec(dst_ip=scenario.gateway_ip), 1)],
            ilm={201: 2},
            nhlfe={1: NhlfeEntry(1, Op.PUSH, 100, attach, UPLINK_LSP),
                   2: NhlfeEntry(2, Op.POP, None, None, DOWNLINK_LSP)},
        ),
        gw: NodeTables(
            ftn=[(Fec(dst_ip=scenario.mobile_ip), 1)],
            ilm={101: 2},
            nhlfe={1: NhlfeEntry(1, Op.PUSH, 200, attach, DOWNLINK_LSP),
                   2: NhlfeEntry(2, Op.POP, None, None, UPLINK_LSP)},
        ),
    }
    for n in scenario.fixed_nodes:
        tables[n.id] = NodeTables(
            ilm={100: 1, 200: 2},
            nhlfe={1: NhlfeEntry(1, Op.SWAP, 101, gw, UPLINK_LSP),
                   2: NhlfeEntry(2, Op.SWAP, 201, m, DOWNLINK_LSP)},
        )
    return ForwardingPlane(tables)


def data_packet(scenario: Scenario, direction: str, seq: int = 0) -> Packet:
    """ICMP packet between mobile and gateway, carrying ``seq`` as payload."""
    payload = seq.to_bytes(8, "big")
    if direction == UPLINK:
        return Packet(flow(scenario.mobile_ip, 0, scenario.gateway_ip, 0, PROTO_ICMP), payload)
    return Packet(flow(scenario.gateway_ip, 0, scenario.mobile_ip, 0, PROTO_ICMP), payload)


def serving_hop(plane: ForwardingPlane, scenario: Scenario, direction: str,
                seq: int = 0) -> str | None:
    """Fixed node the LSP currently uses to reach (or leave) the mobile."""
    ingress = scenario.mobile_id if direction == UPLINK else scenario.gateway_id
    result = plane.forward(ingress, data_packet(scenario, direction, seq))
    if result.verdict is not Verdict.DELIVERED or len(result.path) < 3:
        return None
    return result.path[1]


@dataclass(frozen=True)
class SimEvent:
    tick: int
    kind: str
    node: str = ""
    detail: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def sort_key(self):
        return (self.tick, _KIND_RANK[self.kind], self.node)


@dataclass(frozen=True)
class Handoff:
    start_tick: int
    complete_tick: int | None
    old: str
    new: str


@dataclass
class SimTrace:
    meta: dict[str, Any]
    samples: list[RssiSample] = field(default_factory=list)
    smoothed: list[tuple[int, str, float]] = field(default_factory=list)
    events: list[SimEvent] = field(default_factory=list)
    decisions: list[TriggerDecision] = field(default_factory=list)

    @property
    def tick_hz(self) -> int:
        return self.meta["tick_hz"]

    def events_of(self, kind: str) -> list[SimEvent]:
        return [e for e in self.events if e.kind == kind]

    def handoffs(self) -> list[Handoff]:
        starts = self.events_of("handoff_start")
        completes = self.events_of("handoff_complete")
        out = []
        for i, s in enumerate(starts):
            done = completes[i].tick if i < len(completes) else None
            out.append(Handoff(s.tick, done, s.detail["old"], s.detail["new"]))
        return out

    def attachment_sequence(self) -> list[str]:
        seq = [self.meta["initial_attachment"]]
        seq += [e.node for e in self.events_of("handoff_complete")]
        return seq

    def serving_at(self):
        """Function mapping a tick to the node carrying mobile data traffic."""
        changes = [(e.tick, e.node) for e in self.events_of("handoff_complete")]
        first = self.meta["initial_attachment"]

        def at(tick: int) -> str:
            node = first
            for t, n in changes:
                if t <= tick:
                    node = n
                else:
                    break
            return node
        return at


@dataclass
class _Pending:
    old: str
    new: str
    resume_tick: int


class _Simulation:
    def __init__(self, scenario: Scenario, trigger: TriggerConfig, filter_config: FilterConfig,
                 mode: str, attach: str | None, plane: ForwardingPlane | None):
        self.sc = scenario
        self.trigger = trigger
        self.mode = mode
        plan = NodePlan(scenario.plan_nodes)
        self.engine = HandoffEngine(plan, trigger, filter_config)
        self.attach = attach or plan.current
        if mode == "handoff" and self.attach != plan.current:
            raise ScenarioError("handoff mode must start attached to the first route node")
        self.plane = plane if plane is not None else build_static_lsps(scenario)
        self.seq = 0
        self._initial_attach()
        self.rngs = {n.id: channel.link_rng(scenario.seed, i, n.channel.rng_seed)
                     for i, n in enumerate(scenario.fixed_nodes)}
        self.configs = {n.id: n.channel for n in scenario.fixed_nodes}
        self.positions = {n.id: n.position_m for n in scenario.fixed_nodes}
        self.fades: dict[str, list[Fade]] = {}
        for f in scenario.fades:
            self.fades.setdefault(f.node, []).append(f)
        self.trace = SimTrace(meta={
            "mode": mode,
            "tick_hz": scenario.tick_hz,
            "seed": scenario.seed,
            "scenario_fingerprint": scenario.fingerprint(),
            "initial_attachment": self.attach,
            "plan": list(plan.nodes),
            "traffic_pps": scenario.traffic_pps,
            "traffic_rate_mbps": scenario.traffic_rate_mbps,
            "handoff_exec_delay_ms": scenario.handoff_exec_delay_ms,
        })

    def _initial_attach(self):
        first = self._serving_hop(UPLINK)
        if first is not None and first != self.attach:
            for lsp in (UPLINK_LSP, DOWNLINK_LSP):
                self.plane.rewire_lsp(first, self.attach, lsp)

    def _serving_hop(self, direction: str) -> str | None:
        self.seq += 1
        return serving_hop(self.plane, self.sc, direction, self.seq)

    def _draw(self, tick: int, node: str, direction: str, traffic: str) -> RssiSample:
        t_s = tick / self.sc.tick_hz
        cfg = self.configs[node]
        rng = self.rngs[node]
        distance = self.sc.position(t_s) - self.positions[node]
        offset = -sum(f.depth for f in self.fades.get(node, ()) if f.covers(t_s))
        raw = channel.sample_rssi(cfg, distance, rng, offset)
        ok = channel.draw_delivery(cfg, raw, rng)
        return RssiSample(tick, node, raw, ok, direction, traffic)

    def _observe(self, sample: RssiSample) -> None:
        self.trace.samples.append(sample)
        value = self.engine.ingest(sample)
        if value is not None:
            self.trace.smoothed.append((sample.tick, sample.node_id, value))

    def _emit(self, tick, kind, node="", **detail):
        self.trace.events.append(SimEvent(tick, kind, node, detail))

    def _send(self, tick: int, node: str, direction: str, traffic: str, serving: bool) -> None:
        sample = self._draw(tick, node, direction, traffic)
        self._emit(tick, "packet_tx", node, direction=direction, traffic=traffic,
                   serving=int(serving))
        self._observe(sample)
        if not sample.delivered:
            self._emit(tick, "packet_drop", node, direction=direction, traffic=traffic,
                       serving=int(serving), reason="channel")

    def _is_slot(self, tick: int) -> bool:
        return (tick * self.sc.traffic_pps) % self.sc.tick_hz < self.sc.traffic_pps

    def run(self) -> SimTrace:
        sc = self.sc
        delay = sc.ms_to_ticks(sc.handoff_exec_delay_ms)
        period = self.trigger.decision_period_ticks
        pending: _Pending | None = None
        for tick in range(sc.n_ticks):
            if pending is not None and tick >= pending.resume_tick:
                self._complete(tick, pending)
                pending = None

            # decide on samples from earlier ticks, so a fired handoff
            # interrupts all traffic of the tick it fires on
            if self.mode == "handoff" and pending is None and tick % period == 0:
                before = len(self.engine.decisions)
                cmd = self.engine.decision_cycle(tick)
                if len(self.engine.decisions) > before:
                    dec = self.engine.decisions[-1]
                    self._emit(tick, "decision", dec.current or "", **decision_detail(dec))
                if cmd is not None:
                    self._emit(tick, "handoff_start", cmd.old, old=cmd.old, new=cmd.new)
                    pending = _Pending(cmd.old, cmd.new, tick + delay)
                    if delay == 0:
                        self._complete(tick, pending)
                        pending = None
            interrupted = pending is not None

            if self.mode == "handoff":
                for d in self.engine.probe_schedule(tick):
                    if interrupted:
                        for direction in DIRECTIONS:
                            self._emit(tick, "packet_drop", d.target, direction=direction,
                                       traffic="probe", serving=0, reason="handoff")
                        continue
                    self._emit(tick, "probe", d.target, count=d.count)
                    for _ in range(d.count):
                        for direction in DIRECTIONS:
                            self._send(tick, d.target, direction, "probe", False)

            if self._is_slot(tick):
                for direction in DIRECTIONS:
                    if interrupted:
                        self._emit(tick, "packet_drop", pending.old, direction=direction,
                                   traffic="data", serving=1, reason="handoff")
                        continue
                    hop = self._serving_hop(direction)
                    if hop is None:
                        self._emit(tick, "packet_drop", "", direction=direction,
                                   traffic="data", serving=1, reason="forwarding")
                    else:
                        self._send(tick, hop, direction, "data", True)
                    if self.mode == "baseline":
                        for n in sc.fixed_nodes:
                            if n.id != hop:
                                self._send(tick, n.id, direction, "data", False)

        self.trace.decisions = list(self.engine.decisions)
        self.trace.events.sort(key=SimEvent.sort_key)
        return self.trace

    def _complete(self, tick: int, pending: _Pending) -> None:
        for lsp in (UPLINK_LSP, DOWNLINK_LSP):
            self.plane.rewire_lsp(pending.old, pending.new, lsp)
        self._emit(tick, "handoff_complete", pending.new, old=pending.old, new=pending.new,
                   plane_version=self.plane.version)


def decision_detail(dec: TriggerDecision) -> dict[str, Any]:
    return {
        "current": dec.current,
        "next": dec.next,
        "fired": int(dec.fired),
        "region": dec.region,
        "rssi_curr": dec.rssi_curr,
        "rssi_next": dec.rssi_next,
        "next_loss": dec.next_loss,
        "reason": dec.reason.value,
    }


def run(scenario: Scenario, trigger: TriggerConfig | None = None,
        filter_config: FilterConfig | None = None, *, plane: ForwardingPlane | None = None
        ) -> SimTrace:
    """Simulate with the handoff engine driving the attachment."""
    sim = _Simulation(scenario, trigger or TriggerConfig(), filter_config or FilterConfig(),
                      "handoff", None, plane)
    return sim.run()


def run_baseline(scenario: Scenario, attach: str | None = None,
                 filter_config: FilterConfig | None = None, *,
                 trigger: TriggerConfig | None = None,
                 plane: ForwardingPlane | None = None) -> SimTrace:
    """Static attachment to ``attach`` (first route node by default) while
    every fixed node receives the same measurement traffic."""
    if attach is not None and attach not in scenario.plan_nodes:
        raise ScenarioError(f"baseline attachment {attach!r} is not on the route")
    sim = _Simulation(scenario, trigger or TriggerConfig(), filter_config or FilterConfig(),
                      "baseline", attach, plane)
    return sim.run()


@dataclass(frozen=True)
class TraceMetrics:
    loss_fraction: float
    packets: int
    lost: int
    handoffs: int
    interruptions_ms: tuple[float, ...]
    mean_serving_rssi: float


def trace_metrics(trace: SimTrace) -> TraceMetrics:
    attempted = lost = 0
    for e in trace.events:
        if e.detail.get("traffic") != "data" or not e.detail.get("serving"):
            continue
        if e.kind == "packet_tx":
            attempted += 1
        elif e.kind == "packet_drop":
            lost += 1
            if e.detail.get("reason") != "channel":
                attempted += 1
    serving = trace.serving_at()
    values = [v for tick, node, v in trace.smoothed if node == serving(tick)]
    hz = trace.tick_hz
    interruptions = tuple((h.complete_tick - h.start_tick) * 1000.0 / hz
                          for h in trace.handoffs() if h.complete_tick is not None)
    return TraceMetrics(
        loss_fraction=lost / attempted if attempted else 0.0,
        packets=attempted,
        lost=lost,
        handoffs=len(trace.handoffs()),
        interruptions_ms=interruptions,
        mean_serving_rssi=sum(values) / len(values) if values else float("nan"),
    )


@dataclass(frozen=True)
class Comparison:
    baseline: TraceMetrics
    handoff: TraceMetrics

    @property
    def loss_reduction(self) -> float:
        return self.baseline.loss_fraction - self.handoff.loss_fraction


def compare(baseline: SimTrace, handoff: SimTrace) -> Comparison:
    if baseline.meta["scenario_fingerprint"] != handoff.meta["scenario_fingerprint"]:
        raise ValueError("traces come from different scenarios or seeds")
    return Comparison(trace_metrics(baseline), trace_metrics(handoff))


@dataclass(frozen=True)
class WindowStat:
    node: str
    window: int
    start_tick: int
    samples: int
    mean_raw: float
    loss_fraction: float
    mean_smoothed: float | None
    min_smoothed: float | None
    max_smoothed: float | None


def window_stats(trace: SimTrace, window_s: float = 1.0) -> list[WindowStat]:
    """Per-link aggregates over fixed windows, recomputed from the raw records."""
    width = max(1, int(round(window_s * trace.tick_hz)))
    raw: dict[tuple[str, int], list[RssiSample]] = {}
    for s in trace.samples:
        raw.setdefault((s.node_id, s.tick // width), []).append(s)
    smooth: dict[tuple[str, int], list[float]] = {}
    for tick, node, v in trace.smoothed:
        smooth.setdefault((node, tick // width), []).append(v)
    out = []
    for key in sorted(raw):
        node, w = key
        rows = raw[key]
        sm = smooth.get(key, [])
        out.append(WindowStat(
            node, w, w * width, len(rows),
            sum(r.raw_rssi for r in rows) / len(rows),
            sum(1 for r in rows if not r.delivered) / len(rows),
            sum(sm) / len(sm) if sm else None,
            min(sm) if sm else None,
            max(sm) if sm else None,
        ))
    return out
