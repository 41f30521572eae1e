"""Config files, CSV traces and offline replay of recorded RSSI logs."""
from __future__ import annotations

import copy
import csv
import io
import ipaddress
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .channel import DIRECTIONS, RSSI_MAX, RSSI_MIN, ChannelConfig, RssiSample
from .handoff import HandoffEngine, NodePlan, TriggerConfig
from .mpls import Fec, ForwardingPlane, NhlfeEntry, NodeTables
from .rssi_filter import FilterConfig
from .sim import (Fade, FixedNode, Scenario, SimEvent, SimTrace, build_static_lsps,
                  decision_detail, serving_hop)

MODES = ("handoff", "baseline", "replay")

SAMPLES_HEADER = ("tick", "node", "direction", "raw_rssi", "delivered")
SMOOTHED_HEADER = ("tick", "node", "smoothed_rssi")
EVENTS_HEADER = ("tick", "kind", "detail")
RECORDED_HEADER = ("timestamp", "node", "direction", "raw_rssi", "delivered")


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TraceError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: Scenario
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    lsp_tables: dict[str, NodeTables] | None = None
    mode: str = "handoff"
    baseline_node: str | None = None
    output_dir: str = "out"

    def plane(self) -> ForwardingPlane:
        if self.lsp_tables is None:
            return build_static_lsps(self.scenario)
        return ForwardingPlane(copy.deepcopy(self.lsp_tables))

    def plan(self) -> NodePlan:
        return NodePlan(self.scenario.plan_nodes)


# config loading

_TRIGGER_KEYS = {"beta", "lambda_good", "lambda_bad", "loss_gate_pl", "decision_period_ms",
                 "loss_window", "probe_period_ms", "probe_count", "enabled",
                 "stability_shift", "fraction_bits", "staleness_ms", "feed"}
_SCENARIO_KEYS = {"route_length_m", "mobile_speed_mps", "mobile_speed_kmh", "start_position_m",
                  "tick_hz", "packets_per_second", "traffic_rate_mbps",
                  "handoff_exec_delay_ms", "duration_s", "seed", "mobile_id", "gateway_id",
                  "mobile_ip", "gateway_ip"}
_TOP_KEYS = {"mode", "baseline_node", "scenario", "channel", "fixed_nodes", "route", "fades",
             "trigger", "mpls", "output"}
_CHANNEL_KEYS = {f.name for f in fields(ChannelConfig)}


def _section(raw: dict, key: str, kind=dict):
    value = raw.get(key)
    if value is None:
        return kind()
    if not isinstance(value, kind):
        raise ConfigError(key, f"expected a {kind.__name__}")
    return value


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")


def _build(cls, path: str, **kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _ms_to_ticks(ms, tick_hz: int, path: str) -> int:
    ticks = ms * tick_hz / 1000.0
    if abs(ticks - round(ticks)) > 1e-9:
        raise ConfigError(path, f"{ms} ms is not a whole number of ticks at {tick_hz} Hz")
    return int(round(ticks))


def _channel(base: dict, overrides: dict, path: str) -> ChannelConfig:
    merged = {**base, **(overrides or {})}
    _check_keys(merged, _CHANNEL_KEYS, path)
    return _build(ChannelConfig, path, **merged)


def _parse_mpls(section: dict) -> dict[str, NodeTables] | None:
    nodes = section.get("nodes")
    # absent or empty: static LSPs are built from the scenario
    if nodes is None or nodes == {}:
        return None
    if not isinstance(nodes, dict):
        raise ConfigError("mpls.nodes", "expected a mapping of node id to tables")
    tables = {}
    for node, node_raw in nodes.items():
        path = f"mpls.nodes.{node}"
        node_raw = node_raw or {}
        _check_keys(node_raw, {"ftn", "ilm", "nhlfe"}, path)
        nhlfe = {}
        for i, e in enumerate(node_raw.get("nhlfe") or []):
            entry = _build(NhlfeEntry, f"{path}.nhlfe[{i}]", **e)
            nhlfe[entry.idx] = entry
        ftn = []
        for i, row in enumerate(node_raw.get("ftn") or []):
            fec = _build(Fec, f"{path}.ftn[{i}].fec", **(row.get("fec") or {}))
            ftn.append((fec, int(row["nhlfe"])))
        ilm = {int(k): int(v) for k, v in (node_raw.get("ilm") or {}).items()}
        for label, idx in ilm.items():
            if idx not in nhlfe:
                raise ConfigError(f"{path}.ilm.{label}", f"NHLFE index {idx} not defined")
        for i, (_, idx) in enumerate(ftn):
            if idx not in nhlfe:
                raise ConfigError(f"{path}.ftn[{i}].nhlfe", f"NHLFE index {idx} not defined")
        tables[str(node)] = NodeTables(ftn, ilm, nhlfe)
    return tables


def parse_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    _check_keys(raw, _TOP_KEYS, "<root>")

    sc = _section(raw, "scenario")
    _check_keys(sc, _SCENARIO_KEYS, "scenario")
    tick_hz = int(sc.get("tick_hz", 1000))

    trig = _section(raw, "trigger")
    _check_keys(trig, _TRIGGER_KEYS, "trigger")
    trigger_kwargs = {k: trig[k] for k in ("beta", "lambda_good", "lambda_bad", "loss_gate_pl",
                                           "loss_window", "probe_count", "enabled") if k in trig}
    trigger_kwargs["decision_period_ticks"] = _ms_to_ticks(
        trig.get("decision_period_ms", 100), tick_hz, "trigger.decision_period_ms")
    trigger_kwargs["probe_period_ticks"] = _ms_to_ticks(
        trig.get("probe_period_ms", 250), tick_hz, "trigger.probe_period_ms")
    if trig.get("lambda_bad", 3.0) >= trig.get("lambda_good", 6.0):
        raise ConfigError("trigger.lambda_bad", "lambda_bad < lambda_good is required")
    trigger = _build(TriggerConfig, "trigger", **trigger_kwargs)

    staleness = trig.get("staleness_ms", 1000)
    filt = _build(
        FilterConfig, "trigger",
        stability_shift=trig.get("stability_shift", 6),
        fraction_bits=trig.get("fraction_bits", 16),
        staleness_ticks=None if staleness is None else _ms_to_ticks(
            staleness, tick_hz, "trigger.staleness_ms"),
        feed=trig.get("feed", "both"),
    )

    base_channel = _section(raw, "channel")
    _check_keys(base_channel, _CHANNEL_KEYS, "channel")
    nodes_raw = raw.get("fixed_nodes")
    if nodes_raw is None:
        nodes_raw = [{"id": "R2", "position_m": 20.0}, {"id": "R3", "position_m": 50.0},
                     {"id": "R4", "position_m": 80.0}]
    if not isinstance(nodes_raw, list) or not nodes_raw:
        raise ConfigError("fixed_nodes", "expected a non-empty list")
    nodes = []
    for i, n in enumerate(nodes_raw):
        path = f"fixed_nodes[{i}]"
        _check_keys(n, {"id", "position_m", "channel"}, path)
        if "id" not in n or "position_m" not in n:
            raise ConfigError(path, "id and position_m are required")
        nodes.append(FixedNode(str(n["id"]), float(n["position_m"]),
                               _channel(base_channel, n.get("channel"), f"{path}.channel")))
    ids = [n.id for n in nodes]

    route = raw.get("route")
    if route is not None:
        missing = [r for r in route if str(r) not in ids]
        if missing:
            raise ConfigError("route", f"nodes {missing} are not defined in fixed_nodes")
        route = tuple(str(r) for r in route)

    fades = []
    for i, f in enumerate(raw.get("fades") or []):
        path = f"fades[{i}]"
        if f.get("node") not in ids:
            raise ConfigError(f"{path}.node", f"unknown node {f.get('node')!r}")
        fades.append(_build(Fade, path, **f))

    if "mobile_speed_mps" in sc and "mobile_speed_kmh" in sc:
        raise ConfigError("scenario.mobile_speed_kmh", "give either mobile_speed_mps or _kmh")
    speed = sc.get("mobile_speed_mps", 5.0 / 3.6)
    if "mobile_speed_kmh" in sc:
        kmh = sc["mobile_speed_kmh"]
        speed = kmh / 3.6 if isinstance(kmh, (int, float)) else [(t, v / 3.6) for t, v in kmh]
    scenario_kwargs = dict(
        fixed_nodes=tuple(nodes), mobile_speed_mps=speed, tick_hz=tick_hz,
        fades=tuple(fades), route=route,
    )
    renames = {"packets_per_second": "traffic_pps"}
    for key in _SCENARIO_KEYS - {"mobile_speed_mps", "mobile_speed_kmh", "tick_hz"}:
        if key in sc:
            scenario_kwargs[renames.get(key, key)] = sc[key]
    scenario = _build(Scenario, "scenario", **scenario_kwargs)

    lsp_tables = _parse_mpls(_section(raw, "mpls"))

    mode = raw.get("mode", "handoff")
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}")
    baseline_node = raw.get("baseline_node")
    if baseline_node is not None and baseline_node not in scenario.plan_nodes:
        raise ConfigError("baseline_node", f"{baseline_node!r} is not on the route")
    output = _section(raw, "output")
    cfg = RunConfig(scenario, trigger, filt, lsp_tables, mode, baseline_node,
                    str(output.get("dir", "out")))
    _check_cross_refs(cfg)
    return cfg


def _check_cross_refs(cfg: RunConfig) -> None:
    sc = cfg.scenario
    if cfg.lsp_tables is None:
        return
    known = {n.id for n in sc.fixed_nodes} | {sc.mobile_id, sc.gateway_id}
    for node, t in cfg.lsp_tables.items():
        if node not in known:
            raise ConfigError(f"mpls.nodes.{node}", "node is not a fixed node, mobile or gateway")
        for idx, e in t.nhlfe.items():
            if e.next_hop is not None and e.next_hop not in known:
                raise ConfigError(f"mpls.nodes.{node}.nhlfe[{idx}].next_hop",
                                  f"unknown node {e.next_hop!r}")
    for r in sc.plan_nodes:
        if r not in cfg.lsp_tables:
            raise ConfigError("mpls.nodes", f"route node {r!r} has no forwarding tables")
    plane = cfg.plane()
    for direction in DIRECTIONS:
        hop = serving_hop(plane, sc, direction)
        if hop is None:
            raise ConfigError("mpls.nodes", f"{direction} LSP does not reach its egress")
        if hop != sc.plan_nodes[0]:
            raise ConfigError("mpls.nodes",
                              f"{direction} LSP attaches to {hop!r}, route starts at "
                              f"{sc.plan_nodes[0]!r}")


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from exc
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    sc, hz = cfg.scenario, cfg.scenario.tick_hz

    def ms(ticks):
        return ticks * 1000.0 / hz

    speed = sc.mobile_speed_mps
    if isinstance(speed, tuple):
        speed = [list(s) for s in speed]
    out = {
        "mode": cfg.mode,
        "baseline_node": cfg.baseline_node,
        "scenario": {
            "route_length_m": sc.route_length_m, "mobile_speed_mps": speed,
            "start_position_m": sc.start_position_m, "tick_hz": hz,
            "packets_per_second": sc.traffic_pps, "traffic_rate_mbps": sc.traffic_rate_mbps,
            "handoff_exec_delay_ms": sc.handoff_exec_delay_ms, "duration_s": sc.duration_s,
            "seed": sc.seed, "mobile_id": sc.mobile_id, "gateway_id": sc.gateway_id,
            "mobile_ip": sc.mobile_ip, "gateway_ip": sc.gateway_ip,
        },
        "fixed_nodes": [{"id": n.id, "position_m": n.position_m, "channel": asdict(n.channel)}
                        for n in sc.fixed_nodes],
        "route": list(sc.route) if sc.route is not None else None,
        "fades": [asdict(f) for f in sc.fades],
        "trigger": {
            "beta": cfg.trigger.beta, "lambda_good": cfg.trigger.lambda_good,
            "lambda_bad": cfg.trigger.lambda_bad, "loss_gate_pl": cfg.trigger.loss_gate_pl,
            "decision_period_ms": ms(cfg.trigger.decision_period_ticks),
            "loss_window": cfg.trigger.loss_window,
            "probe_period_ms": ms(cfg.trigger.probe_period_ticks),
            "probe_count": cfg.trigger.probe_count, "enabled": cfg.trigger.enabled,
            "stability_shift": cfg.filter.stability_shift,
            "fraction_bits": cfg.filter.fraction_bits,
            "staleness_ms": None if cfg.filter.staleness_ticks is None
            else ms(cfg.filter.staleness_ticks),
            "feed": cfg.filter.feed,
        },
        "output": {"dir": cfg.output_dir},
    }
    if cfg.lsp_tables is not None:
        out["mpls"] = {"nodes": {node: _tables_to_dict(t) for node, t in cfg.lsp_tables.items()}}
    return out


def _tables_to_dict(t: NodeTables) -> dict:
    def fec(f: Fec):
        d = {}
        for name in ("src_ip", "src_port", "dst_ip", "dst_port", "proto"):
            v = getattr(f, name)
            if v is not None:
                d[name] = str(ipaddress.IPv4Address(v)) if name.endswith("_ip") else v
        return d

    return {
        "ftn": [{"fec": fec(f), "nhlfe": idx} for f, idx in t.ftn],
        "ilm": dict(t.ilm),
        "nhlfe": [{"idx": e.idx, "op": e.op.value, "out_label": e.out_label,
                   "next_hop": e.next_hop, "lsp": e.lsp} for e in t.nhlfe.values()],
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def set_config_value(raw: dict, dotted: str, value) -> dict:
    """Return a copy of ``raw`` with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(raw or {})
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, f"{p!r} is not a section")
    node[parts[-1]] = value
    return out


# CSV output

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_detail(detail: dict) -> str:
    return ";".join(f"{k}={_fmt(v)}" for k, v in detail.items())


def parse_detail(text: str) -> dict[str, str]:
    if not text:
        return {}
    return dict(item.split("=", 1) for item in text.split(";"))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_csv(trace: SimTrace, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write samples.csv, smoothed.csv and events.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("samples", "smoothed", "events")}
    _write(paths["samples"], SAMPLES_HEADER,
           ((s.tick, s.node_id, s.direction, s.raw_rssi, int(s.delivered))
            for s in trace.samples))
    _write(paths["smoothed"], SMOOTHED_HEADER,
           ((t, n, f"{v:.6f}") for t, n, v in trace.smoothed))
    _write(paths["events"], EVENTS_HEADER,
           ((e.tick, e.kind, format_detail({"node": e.node, **e.detail}))
            for e in trace.events))
    return paths


# recorded traces and replay

@dataclass(frozen=True)
class RecordedRow:
    timestamp: float
    node_id: str
    direction: str
    raw_rssi: int
    delivered: bool


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise TraceError(f"not a boolean: {text!r}")


def read_recorded(source, tick_hz: int = 1000) -> list[RecordedRow]:
    """Read a recorded trace. Accepts ``timestamp`` (seconds) or ``tick`` columns."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_recorded(io.StringIO(fh.read()), tick_hz)
    reader = csv.DictReader(source)
    cols = set(reader.fieldnames or ())
    time_col = "timestamp" if "timestamp" in cols else "tick" if "tick" in cols else None
    if time_col is None or not {"node", "direction", "raw_rssi", "delivered"} <= cols:
        raise TraceError(f"unexpected trace header: {reader.fieldnames}")
    rows = []
    last = -math.inf
    for lineno, rec in enumerate(reader, start=2):
        ts = float(rec[time_col])
        if time_col == "tick":
            ts /= tick_hz
        if ts < last:
            raise TraceError(f"line {lineno}: timestamps must be non-decreasing")
        last = ts
        raw = int(rec["raw_rssi"])
        if not RSSI_MIN <= raw <= RSSI_MAX:
            raise TraceError(f"line {lineno}: raw_rssi {raw} outside [0, 70]")
        if rec["direction"] not in DIRECTIONS:
            raise TraceError(f"line {lineno}: unknown direction {rec['direction']!r}")
        rows.append(RecordedRow(ts, rec["node"], rec["direction"], raw,
                                _parse_bool(rec["delivered"])))
    return rows


def write_recorded(trace: SimTrace, path: str | os.PathLike) -> None:
    hz = trace.tick_hz
    _write(Path(path), RECORDED_HEADER,
           ((f"{s.tick / hz:.6f}", s.node_id, s.direction, s.raw_rssi, int(s.delivered))
            for s in trace.samples))


def replay(recorded: list[RecordedRow], trigger: TriggerConfig, filter_config: FilterConfig,
           plan: NodePlan, *, tick_hz: int = 1000, exec_delay_ticks: int = 0,
           end_tick: int | None = None) -> SimTrace:
    """Drive the filters and the engine from recorded samples."""
    for row in recorded:
        if row.node_id not in plan.nodes:
            raise TraceError(f"node {row.node_id!r} is not in the node plan")
    samples = [RssiSample(int(round(r.timestamp * tick_hz)), r.node_id, r.raw_rssi,
                          r.delivered, r.direction) for r in recorded]
    for a, b in zip(samples, samples[1:]):
        if b.tick < a.tick:
            raise TraceError("timestamps must be non-decreasing")
    last_tick = samples[-1].tick if samples else 0
    end = last_tick if end_tick is None else end_tick

    engine = HandoffEngine(plan, trigger, filter_config)
    trace = SimTrace(meta={"mode": "replay", "tick_hz": tick_hz, "seed": None,
                           "scenario_fingerprint": None, "initial_attachment": plan.current,
                           "plan": list(plan.nodes)})
    period = trigger.decision_period_ticks
    resume = None
    i = 0

    def ingest_before(tick):
        nonlocal i
        while i < len(samples) and samples[i].tick < tick:
            s = samples[i]
            trace.samples.append(s)
            v = engine.ingest(s)
            if v is not None:
                trace.smoothed.append((s.tick, s.node_id, v))
            i += 1

    for tick in range(0, end + 1, period):
        ingest_before(tick)
        if resume is not None and tick >= resume[0]:
            _, old, new = resume
            trace.events.append(SimEvent(resume[0], "handoff_complete", new,
                                         {"old": old, "new": new}))
            resume = None
        if resume is not None:
            continue
        before = len(engine.decisions)
        cmd = engine.decision_cycle(tick)
        if len(engine.decisions) > before:
            dec = engine.decisions[-1]
            trace.events.append(SimEvent(tick, "decision", dec.current or "",
                                         decision_detail(dec)))
        if cmd is not None:
            trace.events.append(SimEvent(tick, "handoff_start", cmd.old,
                                         {"old": cmd.old, "new": cmd.new}))
            resume = (tick + exec_delay_ticks, cmd.old, cmd.new)
            if exec_delay_ticks == 0:
                trace.events.append(SimEvent(tick, "handoff_complete", cmd.new,
                                             {"old": cmd.old, "new": cmd.new}))
                resume = None
    ingest_before(math.inf)
    if resume is not None and resume[0] <= max(end, last_tick):
        trace.events.append(SimEvent(resume[0], "handoff_complete", resume[2],
                                     {"old": resume[1], "new": resume[2]}))
    trace.decisions = list(engine.decisions)
    trace.events.sort(key=SimEvent.sort_key)
    return trace
