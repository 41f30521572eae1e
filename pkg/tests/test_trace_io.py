import csv
import io
from pathlib import Path

import pytest
import yaml

from transit_handoff import cli
from transit_handoff.handoff import TriggerConfig
from transit_handoff.rssi_filter import FilterConfig
from transit_handoff.sim import SimTrace, build_static_lsps, default_scenario, run, run_baseline
from transit_handoff.trace_io import (ConfigError, TraceError, config_to_dict, dump_config,
                                      emit_csv, format_detail, load_config, parse_config,
                                      parse_detail, read_recorded, replay, set_config_value,
                                      write_recorded, _tables_to_dict)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def handoff_trace():
    return run(default_scenario())


def write_yaml(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_empty_trigger_section_gives_defaults(tmp_path):
    cfg = load_config(write_yaml(tmp_path, {"trigger": {}}))
    t, f = cfg.trigger, cfg.filter
    assert (t.beta, t.lambda_good, t.lambda_bad, t.loss_gate_pl) == (25, 6, 3, 0.5)
    assert f.stability_shift == 6
    assert t.probe_period_ticks == 250 and t.decision_period_ticks == 100
    assert cfg.scenario == default_scenario()


def test_lambda_order_error(tmp_path):
    with pytest.raises(ConfigError, match=r"trigger\.lambda_bad: lambda_bad < lambda_good"):
        load_config(write_yaml(tmp_path, {"trigger": {"lambda_good": 3, "lambda_bad": 4}}))


def test_route_cross_reference_error():
    with pytest.raises(ConfigError) as exc:
        parse_config({"route": ["R2", "R9"]})
    assert exc.value.path == "route"


@pytest.mark.parametrize("raw, path", [
    ({"trigger": {"betta": 3}}, "trigger.betta"),
    ({"scenario": {"tick_hz": 1000}, "trigger": {"probe_period_ms": 0.5}}, "trigger"),
    ({"fades": [{"node": "X", "start_s": 0, "duration_s": 1, "depth": 3}]}, "fades[0].node"),
    ({"mode": "fly"}, "mode"),
    ({"baseline_node": "R7"}, "baseline_node"),
    ({"fixed_nodes": [{"id": "R2"}]}, "fixed_nodes[0]"),
    ({"channel": {"peak_rssi": 90}}, "fixed_nodes[0].channel"),
])
def test_config_errors_name_key_path(raw, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw)
    assert str(exc.value).startswith(path)


@pytest.mark.parametrize("name", ["indoor.yaml", "fade.yaml"])
def test_config_round_trip(name):
    cfg = load_config(CONFIGS / name)
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


def test_defaults_round_trip():
    cfg = parse_config({})
    assert parse_config(yaml.safe_load(dump_config(cfg))) == cfg


def test_mpls_section_round_trip_and_checks():
    raw = config_to_dict(parse_config({}))
    sc = default_scenario()
    plane = build_static_lsps(sc)
    raw["mpls"] = {"nodes": {n: _tables_to_dict(plane.tables(n)) for n in plane.nodes()}}
    cfg = parse_config(raw)
    assert cfg.lsp_tables is not None
    assert parse_config(yaml.safe_load(dump_config(cfg))) == cfg
    broken = yaml.safe_load(yaml.safe_dump(raw))
    broken["mpls"]["nodes"]["R2"]["nhlfe"][0]["next_hop"] = "Nowhere"
    with pytest.raises(ConfigError, match="mpls.nodes.R2"):
        parse_config(broken)


def test_set_config_value_does_not_mutate():
    raw = {"trigger": {"beta": 25}}
    out = set_config_value(raw, "trigger.stability_shift", 8)
    assert out == {"trigger": {"beta": 25, "stability_shift": 8}}
    assert raw == {"trigger": {"beta": 25}}


def test_detail_format():
    text = format_detail({"a": 1, "b": 0.5, "c": None, "d": True, "e": "x"})
    assert text == "a=1;b=0.500000;c=;d=1;e=x"
    assert parse_detail(text) == {"a": "1", "b": "0.500000", "c": "", "d": "1", "e": "x"}
    assert parse_detail("") == {}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_csv_layout_and_event_accounting(tmp_path, handoff_trace):
    paths = emit_csv(handoff_trace, tmp_path)
    assert read_rows(paths["samples"])[0] == ["tick", "node", "direction", "raw_rssi", "delivered"]
    assert read_rows(paths["smoothed"])[0] == ["tick", "node", "smoothed_rssi"]
    events = read_rows(paths["events"])
    assert events[0] == ["tick", "kind", "detail"]
    kinds = [r[1] for r in events[1:]]
    assert kinds.count("handoff_start") == 2 and kinds.count("handoff_complete") == 2
    assert len(read_rows(paths["samples"])) == len(handoff_trace.samples) + 1


def test_csv_byte_identical(tmp_path):
    sc = default_scenario(seed=4, duration_s=15.0)
    a, b = tmp_path / "a", tmp_path / "b"
    emit_csv(run(sc), a)
    emit_csv(run(sc), b)
    for name in ("samples.csv", "smoothed.csv", "events.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_empty_trace_header_only(tmp_path):
    paths = emit_csv(SimTrace(meta={"tick_hz": 1000}), tmp_path)
    assert paths["samples"].read_text() == "tick,node,direction,raw_rssi,delivered\n"
    assert paths["smoothed"].read_text() == "tick,node,smoothed_rssi\n"
    assert paths["events"].read_text() == "tick,kind,detail\n"


def float_refilter(samples_csv, events_csv, s=6, staleness=1000):
    """Float EWMA over delivered samples, reseeded on first sample, after a
    silence longer than ``staleness`` ticks, and for the new next node at
    each handoff."""
    resets = []
    for tick, kind, detail in read_rows(events_csv)[1:]:
        if kind == "handoff_start":
            resets.append(int(tick))
    plan = ["R2", "R3", "R4"]
    pending = {}
    for i, t in enumerate(resets):
        if i + 2 < len(plan):
            pending.setdefault(plan[i + 2], []).append(t)
    state, out = {}, []
    for tick, node, _, raw, delivered in read_rows(samples_csv)[1:]:
        tick, raw = int(tick), int(raw)
        if delivered != "1":
            continue
        y, last = state.get(node, (None, None))
        if pending.get(node) and any(last is not None and last < r <= tick for r in pending[node]):
            y = None
        if y is None or tick - last > staleness:
            y = float(raw)
        else:
            y += (raw - y) * 2.0 ** -s
        state[node] = (y, tick)
        out.append((tick, node, y))
    return out


@pytest.mark.parametrize("mode", ["handoff", "baseline"])
def test_smoothed_matches_offline_refilter(tmp_path, handoff_trace, mode):
    trace = handoff_trace if mode == "handoff" else run_baseline(default_scenario(duration_s=30.0))
    paths = emit_csv(trace, tmp_path)
    expected = float_refilter(paths["samples"], paths["events"])
    got = [(int(t), n, float(v)) for t, n, v in read_rows(paths["smoothed"])[1:]]
    assert [(t, n) for t, n, _ in got] == [(t, n) for t, n, _ in expected]
    # floor rounding of the shift is bounded by 2**s LSBs; CSV adds 5e-7
    tol = 64 / 65536 + 1e-6
    assert max(abs(a[2] - b[2]) for a, b in zip(got, expected)) <= tol


def replay_from_csv(tmp_path, trace, trigger=TriggerConfig(), filt=FilterConfig()):
    emit_csv(trace, tmp_path)
    rows = read_recorded(tmp_path / "samples.csv")
    return replay(rows, trigger, filt, load_config(CONFIGS / "indoor.yaml").plan(),
                  exec_delay_ticks=20)


def test_replay_reproduces_decisions(tmp_path, handoff_trace):
    again = replay_from_csv(tmp_path, handoff_trace)
    assert again.decisions == handoff_trace.decisions
    assert again.handoffs() == handoff_trace.handoffs()
    assert again.smoothed == handoff_trace.smoothed


def test_replay_recorded_format(tmp_path, handoff_trace):
    write_recorded(handoff_trace, tmp_path / "rec.csv")
    rows = read_recorded(tmp_path / "rec.csv")
    assert rows[0].timestamp == handoff_trace.samples[0].tick / 1000
    plan = load_config(CONFIGS / "indoor.yaml").plan()
    again = replay(rows, TriggerConfig(), FilterConfig(), plan, exec_delay_ticks=20)
    assert again.handoffs() == handoff_trace.handoffs()


def test_replay_unreachable_margin(tmp_path, handoff_trace):
    trig = TriggerConfig(lambda_good=70, lambda_bad=69)
    assert replay_from_csv(tmp_path, handoff_trace, trig).handoffs() == []


def test_replay_filter_lag(tmp_path):
    # an open-loop recording (every node sampled throughout); a handoff-mode
    # trace stops feeding the old node once the original run moved on
    recording = run_baseline(default_scenario())
    ticks = {}
    for s in (4, 8):
        trace = replay_from_csv(tmp_path / str(s), recording,
                                filt=FilterConfig(stability_shift=s))
        ticks[s] = [h.start_tick for h in trace.handoffs()]
    assert len(ticks[4]) == len(ticks[8]) == 2
    assert all(a <= b for a, b in zip(ticks[4], ticks[8]))


def test_replay_is_pure(tmp_path, handoff_trace):
    emit_csv(handoff_trace, tmp_path)
    rows = read_recorded(tmp_path / "samples.csv")
    plan = load_config(CONFIGS / "indoor.yaml").plan()
    a = replay(rows, TriggerConfig(), FilterConfig(), plan)
    b = replay(rows, TriggerConfig(), FilterConfig(), plan)
    assert a.events == b.events and a.smoothed == b.smoothed


@pytest.mark.parametrize("text, err", [
    ("timestamp,node,direction,raw_rssi,delivered\n1.0,R2,uplink,30,1\n0.5,R2,uplink,30,1\n",
     "non-decreasing"),
    ("timestamp,node,direction,raw_rssi,delivered\n1.0,R2,uplink,80,1\n", "raw_rssi"),
    ("timestamp,node,direction,raw_rssi,delivered\n1.0,R2,sideways,30,1\n", "direction"),
    ("timestamp,node,direction,raw_rssi,delivered\n1.0,R2,uplink,30,maybe\n", "boolean"),
    ("when,node\n1,R2\n", "header"),
])
def test_read_recorded_errors(text, err):
    with pytest.raises(TraceError, match=err):
        read_recorded(io.StringIO(text))


def test_replay_rejects_unmapped_nodes():
    rows = read_recorded(io.StringIO("tick,node,direction,raw_rssi,delivered\n5,R9,uplink,30,1\n"))
    with pytest.raises(TraceError, match="R9"):
        replay(rows, TriggerConfig(), FilterConfig(), load_config(CONFIGS / "indoor.yaml").plan())


def test_replay_quantizes_timestamps():
    rows = read_recorded(io.StringIO(
        "timestamp,node,direction,raw_rssi,delivered\n0.0004,R2,uplink,30,1\n0.0006,R2,uplink,40,1\n"))
    trace = replay(rows, TriggerConfig(), FilterConfig(),
                   load_config(CONFIGS / "indoor.yaml").plan())
    assert [s.tick for s in trace.samples] == [0, 1]


# command line

def test_cli_run_and_replay(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", str(CONFIGS / "indoor.yaml"), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"samples.csv", "smoothed.csv", "events.csv",
                                               "summary.json"}
    rep = tmp_path / "rep"
    assert cli.main(["replay", str(CONFIGS / "indoor.yaml"), str(out / "samples.csv"),
                     "--out", str(rep)]) == 0
    text = capsys.readouterr().out
    assert "2 handoffs" in text


def test_cli_baseline_seed_override(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["run", str(CONFIGS / "indoor.yaml"), "--mode", "baseline", "--seed", "3",
                     "--out", str(out)]) == 0
    events = (out / "events.csv").read_text()
    assert "handoff_start" not in events


def test_cli_sweep(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(CONFIGS / "indoor.yaml"), "--param", "trigger.stability_shift",
                     "--values", "4,8", "--out", str(out)]) == 0
    assert (out / "trigger.stability_shift=4" / "events.csv").exists()
    assert (out / "trigger.stability_shift=8" / "events.csv").exists()
    rows = read_rows(out / "sweep.csv")
    assert rows[0][0] == "trigger.stability_shift" and len(rows) == 3


def test_cli_validation_error_exit_code(tmp_path, capsys):
    bad = write_yaml(tmp_path, {"trigger": {"lambda_bad": 6}})
    assert cli.main(["run", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "lambda_bad < lambda_good" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) != 0
    bad_trace = tmp_path / "t.csv"
    bad_trace.write_text("tick,node\n")
    assert cli.main(["replay", str(CONFIGS / "indoor.yaml"), str(bad_trace)]) == 2



def test_readme_config_example_parses():
    readme = (Path(__file__).resolve().parent.parent / "README.md").read_text()
    block = readme.split("```yaml\n", 1)[1].split("```", 1)[0]
    cfg = parse_config(yaml.safe_load(block))
    assert cfg.lsp_tables is None
    assert cfg.scenario == default_scenario(
        fades=cfg.scenario.fades, fixed_nodes=cfg.scenario.fixed_nodes, route=("R2", "R3", "R4"))
