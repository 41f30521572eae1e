"""Command line entry point: ``run``, ``replay`` and ``sweep``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import sim, trace_io
from .trace_io import ConfigError, TraceError

log = logging.getLogger("transit_handoff")


def _summary(trace: sim.SimTrace) -> dict:
    m = sim.trace_metrics(trace)
    return {
        "mode": trace.meta["mode"],
        "handoffs": [dataclasses.asdict(h) for h in trace.handoffs()],
        "loss_fraction": m.loss_fraction,
        "packets": m.packets,
        "lost": m.lost,
        "interruptions_ms": list(m.interruptions_ms),
        "mean_serving_rssi": m.mean_serving_rssi,
    }


def _write_outputs(trace: sim.SimTrace, out: Path) -> dict:
    trace_io.emit_csv(trace, out)
    summary = _summary(trace)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _simulate(cfg: trace_io.RunConfig, mode: str) -> sim.SimTrace:
    if mode == "baseline":
        return sim.run_baseline(cfg.scenario, cfg.baseline_node, cfg.filter,
                                trigger=cfg.trigger, plane=cfg.plane())
    if mode == "handoff":
        return sim.run(cfg.scenario, cfg.trigger, cfg.filter, plane=cfg.plane())
    raise ConfigError("mode", "use the 'replay' command for replay mode")


def cmd_run(args) -> int:
    cfg = trace_io.load_config(args.config)
    if args.seed is not None:
        cfg.scenario = dataclasses.replace(cfg.scenario, seed=args.seed)
    mode = args.mode or cfg.mode
    out = Path(args.out or cfg.output_dir)
    trace = _simulate(cfg, mode)
    summary = _write_outputs(trace, out)
    print(f"{mode}: {len(summary['handoffs'])} handoffs, "
          f"serving loss {summary['loss_fraction']:.4f}, wrote {out}")
    return 0


def cmd_replay(args) -> int:
    cfg = trace_io.load_config(args.config)
    rows = trace_io.read_recorded(args.trace, cfg.scenario.tick_hz)
    trace = trace_io.replay(rows, cfg.trigger, cfg.filter, cfg.plan(),
                            tick_hz=cfg.scenario.tick_hz,
                            exec_delay_ticks=cfg.scenario.ms_to_ticks(
                                cfg.scenario.handoff_exec_delay_ms))
    out = Path(args.out or cfg.output_dir)
    summary = _write_outputs(trace, out)
    print(f"replay: {len(summary['handoffs'])} handoffs over {len(rows)} samples, wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values", "no values given")
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = trace_io.parse_config(trace_io.set_config_value(raw, args.param, value))
        mode = args.mode or cfg.mode
        trace = _simulate(cfg, mode)
        summary = _write_outputs(trace, out / f"{args.param}={value}")
        rows.append((value, len(summary["handoffs"]),
                     " ".join(str(h["start_tick"]) for h in summary["handoffs"]),
                     f"{summary['loss_fraction']:.6f}", f"{summary['mean_serving_rssi']:.6f}"))
        log.info("%s=%s: %d handoffs", args.param, value, len(summary["handoffs"]))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((args.param, "handoffs", "handoff_ticks", "loss_fraction", "mean_serving_rssi"))
        w.writerows(rows)
    print(f"sweep over {args.param}: {len(values)} runs, wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transit-handoff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("config")
    r.add_argument("--mode", choices=("baseline", "handoff"))
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="run the handoff engine over a recorded trace")
    rp.add_argument("config")
    rp.add_argument("trace")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_replay)

    s = sub.add_parser("sweep", help="run one simulation per value of a config key")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted key, e.g. trigger.stability_shift")
    s.add_argument("--values", required=True, help="comma separated list")
    s.add_argument("--mode", choices=("baseline", "handoff"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TraceError, sim.ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
