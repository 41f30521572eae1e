"""Fast handoff for 802.11 mass-transit networks: RSSI smoothing, dual
hysteresis triggering along a known route, MPLS path rewiring, and a
deterministic simulator that logs everything to CSV."""

from .channel import ChannelConfig, RssiSample, loss_probability, mean_rssi, sample_rssi
from .handoff import (HandoffEngine, LossEstimator, NodePlan, Reason, TriggerConfig,
                      TriggerDecision, advance_plan, evaluate)
from .mpls import ForwardingPlane, ShimHeader
from .rssi_filter import FilterConfig, FilterState, smoothed, update
from .sim import Scenario, SimTrace, compare, default_scenario, run, run_baseline
from .trace_io import RunConfig, emit_csv, load_config, replay

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig", "RssiSample", "loss_probability", "mean_rssi", "sample_rssi",
    "HandoffEngine", "LossEstimator", "NodePlan", "Reason", "TriggerConfig",
    "TriggerDecision", "advance_plan", "evaluate", "ForwardingPlane", "ShimHeader",
    "FilterConfig", "FilterState", "smoothed", "update", "Scenario", "SimTrace", "compare",
    "default_scenario", "run", "run_baseline", "RunConfig", "emit_csv", "load_config", "replay",
]
