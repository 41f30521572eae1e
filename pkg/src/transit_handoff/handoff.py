"""Handoff triggering for a mobile node following a fixed route.

The search phase is replaced by a precomputed node list: the mobile always
compares its current point of attachment against the single next node on the
route. The comparison uses two hysteresis margins split by an RSSI threshold
(``beta``); in the low-RSSI region a packet-loss gate must also pass.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

from . import rssi_filter
from .channel import RssiSample
from .rssi_filter import FilterConfig, FilterState


class EndOfRoute(IndexError):
    """Raised when advancing a plan that is already at its last node."""


class Reason(str, enum.Enum):
    GOOD_MARGIN_MET = "good_margin_met"
    BAD_MARGIN_AND_LOSS_OK = "bad_margin_and_loss_ok"
    MARGIN_NOT_MET = "margin_not_met"
    LOSS_GATE_BLOCKED = "loss_gate_blocked"
    NEXT_UNMEASURED = "next_unmeasured"
    CURR_UNMEASURED = "curr_unmeasured"


FIRING_REASONS = frozenset({Reason.GOOD_MARGIN_MET, Reason.BAD_MARGIN_AND_LOSS_OK})


@dataclass(frozen=True)
class TriggerConfig:
    beta: float = 25.0
    lambda_good: float = 6.0
    lambda_bad: float = 3.0
    loss_gate_pl: float = 0.5
    decision_period_ticks: int = 100
    loss_window: int = 32
    probe_period_ticks: int = 250
    probe_count: int = 1
    enabled: bool = True

    def __post_init__(self):
        if not self.lambda_bad < self.lambda_good:
            raise ValueError(
                f"lambda_bad < lambda_good required, got {self.lambda_bad} >= {self.lambda_good}"
            )
        if not 0.0 <= self.loss_gate_pl <= 1.0:
            raise ValueError("loss_gate_pl must be in [0, 1]")
        if not 0.0 <= self.beta <= 70.0:
            raise ValueError("beta must be in [0, 70]")
        if self.decision_period_ticks <= 0 or self.probe_period_ticks <= 0:
            raise ValueError("decision and probe periods must be positive")
        if self.loss_window <= 0:
            raise ValueError("loss_window must be positive")
        if self.probe_count < 0:
            raise ValueError("probe_count must be >= 0")


@dataclass(frozen=True)
class TriggerDecision:
    tick: int
    fired: bool
    region: str
    rssi_curr: float | None
    rssi_next: float | None
    next_loss: float | None
    reason: Reason
    current: str | None = None
    next: str | None = None


@dataclass(frozen=True)
class HandoffCommand:
    old: str
    new: str
    tick: int


@dataclass(frozen=True)
class ProbeDirective:
    target: str
    count: int


@dataclass(frozen=True)
class NodePlan:
    nodes: tuple[str, ...]
    current_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not self.nodes:
            raise ValueError("node plan is empty")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError(f"node plan has duplicate ids: {list(self.nodes)}")
        if not 0 <= self.current_index < len(self.nodes):
            raise ValueError(f"current_index {self.current_index} out of range")

    @property
    def current(self) -> str:
        return self.nodes[self.current_index]

    @property
    def next(self) -> str | None:
        i = self.current_index + 1
        return self.nodes[i] if i < len(self.nodes) else None


def advance_plan(plan: NodePlan) -> NodePlan:
    if plan.next is None:
        raise EndOfRoute(f"already attached to final node {plan.current!r}")
    return replace(plan, current_index=plan.current_index + 1)


class LossEstimator:
    """Sliding window of delivery outcomes for one link."""

    def __init__(self, window: int = 32):
        self.window = window
        self.outcomes: deque[bool] = deque(maxlen=window)

    def record(self, delivered: bool) -> None:
        self.outcomes.append(bool(delivered))

    def fraction(self) -> float | None:
        n = len(self.outcomes)
        if n < math.ceil(self.window / 2):
            return None
        return sum(1 for ok in self.outcomes if not ok) / n

    def clear(self) -> None:
        self.outcomes.clear()


def evaluate(config: TriggerConfig, rssi_curr: float, rssi_next: float | None,
             next_loss: float | None, tick: int = 0) -> TriggerDecision:
    if rssi_curr >= config.beta:
        region = "good"
        if rssi_next is None:
            reason = Reason.NEXT_UNMEASURED
        elif rssi_next >= rssi_curr + config.lambda_good:
            reason = Reason.GOOD_MARGIN_MET
        else:
            reason = Reason.MARGIN_NOT_MET
    else:
        region = "bad"
        if rssi_next is None or next_loss is None:
            reason = Reason.NEXT_UNMEASURED
        elif rssi_next < rssi_curr + config.lambda_bad:
            reason = Reason.MARGIN_NOT_MET
        elif next_loss < config.loss_gate_pl:
            reason = Reason.BAD_MARGIN_AND_LOSS_OK
        else:
            reason = Reason.LOSS_GATE_BLOCKED
    return TriggerDecision(tick, reason in FIRING_REASONS, region, rssi_curr, rssi_next,
                           next_loss, reason)


@dataclass
class HandoffEngine:
    """Single-owner state machine run by the mobile node.

    Feed it samples with :meth:`ingest`, ask for probes with
    :meth:`probe_schedule` and run :meth:`decision_cycle` on decision ticks.
    """

    plan: NodePlan
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    filters: dict[str, FilterState] = field(default_factory=dict)
    losses: dict[str, LossEstimator] = field(default_factory=dict)
    last_data_tick: dict[str, int] = field(default_factory=dict)
    skip_decision_until: int = -1
    decisions: list[TriggerDecision] = field(default_factory=list)

    def _loss(self, node: str) -> LossEstimator:
        est = self.losses.get(node)
        if est is None:
            est = self.losses[node] = LossEstimator(self.trigger.loss_window)
        return est

    def ingest(self, sample: RssiSample) -> float | None:
        """Account one sample; returns the new smoothed value if the filter moved."""
        node = sample.node_id
        self._loss(node).record(sample.delivered)
        if sample.traffic == "data":
            self.last_data_tick[node] = sample.tick
        if not sample.delivered or not self.filter_config.accepts(sample.direction):
            return None
        state = self.filters.get(node, FilterState())
        state = rssi_filter.update(state, self.filter_config, sample.raw_rssi, sample.tick)
        self.filters[node] = state
        return rssi_filter.smoothed(state)

    def smoothed_rssi(self, node: str | None, tick: int) -> float | None:
        if node is None:
            return None
        state = self.filters.get(node)
        if state is None or rssi_filter.is_stale(state, self.filter_config, tick):
            return None
        return rssi_filter.smoothed(state)

    def probe_schedule(self, tick: int) -> list[ProbeDirective]:
        period = self.trigger.probe_period_ticks
        target = self.plan.next
        if target is None or tick % period or self.trigger.probe_count == 0:
            return []
        last = self.last_data_tick.get(target)
        if last is not None and tick - last < period:
            return []
        return [ProbeDirective(target, self.trigger.probe_count)]

    def decision_cycle(self, tick: int) -> HandoffCommand | None:
        if tick < self.skip_decision_until:
            return None
        current, nxt = self.plan.current, self.plan.next
        if nxt is None:
            return None
        rssi_curr = self.smoothed_rssi(current, tick)
        if rssi_curr is None:
            decision = TriggerDecision(tick, False, "bad", None, None, None,
                                       Reason.CURR_UNMEASURED)
        else:
            rssi_next = self.smoothed_rssi(nxt, tick)
            # the loss estimate is only consulted in the bad region
            loss = None if rssi_curr >= self.trigger.beta else self._loss(nxt).fraction()
            decision = evaluate(self.trigger, rssi_curr, rssi_next, loss, tick)
        decision = replace(decision, current=current, next=nxt)
        self.decisions.append(decision)
        if not (decision.fired and self.trigger.enabled):
            return None

        self.plan = advance_plan(self.plan)
        new_next = self.plan.next
        if new_next is not None:
            self.filters.pop(new_next, None)
            self._loss(new_next).clear()
        # the decision tick right after a handoff is skipped
        self.skip_decision_until = tick + 2 * self.trigger.decision_period_ticks
        return HandoffCommand(current, nxt, tick)
