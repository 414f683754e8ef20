"""Load generation: scheduled virtual users and per-second metrics."""

from .runner import (
    LoadRunner,
    RunConfig,
    RunResult,
    TargetUnreachable,
    VirtualUser,
    run_scenario,
    trailing_throughput,
)
from .scenarios import (
    PhaseKind,
    PlanEvent,
    ScenarioPhase,
    build_fixed_scenario,
    build_step_scenario,
    build_varying_scenario,
    checkpoints,
    phase_bounds,
    plan_events,
    scheduled_users,
    total_duration,
)
from .stats import MetricSample, SecondBuckets, percentile

__all__ = [
    "LoadRunner",
    "MetricSample",
    "PhaseKind",
    "PlanEvent",
    "RunConfig",
    "RunResult",
    "ScenarioPhase",
    "SecondBuckets",
    "TargetUnreachable",
    "VirtualUser",
    "build_fixed_scenario",
    "build_step_scenario",
    "build_varying_scenario",
    "checkpoints",
    "percentile",
    "phase_bounds",
    "plan_events",
    "run_scenario",
    "scheduled_users",
    "total_duration",
    "trailing_throughput",
]
