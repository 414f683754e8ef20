"""Load scenarios as ordered ramp/hold phases, and their spawn/retire plans."""

from __future__ import annotations

import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

# Baseline: users are added until 2400 are active, then held for 5 minutes.
STEADY_USERS = 2400
STEADY_BUILD_SECONDS = 150.0
STEADY_HOLD_SECONDS = 300.0
USER_LIFETIME_SECONDS = 45 * 60.0


class PhaseKind(str, enum.Enum):
    RAMP = "ramp"
    HOLD = "hold"


@dataclass(frozen=True)
class ScenarioPhase:
    kind: PhaseKind
    rate: float  # users per second; negative removes users
    duration: float
    label: str = ""

    @property
    def delta(self) -> int:
        return round(self.rate * self.duration)


def _scaled(label_counts: Sequence[tuple[str, Optional[int], float]], scale: int, time_scale: float
            ) -> list[ScenarioPhase]:
    """Turn (label, target users or None for hold, duration) into phases.

    Targets are divided by ``scale`` and rounded at phase boundaries, so the
    scaled schedule hits every boundary exactly (0 stays 0, peaks stay equal).
    """
    if scale < 1 or time_scale < 1:
        raise ValueError("scale and time_scale must be >= 1")
    phases = []
    count = 0
    for label, target, duration in label_counts:
        d = duration / time_scale
        if target is None:
            phases.append(ScenarioPhase(PhaseKind.HOLD, 0.0, d, label))
            continue
        new = round(target / scale)
        delta = new - count
        if delta == 0:
            raise ValueError(f"phase {label!r} moves zero users at scale {scale}")
        phases.append(ScenarioPhase(PhaseKind.RAMP, delta / d, d, label))
        count = new
    return phases


def build_fixed_scenario(scale: int = 1, time_scale: float = 1) -> list[ScenarioPhase]:
    """Steady state, then +6/s, +14/s, -14/s, -6/s ramps of 5 minutes, each held 5 minutes."""
    return _scaled([
        ("steady build", STEADY_USERS, STEADY_BUILD_SECONDS),
        ("steady hold", None, STEADY_HOLD_SECONDS),
        ("+6/s", 4200, 300.0),
        ("hold 4200", None, 300.0),
        ("+14/s", 8400, 300.0),
        ("hold 8400", None, 300.0),
        ("-14/s", 4200, 300.0),
        ("hold 4200", None, 300.0),
        ("-6/s", 2400, 300.0),
        ("final hold", None, 300.0),
    ], scale, time_scale)


def build_varying_scenario(scale: int = 1, time_scale: float = 1, additions: int = 6) -> list[ScenarioPhase]:
    """Steady state, +40/s to 8400, then a 0..8400 sawtooth at 56/s, -40/s back to 2400."""
    steps: list[tuple[str, Optional[int], float]] = [
        ("steady build", STEADY_USERS, STEADY_BUILD_SECONDS),
        ("steady hold", None, STEADY_HOLD_SECONDS),
        ("+40/s", 8400, 150.0),
        ("-56/s", 0, 150.0),
    ]
    for i in range(additions):
        steps.append((f"+56/s #{i + 1}", 8400, 150.0))
        if i < additions - 1:
            steps.append(("-56/s", 0, 150.0))
    steps += [("-40/s", 2400, 150.0), ("final hold", None, 300.0)]
    return _scaled(steps, scale, time_scale)


def build_step_scenario(start: int, stop: int, step: int, ramp: float, hold: float) -> list[ScenarioPhase]:
    """Staircase from ``start`` to ``stop`` users: ramp for ``ramp`` s, hold ``hold`` s per step."""
    phases = []
    count = 0
    for target in range(start, stop + 1, step):
        phases.append(ScenarioPhase(PhaseKind.RAMP, (target - count) / ramp, ramp, f"to {target}"))
        phases.append(ScenarioPhase(PhaseKind.HOLD, 0.0, hold, f"hold {target}"))
        count = target
    return phases


def total_duration(phases: Iterable[ScenarioPhase]) -> float:
    return sum(p.duration for p in phases)


def phase_bounds(phases: Sequence[ScenarioPhase]) -> list[tuple[float, float, ScenarioPhase]]:
    out = []
    t = 0.0
    for p in phases:
        out.append((t, t + p.duration, p))
        t += p.duration
    return out


def checkpoints(phases: Sequence[ScenarioPhase]) -> list[int]:
    """Active-user count at the end of every phase."""
    counts = []
    n = 0
    for p in phases:
        n += p.delta
        if n < 0:
            raise ValueError("schedule drives the active-user count negative")
        counts.append(n)
    return counts


def _ramp_times(t0: float, phase: ScenarioPhase) -> list[float]:
    n = abs(phase.delta)
    if n == 0:
        return []
    gap = phase.duration / n
    return [t0 + k * gap for k in range(n)]


def scheduled_users(phases: Sequence[ScenarioPhase], t: float) -> int:
    """Users the schedule has active at time ``t`` (spawns happen at ramp slot starts)."""
    n = 0
    for t0, t1, p in phase_bounds(phases):
        if t < t0:
            break
        if p.kind is PhaseKind.RAMP and p.delta:
            gap = p.duration / abs(p.delta)
            done = abs(p.delta) if t >= t1 else min(abs(p.delta), math.floor((t - t0) / gap) + 1)
            n += done if p.delta > 0 else -done
    return n


@dataclass(frozen=True)
class PlanEvent:
    t: float
    kind: str  # "spawn" or "retire"
    user: int


def plan_events(phases: Sequence[ScenarioPhase], lifetime: Optional[float] = None) -> list[PlanEvent]:
    """Deterministic spawn/retire sequence for a schedule.

    Removals retire the longest-running user first. A user reaching
    ``lifetime`` is retired and replaced at the same instant, so the active
    count follows the schedule regardless of the cap.
    """
    events: list[PlanEvent] = []
    active: deque[tuple[float, int]] = deque()
    next_user = 0

    def spawn(t: float) -> None:
        nonlocal next_user
        active.append((t, next_user))
        events.append(PlanEvent(t, "spawn", next_user))
        next_user += 1

    def expire_until(t: float) -> None:
        while lifetime and active and active[0][0] + lifetime <= t:
            started, user = active.popleft()
            at = started + lifetime
            events.append(PlanEvent(at, "retire", user))
            spawn(at)

    ramps = []
    for t0, _, p in phase_bounds(phases):
        if p.kind is PhaseKind.RAMP:
            sign = 1 if p.delta > 0 else -1
            ramps.extend((t, sign) for t in _ramp_times(t0, p))
    for t, sign in ramps:
        expire_until(t)
        if sign > 0:
            spawn(t)
        elif active:
            _, user = active.popleft()
            events.append(PlanEvent(t, "retire", user))
    expire_until(total_duration(phases))
    # replacements may interleave with ramps; keep the list in time order
    return [e for _, _, e in sorted((e.t, i, e) for i, e in enumerate(events))]


def merge_sorted(*streams: Iterable[PlanEvent]) -> list[PlanEvent]:
    return list(heapq.merge(*streams, key=lambda e: e.t))
