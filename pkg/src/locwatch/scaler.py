"""Service replica pools scaled on CPU utilization over a trailing window.

CPU is modelled as declared work units per request: a replica with
``capacity`` units/s spends ``units / capacity`` seconds busy on a request,
which keeps load runs reproducible on any hardware. Callers that measure
real busy time can feed it through :meth:`ReplicaSet.record_work` instead.
"""

from __future__ import annotations

import asyncio
import logging
import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Awaitable, Callable, Optional

log = logging.getLogger(__name__)


@dataclass
class ScalingPolicy:
    min_replicas: int = 1
    max_replicas: int = 8
    hi: float = 0.8
    lo: float = 0.3
    window: float = 10.0
    sample_interval: float = 1.0
    step: int = 1
    start_delay: float = 2.0
    capacity: float = 1000.0  # work units per second per replica

    def __post_init__(self):
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError("need 0 <= lo < hi <= 1")
        if self.step < 1:
            raise ValueError("step must be >= 1")

    @property
    def window_samples(self) -> int:
        return max(1, round(self.window / self.sample_interval))


class UtilizationWindow:
    """Trailing utilization samples, each in [0, 1], covering ``span`` seconds."""

    def __init__(self, samples: int = 10):
        self.samples: deque[tuple[float, float]] = deque(maxlen=samples)

    def add(self, t: float, utilization: float) -> None:
        self.samples.append((t, min(1.0, max(0.0, utilization))))

    @property
    def full(self) -> bool:
        return len(self.samples) == self.samples.maxlen

    def mean(self) -> float:
        if not self.samples:
            return 0.0
        return math.fsum(u for _, u in self.samples) / len(self.samples)

    def clear(self) -> None:
        self.samples.clear()


def evaluate(current: int, window: UtilizationWindow, policy: ScalingPolicy) -> int:
    """New replica count for one evaluation.

    Scales out when the mean over a fully populated window exceeds ``hi``,
    in when it is below ``lo``; otherwise, or while the window is still
    filling, the count is unchanged. The result is always clamped to the
    policy bounds.
    """
    target = current
    if window.full:
        m = window.mean()
        if m > policy.hi:
            target = current + policy.step
        elif m < policy.lo:
            target = current - policy.step
    return min(policy.max_replicas, max(policy.min_replicas, target))


class Replica:
    def __init__(self, service: "ReplicaSet", index: int, ready_at: float):
        self.service = service
        self.index = index
        self.ready_at = ready_at
        self.state = "starting"
        self.stop = asyncio.Event()
        self.processed = 0
        self.total_busy = 0.0
        self.last_util = 0.0
        self._accum = 0.0
        self.task: Optional[asyncio.Task] = None

    async def work(self, units: float) -> None:
        """Occupy this replica for the modelled duration of ``units``."""
        busy = units / self.service.policy.capacity
        if busy > 0:
            await asyncio.sleep(busy)
        self.record(busy)

    def record(self, busy: float) -> None:
        self._accum += busy
        self.total_busy += busy
        self.processed += 1

    def _take(self) -> float:
        out, self._accum = self._accum, 0.0
        return out


ServeFn = Callable[[Replica], Awaitable[None]]


class _Job:
    __slots__ = ("units", "future")

    def __init__(self, units, future):
        self.units = units
        self.future = future


class ReplicaSet:
    """A pool of replicas for one service plus its autoscaling loop.

    Two usage styles: pass ``serve`` to run a custom loop per replica (it
    must return once ``replica.stop`` is set), or leave it out and submit
    work with :meth:`execute`, which queues jobs for the replicas to pull.
    """

    def __init__(self, name: str, policy: Optional[ScalingPolicy] = None,
                 serve: Optional[ServeFn] = None, clock: Callable[[], float] = time.monotonic):
        self.name = name
        self.policy = policy or ScalingPolicy()
        self.clock = clock
        self._serve = serve or self._pull_jobs
        self._jobs: asyncio.Queue[_Job] = asyncio.Queue()
        self.replicas: dict[int, Replica] = {}
        self.window = UtilizationWindow(self.policy.window_samples)
        self.history: list[tuple[float, int]] = []
        self._last_sample = clock()
        self._loop_task: Optional[asyncio.Task] = None
        self.last_util = 0.0

    @property
    def current(self) -> int:
        return sum(1 for r in self.replicas.values() if r.state != "draining")

    async def start(self, autoscale: bool = True) -> None:
        for _ in range(self.policy.min_replicas):
            self._add(delay=0.0)
        self._last_sample = self.clock()
        self.history.append((self.clock(), self.current))
        if autoscale:
            self._loop_task = asyncio.ensure_future(self._autoscale_loop())

    async def stop(self) -> None:
        if self._loop_task:
            self._loop_task.cancel()
        for r in self.replicas.values():
            r.stop.set()
        tasks = [r.task for r in self.replicas.values() if r.task]
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        self.replicas.clear()

    def _add(self, delay: Optional[float] = None) -> Replica:
        index = next(i for i in range(self.policy.max_replicas + len(self.replicas) + 1)
                     if i not in self.replicas)
        delay = self.policy.start_delay if delay is None else delay
        replica = Replica(self, index, self.clock() + delay)
        self.replicas[index] = replica
        replica.task = asyncio.ensure_future(self._run_replica(replica, delay))
        return replica

    async def _run_replica(self, replica: Replica, delay: float) -> None:
        try:
            if delay > 0:
                await asyncio.sleep(delay)
            if replica.stop.is_set():
                return
            replica.state = "running"
            await self._serve(replica)
        finally:
            if self.replicas.get(replica.index) is replica:
                del self.replicas[replica.index]

    def _remove_one(self) -> None:
        live = [r for r in self.replicas.values() if r.state != "draining"]
        if not live:
            return
        # prefer replicas that never became ready, then the newest
        victim = max(live, key=lambda r: (r.state == "starting", r.index))
        victim.state = "draining"
        victim.stop.set()

    def scale_to(self, n: int) -> int:
        n = min(self.policy.max_replicas, max(self.policy.min_replicas, n))
        while self.current < n:
            self._add()
        while self.current > n:
            self._remove_one()
        self.history.append((self.clock(), self.current))
        return n

    def record_work(self, replica: int, busy: float) -> None:
        r = self.replicas.get(replica)
        if r is not None:
            r.record(busy)

    def sample(self) -> float:
        """Close the current sample period and push it into the window."""
        now = self.clock()
        dt = max(1e-9, now - self._last_sample)
        self._last_sample = now
        total = 0.0
        for r in self.replicas.values():
            busy = r._take()
            total += busy
            r.last_util = min(1.0, busy / dt)
        util = min(1.0, total / (dt * max(1, self.current)))
        self.last_util = util
        self.window.add(now, util)
        return util

    def evaluate_once(self) -> int:
        current = self.current
        target = evaluate(current, self.window, self.policy)
        if target != current:
            log.info("%s: scaling %d -> %d (util %.2f)", self.name, current, target, self.window.mean())
            self.scale_to(target)
            self.window.clear()
        return target

    async def _autoscale_loop(self) -> None:
        while True:
            await asyncio.sleep(self.policy.sample_interval)
            self.sample()
            self.evaluate_once()

    async def execute(self, units: float) -> None:
        """Queue ``units`` of work and wait until a replica has done it.

        Cancelling the caller withdraws the job if no replica picked it up yet.
        """
        fut = asyncio.get_running_loop().create_future()
        self._jobs.put_nowait(_Job(units, fut))
        await fut

    async def _pull_jobs(self, replica: Replica) -> None:
        while not replica.stop.is_set():
            try:
                job = await asyncio.wait_for(self._jobs.get(), 0.25)
            except asyncio.TimeoutError:
                continue
            if job.future.done():
                continue
            await replica.work(job.units)
            if not job.future.done():
                job.future.set_result(None)

    def snapshot(self) -> dict:
        return {
            "service": self.name,
            "current": self.current,
            "utilization": self.last_util,
            "replicas": {
                r.index: {"state": r.state, "utilization": r.last_util, "processed": r.processed}
                for r in self.replicas.values()
            },
        }


def needed_replicas(load_units_per_s: float, policy: ScalingPolicy) -> int:
    """Replicas required to keep utilization at or below ``hi`` for a steady load."""
    return min(policy.max_replicas,
               max(policy.min_replicas, math.ceil(load_units_per_s / (policy.capacity * policy.hi))))


class Scaler:
    """Registry of replica sets keyed by service name."""

    def __init__(self):
        self.services: dict[str, ReplicaSet] = {}

    def add(self, rs: ReplicaSet) -> ReplicaSet:
        self.services[rs.name] = rs
        return rs

    def record_work(self, service: str, replica: int, busy: float) -> None:
        self.services[service].record_work(replica, busy)

    def snapshot(self) -> list[dict]:
        return [rs.snapshot() for rs in self.services.values()]
