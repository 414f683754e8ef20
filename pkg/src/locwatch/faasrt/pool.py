"""Function worker pool: cold starts, warm reuse and requests-per-second scaling."""

from __future__ import annotations

import asyncio
import enum
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, fields
from typing import Any, Awaitable, Callable, Mapping, Optional

log = logging.getLogger(__name__)


@dataclass
class FunctionConfig:
    trigger_threshold: int = 10
    low_watermark: int = 2
    window_W: int = 5
    anomaly_threshold_m: float = 200.0
    cold_start_delay: float = 0.5
    warm_idle_timeout: float = 60.0
    max_rps_per_worker: float = 50.0
    min_workers: int = 1
    max_workers: int = 8
    eval_interval: float = 10.0
    rps_window: float = 10.0
    capacity: float = 1000.0  # work units per second per worker
    work_units_per_fix: float = 2.0
    work_units_per_invocation: float = 1.0
    lease_ttl: float = 30.0
    state_ttl: float = 3600.0

    def __post_init__(self):
        if not self.low_watermark < self.trigger_threshold:
            raise ValueError("low_watermark must be below trigger_threshold")
        if self.window_W < 1:
            raise ValueError("window_W must be >= 1")
        if not 1 <= self.min_workers <= self.max_workers:
            raise ValueError("need 1 <= min_workers <= max_workers")
        if self.max_rps_per_worker <= 0:
            raise ValueError("max_rps_per_worker must be positive")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "FunctionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown [function] keys: {sorted(unknown)}")
        return cls(**dict(data))


class WorkerState(str, enum.Enum):
    COLD = "cold"
    WARMING = "warming"
    WARM = "warm"
    BUSY = "busy"


class Worker:
    def __init__(self, index: int, capacity: float, now: float):
        self.index = index
        self.capacity = capacity
        self.state = WorkerState.COLD
        self.processed = 0
        self.busy_time = 0.0
        self.last_used = now
        self.last_util = 0.0
        self._accum = 0.0

    async def work(self, units: float) -> None:
        busy = units / self.capacity
        if busy > 0:
            await asyncio.sleep(busy)
        self.busy_time += busy
        self._accum += busy


@dataclass
class CallRecord:
    submitted_at: float
    latency: float
    worker: int
    cold: bool


class _Call:
    __slots__ = ("fn", "args", "future", "submitted_at")

    def __init__(self, fn, args, future, submitted_at):
        self.fn = fn
        self.args = args
        self.future = future
        self.submitted_at = submitted_at


def target_workers(observed_rps: float, cfg: FunctionConfig) -> int:
    return min(cfg.max_workers, max(cfg.min_workers, math.ceil(observed_rps / cfg.max_rps_per_worker)))


def autoscale_workers(size: int, observed_rps: float, cfg: FunctionConfig) -> int:
    """Pool size after one evaluation: a single step toward the rps target."""
    target = target_workers(observed_rps, cfg)
    if target > size:
        size += 1
    elif target < size:
        size -= 1
    return min(cfg.max_workers, max(cfg.min_workers, size))


class WorkerPool:
    """Runs function calls on a bounded set of workers.

    Workers start Cold. A call that finds no Warm worker wakes a Cold one and
    is bound to it, paying ``cold_start_delay``; workers added by the
    autoscaler warm up before taking work, so only demand-triggered warm-ups
    show up in call latency.
    """

    def __init__(self, cfg: FunctionConfig, clock: Callable[[], float] = time.monotonic,
                 record_calls: bool = True):
        self.cfg = cfg
        self.clock = clock
        self.workers: dict[int, Worker] = {}
        self._queue: deque[_Call] = deque()
        self._arrivals: deque[float] = deque()
        self.calls: deque[CallRecord] = deque(maxlen=200_000) if record_calls else deque(maxlen=0)
        self.size_history: list[tuple[float, int]] = []
        self._tasks: set[asyncio.Task] = set()
        self._loop_task: Optional[asyncio.Task] = None
        self._last_sample = clock()
        for _ in range(cfg.min_workers):
            self._new_worker()

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    def _new_worker(self) -> Worker:
        index = next(i for i in range(len(self.workers) + 1) if i not in self.workers)
        w = Worker(index, self.cfg.capacity, self.clock())
        self.workers[index] = w
        return w

    @property
    def size(self) -> int:
        return len(self.workers)

    def observed_rps(self) -> float:
        cutoff = self.clock() - self.cfg.rps_window
        while self._arrivals and self._arrivals[0] < cutoff:
            self._arrivals.popleft()
        return len(self._arrivals) / self.cfg.rps_window

    async def invoke(self, fn: Callable[..., Awaitable[Any]], *args) -> Any:
        """Run ``fn(worker, *args)`` on a pool worker and return its result."""
        now = self.clock()
        self._arrivals.append(now)
        call = _Call(fn, args, asyncio.get_running_loop().create_future(), now)
        self._queue.append(call)
        self._dispatch()
        return await call.future

    def _dispatch(self) -> None:
        while self._queue:
            idle = [w for w in self.workers.values() if w.state is WorkerState.WARM]
            if not idle:
                break
            worker = min(idle, key=lambda w: w.last_used)
            call = self._queue.popleft()
            worker.state = WorkerState.BUSY
            self._spawn(self._run(worker, call, cold=False))
        if not self._queue:
            return
        warming = sum(1 for w in self.workers.values() if w.state is WorkerState.WARMING)
        if warming:
            return
        cold = [w for w in self.workers.values() if w.state is WorkerState.COLD]
        if cold:
            worker = cold[0]
            worker.state = WorkerState.WARMING
            self._spawn(self._warm(worker, self._queue.popleft()))

    async def _warm(self, worker: Worker, call: Optional[_Call] = None) -> None:
        worker.state = WorkerState.WARMING
        await asyncio.sleep(self.cfg.cold_start_delay)
        if worker.index not in self.workers:
            return
        if call is None:
            worker.state = WorkerState.WARM
            worker.last_used = self.clock()
            self._dispatch()
            return
        worker.state = WorkerState.BUSY
        await self._run(worker, call, cold=True)

    async def _run(self, worker: Worker, call: _Call, cold: bool) -> None:
        try:
            result = await call.fn(worker, *call.args)
        except Exception as exc:
            if not call.future.done():
                call.future.set_exception(exc)
        else:
            if not call.future.done():
                call.future.set_result(result)
        finally:
            now = self.clock()
            worker.processed += 1
            worker.last_used = now
            if worker.state is WorkerState.BUSY:
                worker.state = WorkerState.WARM
            self.calls.append(CallRecord(call.submitted_at, now - call.submitted_at, worker.index, cold))
            self._dispatch()

    def resize(self, n: int) -> None:
        n = min(self.cfg.max_workers, max(self.cfg.min_workers, n))
        while self.size < n:
            self._spawn(self._warm(self._new_worker()))
        while self.size > n:
            removable = [w for w in self.workers.values()
                         if w.state in (WorkerState.COLD, WorkerState.WARM)]
            if not removable:
                break
            victim = min(removable, key=lambda w: (w.state is WorkerState.WARM, w.last_used))
            del self.workers[victim.index]
        self.size_history.append((self.clock(), self.size))

    def retire_idle(self) -> None:
        now = self.clock()
        for w in sorted(self.workers.values(), key=lambda w: w.last_used):
            if w.state is WorkerState.WARM and now - w.last_used > self.cfg.warm_idle_timeout:
                if self.size > self.cfg.min_workers:
                    del self.workers[w.index]
                else:
                    w.state = WorkerState.COLD

    def evaluate(self) -> int:
        rps = self.observed_rps()
        new = autoscale_workers(self.size, rps, self.cfg)
        if new != self.size:
            log.info("function pool: %d -> %d workers (%.1f rps)", self.size, new, rps)
            self.resize(new)
        self.retire_idle()
        return self.size

    async def _autoscale_loop(self) -> None:
        while True:
            await asyncio.sleep(self.cfg.eval_interval)
            self.evaluate()

    def start(self) -> None:
        if self._loop_task is None:
            self.size_history.append((self.clock(), self.size))
            self._loop_task = asyncio.ensure_future(self._autoscale_loop())

    async def stop(self) -> None:
        if self._loop_task:
            self._loop_task.cancel()
            self._loop_task = None
        for t in tuple(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    def sample(self) -> dict[int, float]:
        now = self.clock()
        dt = max(1e-9, now - self._last_sample)
        self._last_sample = now
        out = {}
        for w in self.workers.values():
            w.last_util = min(1.0, w._accum / dt)
            w._accum = 0.0
            out[w.index] = w.last_util
        return out

    def snapshot(self) -> dict:
        return {
            "service": "faas",
            "current": self.size,
            "rps": self.observed_rps(),
            "queued": len(self._queue),
            "replicas": {
                w.index: {"state": w.state.value, "utilization": w.last_util, "processed": w.processed}
                for w in self.workers.values()
            },
        }
