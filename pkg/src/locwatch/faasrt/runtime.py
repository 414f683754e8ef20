"""Queue watcher and the per-user processing function.

The watcher invokes the processing function for a user once the user's
queue holds ``trigger_threshold`` fixes; the function drains the queue one
fix at a time until fewer than ``low_watermark`` remain. A per-user lease
keeps at most one execution per queue, so each track is processed in
arrival order.
"""

from __future__ import annotations

import asyncio
import logging
from collections import Counter
from typing import Callable, Optional

from ..broker import Broker, BrokerError, Envelope
from ..core import FixRejected, LocationFix, UserId
from ..ingest import FIXES_TOPIC, user_queue
from .pool import FunctionConfig, Worker, WorkerPool
from .window import AnomalyPredicate, AnomalyVerdict, SlidingWindow, deviation_exceeds, verdict_for

log = logging.getLogger(__name__)

ANOMALY_TOPIC = "anomaly"


def lease_key(user: UserId) -> str:
    return f"lease:{user}"


def state_key(user: UserId) -> str:
    return f"fnstate:{user}"


async def process_user_queue(
    broker: Broker,
    user: UserId,
    cfg: FunctionConfig,
    predicate: AnomalyPredicate = deviation_exceeds,
    worker: Optional[Worker] = None,
    low_watermark: Optional[int] = None,
    counters: Optional[Counter] = None,
) -> list[AnomalyVerdict]:
    """Drain ``loc:<user>`` down to the low watermark, one verdict per fix.

    The sliding window survives between invocations in the KV store, so a
    track split across several drains is smoothed as one series. Anomalous
    verdicts are published on the ``anomaly`` topic; malformed entries are
    skipped and counted under ``counters["malformed"]``.
    """
    queue = user_queue(user)
    stop_below = max(1, cfg.low_watermark if low_watermark is None else low_watermark)
    window = SlidingWindow.loads(cfg.window_W, await broker.kv_get(state_key(user)))
    verdicts: list[AnomalyVerdict] = []
    while await broker.queue_len(queue) >= stop_below:
        env = await broker.dequeue(queue)
        if env is None:
            break
        try:
            fix = LocationFix.from_json(env.payload)
            if fix.user != user:
                raise FixRejected("user_id", "fix queued under another user")
        except FixRejected:
            if counters is not None:
                counters["malformed"] += 1
            continue
        if worker is not None:
            await worker.work(cfg.work_units_per_fix)
        verdict = verdict_for(window, fix, cfg.anomaly_threshold_m, predicate)
        verdicts.append(verdict)
        if verdict.anomalous:
            await broker.publish(ANOMALY_TOPIC, Envelope.new(verdict.to_json()))
    await broker.kv_set(state_key(user), window.dumps(), cfg.state_ttl)
    return verdicts


VerdictSink = Callable[[UserId, list[AnomalyVerdict]], None]


class FunctionRuntime:
    def __init__(self, broker: Broker, cfg: Optional[FunctionConfig] = None,
                 predicate: AnomalyPredicate = deviation_exceeds,
                 verdict_sink: Optional[VerdictSink] = None,
                 rescan_interval: float = 5.0):
        self.broker = broker
        self.cfg = cfg or FunctionConfig()
        self.predicate = predicate
        self.verdict_sink = verdict_sink
        self.rescan_interval = rescan_interval
        self.pool = WorkerPool(self.cfg)
        self.counters: Counter = Counter()
        self.known: set[UserId] = set()
        self.in_flight: set[UserId] = set()
        self.invocations: list[UserId] = []
        self._dirty: set[UserId] = set()
        self._tasks: set[asyncio.Task] = set()
        self._watch_task: Optional[asyncio.Task] = None
        self._idle = asyncio.Event()
        self._idle.set()

    async def start(self) -> None:
        self._sub = await self.broker.subscribe(FIXES_TOPIC)
        self.pool.start()
        self._watch_task = asyncio.ensure_future(self.watch())

    async def stop(self) -> None:
        if self._watch_task:
            self._watch_task.cancel()
            await asyncio.gather(self._watch_task, return_exceptions=True)
            self._watch_task = None
        await self._sub.close()
        await self.wait_idle()
        await self.pool.stop()

    def notify(self, user: UserId) -> None:
        """Mark ``user``'s queue for a threshold check on the next tick."""
        self.known.add(user)
        self._dirty.add(user)

    async def watch(self) -> None:
        loop = asyncio.get_running_loop()
        next_rescan = loop.time() + self.rescan_interval
        while True:
            try:
                env = await self._sub.get(timeout=0.05)
                while env is not None:
                    try:
                        self.notify(LocationFix.from_json(env.payload).user)
                    except FixRejected:
                        self.counters["malformed_notice"] += 1
                    env = await self._sub.get(timeout=0)
                if loop.time() >= next_rescan:
                    # covers notices dropped by a lagging subscription
                    self._dirty |= self.known
                    next_rescan = loop.time() + self.rescan_interval
                await self.check_dirty()
            except asyncio.CancelledError:
                raise
            except (BrokerError, OSError) as exc:
                log.warning("watch loop: broker hiccup (%s), retrying", exc)
                await asyncio.sleep(0.5)

    async def check_dirty(self) -> int:
        dirty, self._dirty = self._dirty, set()
        started = 0
        for user in dirty:
            if await self.maybe_invoke(user):
                started += 1
        return started

    async def maybe_invoke(self, user: UserId) -> bool:
        """Start one invocation for ``user`` if its queue crossed the threshold."""
        if user in self.in_flight:
            return False
        if await self.broker.queue_len(user_queue(user)) < self.cfg.trigger_threshold:
            return False
        if await self.broker.kv_get(lease_key(user)) is not None:
            return False
        await self.broker.kv_set(lease_key(user), b"1", self.cfg.lease_ttl)
        self._launch(user)
        return True

    def _launch(self, user: UserId, low_watermark: Optional[int] = None) -> asyncio.Task:
        self.in_flight.add(user)
        self._idle.clear()
        self.invocations.append(user)
        task = asyncio.ensure_future(self._invoke(user, low_watermark))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _invoke(self, user: UserId, low_watermark: Optional[int]) -> None:
        try:
            verdicts = await self.pool.invoke(self._function, user, low_watermark)
            self.counters["verdicts"] += len(verdicts)
            if self.verdict_sink is not None:
                self.verdict_sink(user, verdicts)
        except Exception:
            log.exception("function for %s failed", user)
            self.counters["failed_invocations"] += 1
        finally:
            self.in_flight.discard(user)
            try:
                await self.broker.kv_delete(lease_key(user))
            except (BrokerError, OSError):
                pass
            self._dirty.add(user)
            if not self.in_flight:
                self._idle.set()

    async def _function(self, worker: Worker, user: UserId, low_watermark: Optional[int]):
        await worker.work(self.cfg.work_units_per_invocation)
        return await process_user_queue(self.broker, user, self.cfg, self.predicate, worker,
                                        low_watermark, self.counters)

    async def wait_idle(self) -> None:
        while self.in_flight:
            await self._idle.wait()
            await asyncio.sleep(0)

    async def drain_all(self) -> None:
        """Process every known queue to empty; used at shutdown."""
        await self.wait_idle()
        for user in sorted(self.known):
            if await self.broker.queue_len(user_queue(user)) > 0 and user not in self.in_flight:
                self._launch(user, low_watermark=1)
        await self.wait_idle()

    def metrics(self) -> dict:
        return {
            "invocations": len(self.invocations),
            "in_flight": len(self.in_flight),
            "verdicts": self.counters["verdicts"],
            "malformed": self.counters["malformed"],
            "workers": self.pool.size,
        }
