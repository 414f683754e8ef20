"""In-process broker for single-process runs and tests (one asyncio loop)."""

from __future__ import annotations

import asyncio
import time
from collections import deque
from typing import Optional

from .base import (
    SUBSCRIBER_BUFFER,
    Broker,
    BrokerClosed,
    Envelope,
    Subscription,
    check_name,
)


class _Queue:
    __slots__ = ("items", "waiters")

    def __init__(self):
        self.items: deque[Envelope] = deque()
        self.waiters: deque[asyncio.Future] = deque()

    def wake_one(self) -> None:
        while self.waiters:
            fut = self.waiters.popleft()
            if not fut.done():
                fut.set_result(None)
                return


class MemorySubscription(Subscription):
    def __init__(self, broker: "MemoryBroker", topic: str, maxlen: int):
        self._broker = broker
        self.topic = topic
        self._buf: deque[Envelope] = deque()
        self._maxlen = maxlen
        self._waiter: Optional[asyncio.Future] = None
        self._closed = False
        self.dropped = 0

    def _push(self, env: Envelope) -> None:
        if len(self._buf) >= self._maxlen:
            # slow subscriber: drop oldest instead of blocking the publisher
            self._buf.popleft()
            self.dropped += 1
            self._broker.dropped += 1
        self._buf.append(env)
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)

    async def get(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._buf:
            if self._closed:
                return None
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return None
            self._waiter = asyncio.get_running_loop().create_future()
            try:
                await asyncio.wait_for(self._waiter, remaining)
            except asyncio.TimeoutError:
                return None
            finally:
                self._waiter = None
        return self._buf.popleft()

    @property
    def closed(self) -> bool:
        return self._closed

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._broker._topics.get(self.topic, set()).discard(self)
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)


class MemoryBroker(Broker):
    """Queues, topics and KV store living in the current event loop.

    All mutations happen without suspension points, which makes every
    operation atomic with respect to other coroutines on the loop.
    """

    def __init__(self, max_payload: int | None = None, subscriber_buffer: int = SUBSCRIBER_BUFFER):
        if max_payload is not None:
            self.max_payload = max_payload
        self.subscriber_buffer = subscriber_buffer
        self._queues: dict[str, _Queue] = {}
        self._topics: dict[str, set[MemorySubscription]] = {}
        self._kv: dict[str, tuple[bytes, float]] = {}
        self._kv_ops = 0
        self._closed = False
        self.dropped = 0

    def _check_open(self) -> None:
        if self._closed:
            raise BrokerClosed("broker is shut down")

    def _queue(self, name: str) -> _Queue:
        q = self._queues.get(name)
        if q is None:
            check_name(name)
            q = self._queues[name] = _Queue()
        return q

    async def enqueue(self, queue: str, envelope: Envelope) -> None:
        self._check_open()
        self._check_payload(envelope.payload)
        q = self._queue(queue)
        q.items.append(envelope)
        q.wake_one()

    async def dequeue(self, queue: str, wait: float = 0.0) -> Optional[Envelope]:
        self._check_open()
        q = self._queue(queue)
        deadline = time.monotonic() + max(0.0, wait)
        while True:
            if q.items:
                env = q.items.popleft()
                if q.items:
                    # pass the baton in case another consumer was also woken
                    q.wake_one()
                return env
            remaining = deadline - time.monotonic()
            if remaining <= 0 or self._closed:
                return None
            fut = asyncio.get_running_loop().create_future()
            q.waiters.append(fut)
            try:
                await asyncio.wait_for(fut, remaining)
            except asyncio.TimeoutError:
                pass
            except asyncio.CancelledError:
                if q.items:
                    q.wake_one()
                raise
            finally:
                if not fut.done():
                    fut.cancel()

    async def queue_len(self, queue: str) -> int:
        q = self._queues.get(queue)
        return len(q.items) if q else 0

    def queue_names(self, prefix: str = "") -> list[str]:
        return [n for n, q in self._queues.items() if n.startswith(prefix)]

    async def publish(self, topic: str, envelope: Envelope) -> None:
        self._check_open()
        self._check_payload(envelope.payload)
        check_name(topic)
        for sub in tuple(self._topics.get(topic, ())):
            sub._push(envelope)

    async def subscribe(self, topic: str) -> MemorySubscription:
        self._check_open()
        check_name(topic)
        sub = MemorySubscription(self, topic, self.subscriber_buffer)
        self._topics.setdefault(topic, set()).add(sub)
        return sub

    async def kv_set(self, key: str, value: bytes, ttl: float) -> None:
        self._check_open()
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        now = time.monotonic()
        self._kv[key] = (bytes(value), now + ttl)
        self._kv_ops += 1
        if self._kv_ops % 4096 == 0:
            self._sweep(now)

    async def kv_get(self, key: str) -> Optional[bytes]:
        self._check_open()
        entry = self._kv.get(key)
        if entry is None:
            return None
        value, expires = entry
        if time.monotonic() >= expires:
            del self._kv[key]
            return None
        return value

    async def kv_delete(self, key: str) -> None:
        self._check_open()
        self._kv.pop(key, None)

    def _sweep(self, now: float) -> None:
        expired = [k for k, (_, exp) in self._kv.items() if exp <= now]
        for k in expired:
            del self._kv[k]

    def kv_size(self) -> int:
        self._sweep(time.monotonic())
        return len(self._kv)

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for q in self._queues.values():
            while q.waiters:
                q.wake_one()
        for subs in self._topics.values():
            for sub in tuple(subs):
                await sub.close()
