"""Broker interface and the request/response protocol layered on top of it.

Every service talks through a broker: named FIFO queues, pub/sub topics and a
key-value store whose entries expire. ``sync_call``/``sync_serve`` implement
request/response over those primitives: the caller enqueues a message tagged
with a fresh UUID, a responder writes its result under that UUID in the KV
store, and the caller polls for it, falling back to a default value.
"""

from __future__ import annotations

import abc
import asyncio
import inspect
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Optional, Union

log = logging.getLogger(__name__)

MAX_PAYLOAD = 64 * 1024
SUBSCRIBER_BUFFER = 1024

DEFAULT_RETRIES = 10
DEFAULT_BACKOFF = 0.1
DEFAULT_RESULT_TTL = 30.0

_OK = b"\x00"
_ERR = b"\x01"


class BrokerError(Exception):
    pass


class BrokerClosed(BrokerError):
    pass


class PayloadTooLarge(BrokerError):
    pass


@dataclass(frozen=True)
class Envelope:
    uuid: uuid.UUID
    payload: bytes
    enqueued_at: float = field(default_factory=time.monotonic)

    @classmethod
    def new(cls, payload: bytes) -> "Envelope":
        return cls(uuid.uuid4(), bytes(payload))


def check_name(name: str) -> None:
    if not name:
        raise ValueError("queue/topic names must be non-empty")


class Subscription(abc.ABC):
    """Stream of envelopes published on one topic after subscribing."""

    dropped: int = 0

    @abc.abstractmethod
    async def get(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        """Next envelope, or None once ``timeout`` elapses or the stream is closed."""

    @abc.abstractmethod
    async def close(self) -> None: ...

    def __aiter__(self):
        return self

    async def __anext__(self) -> Envelope:
        while True:
            if self.closed:
                raise StopAsyncIteration
            env = await self.get(timeout=1.0)
            if env is not None:
                return env

    @property
    @abc.abstractmethod
    def closed(self) -> bool: ...


class Broker(abc.ABC):
    """Message fabric shared by all services.

    Queue and topic namespaces are disjoint: a queue and a topic may share a
    name without interfering.
    """

    max_payload: int = MAX_PAYLOAD

    @abc.abstractmethod
    async def enqueue(self, queue: str, envelope: Envelope) -> None: ...

    @abc.abstractmethod
    async def dequeue(self, queue: str, wait: float = 0.0) -> Optional[Envelope]: ...

    @abc.abstractmethod
    async def queue_len(self, queue: str) -> int: ...

    @abc.abstractmethod
    async def publish(self, topic: str, envelope: Envelope) -> None: ...

    @abc.abstractmethod
    async def subscribe(self, topic: str) -> Subscription: ...

    @abc.abstractmethod
    async def kv_set(self, key: str, value: bytes, ttl: float) -> None: ...

    @abc.abstractmethod
    async def kv_get(self, key: str) -> Optional[bytes]: ...

    @abc.abstractmethod
    async def kv_delete(self, key: str) -> None: ...

    @abc.abstractmethod
    async def close(self) -> None: ...

    def _check_payload(self, payload: bytes) -> None:
        if len(payload) > self.max_payload:
            raise PayloadTooLarge(f"{len(payload)} bytes exceeds {self.max_payload}")


async def sync_call(
    broker: Broker,
    queue: str,
    payload: bytes,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    default: Any = None,
) -> tuple[Any, Optional[str]]:
    """Request/response over a named queue.

    Returns ``(result, None)`` when a responder answered, otherwise
    ``(default, error_message)``. Never raises for broker or responder
    failures; the caller always gets an answer within roughly
    ``retries * backoff`` seconds.
    """
    env = Envelope.new(payload)
    key = str(env.uuid)
    try:
        await broker.enqueue(queue, env)
    except (BrokerError, OSError) as exc:
        return default, f"enqueue failed: {exc}"
    for _ in range(max(1, retries)):
        await asyncio.sleep(backoff)
        try:
            raw = await broker.kv_get(key)
        except (BrokerError, OSError) as exc:
            log.debug("kv_get failed for %s: %s", key, exc)
            continue
        if raw is None:
            continue
        if raw[:1] == _OK:
            return raw[1:], None
        return default, raw[1:].decode(errors="replace") or "responder error"
    return default, f"no response on {queue!r} after {retries} polls"


Handler = Callable[[bytes], Union[bytes, Awaitable[bytes]]]


async def sync_serve(
    broker: Broker,
    queue: str,
    handler: Handler,
    result_ttl: float = DEFAULT_RESULT_TTL,
    stop: Optional[asyncio.Event] = None,
    poll: float = 0.25,
) -> None:
    """Answer requests on ``queue`` until ``stop`` is set or the task is cancelled.

    Handler exceptions are stored as error results under the request UUID so
    the caller degrades to its default; they never end the loop. ``stop`` is
    only checked between requests, so a request in progress always completes.
    """
    stop = stop or asyncio.Event()
    while not stop.is_set():
        try:
            env = await broker.dequeue(queue, wait=poll)
        except BrokerClosed:
            return
        except (BrokerError, OSError) as exc:
            log.warning("dequeue on %s failed: %s", queue, exc)
            await asyncio.sleep(poll)
            continue
        if env is None:
            continue
        try:
            result = handler(env.payload)
            if inspect.isawaitable(result):
                result = await result
            value = _OK + bytes(result)
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # handler bugs must not kill the responder
            log.exception("handler for %s failed", queue)
            value = _ERR + f"{type(exc).__name__}: {exc}".encode()
        try:
            await broker.kv_set(str(env.uuid), value, result_ttl)
        except (BrokerError, OSError) as exc:
            log.warning("could not store result for %s: %s", env.uuid, exc)
