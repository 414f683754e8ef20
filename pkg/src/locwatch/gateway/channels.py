"""Per-user notification channels with a short offline buffer."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections import deque
from typing import Any, Callable, Optional, Protocol

from ..core import UserId

log = logging.getLogger(__name__)

DELIVERED = "delivered"
BUFFERED = "buffered"
UNDELIVERABLE = "undeliverable"


class Connection(Protocol):
    async def send(self, message: str) -> None: ...

    async def close(self) -> None: ...


class _Channel:
    """One open connection; a writer task keeps sends in push order."""

    def __init__(self, user: UserId, conn: Connection, connected_at: float):
        self.user = user
        self.conn = conn
        self.connected_at = connected_at
        self.outbox: asyncio.Queue[str] = asyncio.Queue()
        self.closed = asyncio.Event()
        self.writer = asyncio.ensure_future(self._write())

    async def _write(self) -> None:
        try:
            while True:
                msg = await self.outbox.get()
                await self.conn.send(msg)
        except asyncio.CancelledError:
            pass
        except Exception as exc:
            log.info("channel for %s broke: %s", self.user, exc)
        finally:
            self.closed.set()


class NotificationHub:
    """Registry of at most one live channel per user.

    Messages for users without a channel wait in a buffer of ``buffer_size``
    for up to ``buffer_ttl`` seconds and are flushed in order on reconnect;
    overflow and expiry count as undeliverable.
    """

    def __init__(self, buffer_size: int = 100, buffer_ttl: float = 60.0,
                 clock: Callable[[], float] = time.monotonic):
        self.buffer_size = buffer_size
        self.buffer_ttl = buffer_ttl
        self.clock = clock
        self._channels: dict[UserId, _Channel] = {}
        self._buffers: dict[UserId, deque[tuple[float, str]]] = {}
        self.delivered = 0
        self.undeliverable = 0

    def is_connected(self, user: UserId) -> bool:
        ch = self._channels.get(user)
        return ch is not None and not ch.closed.is_set()

    @property
    def connected(self) -> int:
        return sum(1 for u in self._channels if self.is_connected(u))

    async def connect(self, user: UserId, conn: Connection) -> _Channel:
        old = self._channels.pop(user, None)
        if old is not None:
            old.writer.cancel()
            try:
                await old.conn.close()
            except Exception:
                pass
        ch = _Channel(user, conn, self.clock())
        self._channels[user] = ch
        for _, msg in self._take_buffer(user):
            ch.outbox.put_nowait(msg)
            self.delivered += 1
        return ch

    def disconnect(self, user: UserId, channel: Optional[_Channel] = None) -> None:
        ch = self._channels.get(user)
        if ch is None or (channel is not None and ch is not channel):
            return
        del self._channels[user]
        ch.writer.cancel()

    def _take_buffer(self, user: UserId) -> list[tuple[float, str]]:
        buf = self._buffers.pop(user, None)
        if not buf:
            return []
        cutoff = self.clock() - self.buffer_ttl
        fresh = [(t, m) for t, m in buf if t >= cutoff]
        self.undeliverable += len(buf) - len(fresh)
        return fresh

    def push(self, user: UserId, message: Any) -> str:
        """Deliver or buffer ``message`` (str or JSON-serialisable)."""
        text = message if isinstance(message, str) else _dumps(message)
        ch = self._channels.get(user)
        if ch is not None and not ch.closed.is_set():
            ch.outbox.put_nowait(text)
            self.delivered += 1
            return DELIVERED
        if ch is not None:
            self.disconnect(user, ch)
        buf = self._buffers.setdefault(user, deque())
        now = self.clock()
        while buf and buf[0][0] < now - self.buffer_ttl:
            buf.popleft()
            self.undeliverable += 1
        if len(buf) >= self.buffer_size:
            self.undeliverable += 1
            return UNDELIVERABLE
        buf.append((now, text))
        return BUFFERED

    def sweep(self) -> None:
        cutoff = self.clock() - self.buffer_ttl
        for user in list(self._buffers):
            buf = self._buffers[user]
            while buf and buf[0][0] < cutoff:
                buf.popleft()
                self.undeliverable += 1
            if not buf:
                del self._buffers[user]


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"))
