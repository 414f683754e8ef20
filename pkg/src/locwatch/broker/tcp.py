"""TCP broker server and client for multi-process deployments."""

from __future__ import annotations

import asyncio
import logging
import time
import uuid
from collections import deque
from typing import Optional

from . import wire
from .base import (
    SUBSCRIBER_BUFFER,
    Broker,
    BrokerClosed,
    BrokerError,
    Envelope,
    PayloadTooLarge,
    Subscription,
)
from .memory import MemoryBroker

log = logging.getLogger(__name__)


class BrokerServer:
    """Serves a :class:`MemoryBroker` over the frame protocol in :mod:`.wire`."""

    def __init__(self, broker: Optional[MemoryBroker] = None):
        self.broker = broker or MemoryBroker()
        self._server: Optional[asyncio.base_events.Server] = None
        self._conns: set[asyncio.Task] = set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        sock = self._server.sockets[0].getsockname()
        log.info("broker listening on %s:%s", sock[0], sock[1])
        return sock[0], sock[1]

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in tuple(self._conns):
            task.cancel()
        await self.broker.close()

    async def serve_forever(self) -> None:
        assert self._server is not None
        await self._server.serve_forever()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._conns.add(task)
        try:
            while True:
                try:
                    frame = await wire.read_frame(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    return
                if frame.opcode == wire.SUB:
                    await self._stream(frame.name, reader, writer)
                    return
                reply = await self._dispatch(frame)
                writer.write(reply.encode())
                await writer.drain()
        except (wire.FrameError, ConnectionError) as exc:
            log.debug("dropping broker connection: %s", exc)
        except asyncio.CancelledError:
            pass
        finally:
            self._conns.discard(task)
            writer.close()

    async def _dispatch(self, f: wire.Frame) -> wire.Frame:
        b = self.broker
        try:
            if f.opcode == wire.ENQ:
                env = Envelope(uuid.UUID(bytes=f.payload[:16]), f.payload[16:])
                await b.enqueue(f.name, env)
                return wire.Frame(wire.OK)
            if f.opcode == wire.DEQ:
                env = await b.dequeue(f.name, wire.unpack_u32(f.payload) / 1000.0)
                if env is None:
                    return wire.Frame(wire.EMPTY)
                return wire.Frame(wire.OK, payload=wire.encode_envelope(env))
            if f.opcode == wire.LEN:
                return wire.Frame(wire.OK, payload=wire.pack_u64(await b.queue_len(f.name)))
            if f.opcode == wire.PUB:
                env = Envelope(uuid.UUID(bytes=f.payload[:16]), f.payload[16:])
                await b.publish(f.name, env)
                return wire.Frame(wire.OK)
            if f.opcode == wire.SET:
                ttl = wire.unpack_u32(f.payload) / 1000.0
                await b.kv_set(f.name, f.payload[4:], ttl)
                return wire.Frame(wire.OK)
            if f.opcode == wire.GET:
                value = await b.kv_get(f.name)
                if value is None:
                    return wire.Frame(wire.EMPTY)
                return wire.Frame(wire.OK, payload=value)
            if f.opcode == wire.DEL:
                await b.kv_delete(f.name)
                return wire.Frame(wire.OK)
            return _error("protocol", f"unknown opcode {f.opcode}")
        except BrokerClosed as exc:
            return _error("closed", str(exc))
        except PayloadTooLarge as exc:
            return _error("too_large", str(exc))
        except (ValueError, wire.FrameError) as exc:
            return _error("invalid", str(exc))

    async def _stream(self, topic, reader, writer) -> None:
        sub = await self.broker.subscribe(topic)
        writer.write(wire.Frame(wire.OK).encode())
        await writer.drain()
        # the client never sends on a subscription socket; EOF means unsubscribe
        eof = asyncio.ensure_future(reader.read())
        try:
            while not eof.done():
                env = await sub.get(timeout=0.5)
                if env is None:
                    if sub.closed:
                        return
                    continue
                writer.write(wire.Frame(wire.PUB, topic, wire.encode_envelope(env)).encode())
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            eof.cancel()
            await sub.close()


def _error(kind: str, message: str) -> wire.Frame:
    return wire.Frame(wire.ERROR, payload=f"{kind}:{message}".encode())


def _raise_for(frame: wire.Frame) -> None:
    kind, _, message = frame.payload.decode(errors="replace").partition(":")
    if kind == "closed":
        raise BrokerClosed(message)
    if kind == "too_large":
        raise PayloadTooLarge(message)
    if kind == "invalid":
        raise ValueError(message)
    raise BrokerError(message)


class _Conn:
    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer

    async def request(self, frame: wire.Frame) -> wire.Frame:
        self.writer.write(frame.encode())
        await self.writer.drain()
        return await wire.read_frame(self.reader)

    def close(self) -> None:
        self.writer.close()


class TcpSubscription(Subscription):
    def __init__(self, conn: _Conn, topic: str, maxlen: int):
        self.topic = topic
        self._conn = conn
        self._buf: deque[Envelope] = deque()
        self._maxlen = maxlen
        self._event = asyncio.Event()
        self._closed = False
        self.dropped = 0
        self._reader = asyncio.ensure_future(self._pump())

    async def _pump(self) -> None:
        try:
            while True:
                frame = await wire.read_frame(self._conn.reader)
                if frame.opcode != wire.PUB:
                    continue
                if len(self._buf) >= self._maxlen:
                    self._buf.popleft()
                    self.dropped += 1
                self._buf.append(wire.decode_envelope(frame.payload))
                self._event.set()
        except (asyncio.IncompleteReadError, ConnectionError, wire.FrameError):
            pass
        finally:
            self._closed = True
            self._event.set()

    async def get(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._buf:
            if self._closed:
                return None
            self._event.clear()
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return None
            try:
                await asyncio.wait_for(self._event.wait(), remaining)
            except asyncio.TimeoutError:
                return None
        return self._buf.popleft()

    @property
    def closed(self) -> bool:
        return self._closed and not self._buf

    async def close(self) -> None:
        self._closed = True
        self._reader.cancel()
        self._conn.close()
        self._event.set()


class TcpBroker(Broker):
    """Client side of :class:`BrokerServer`; same contract as :class:`MemoryBroker`.

    Keeps a pool of request connections so a blocking dequeue on one
    connection never stalls operations on other queues.
    """

    def __init__(self, host: str, port: int, subscriber_buffer: int = SUBSCRIBER_BUFFER):
        self.host = host
        self.port = port
        self.subscriber_buffer = subscriber_buffer
        self._idle: list[_Conn] = []
        self._busy: set[_Conn] = set()
        self._subs: set[TcpSubscription] = set()
        self._closed = False

    @classmethod
    def from_url(cls, url: str) -> "TcpBroker":
        rest = url.split("://", 1)[-1]
        host, _, port = rest.rpartition(":")
        return cls(host or "127.0.0.1", int(port))

    async def _open(self) -> _Conn:
        try:
            reader, writer = await asyncio.open_connection(self.host, self.port)
        except OSError as exc:
            raise BrokerError(f"cannot reach broker at {self.host}:{self.port}: {exc}") from exc
        return _Conn(reader, writer)

    async def _request(self, opcode: int, name: str, payload: bytes = b"") -> wire.Frame:
        if self._closed:
            raise BrokerClosed("client closed")
        conn = self._idle.pop() if self._idle else await self._open()
        self._busy.add(conn)
        try:
            reply = await conn.request(wire.Frame(opcode, name, payload))
        except BaseException:
            self._busy.discard(conn)
            conn.close()
            raise
        self._busy.discard(conn)
        self._idle.append(conn)
        if reply.opcode == wire.ERROR:
            _raise_for(reply)
        return reply

    async def enqueue(self, queue: str, envelope: Envelope) -> None:
        self._check_payload(envelope.payload)
        await self._request(wire.ENQ, queue, envelope.uuid.bytes + envelope.payload)

    async def dequeue(self, queue: str, wait: float = 0.0) -> Optional[Envelope]:
        reply = await self._request(wire.DEQ, queue, wire.pack_u32(int(max(0.0, wait) * 1000)))
        if reply.opcode == wire.EMPTY:
            return None
        return wire.decode_envelope(reply.payload)

    async def queue_len(self, queue: str) -> int:
        return wire.unpack_u64((await self._request(wire.LEN, queue)).payload)

    async def publish(self, topic: str, envelope: Envelope) -> None:
        self._check_payload(envelope.payload)
        await self._request(wire.PUB, topic, envelope.uuid.bytes + envelope.payload)

    async def subscribe(self, topic: str) -> TcpSubscription:
        if self._closed:
            raise BrokerClosed("client closed")
        conn = await self._open()
        reply = await conn.request(wire.Frame(wire.SUB, topic))
        if reply.opcode == wire.ERROR:
            conn.close()
            _raise_for(reply)
        sub = TcpSubscription(conn, topic, self.subscriber_buffer)
        self._subs.add(sub)
        return sub

    async def kv_set(self, key: str, value: bytes, ttl: float) -> None:
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        await self._request(wire.SET, key, wire.pack_u32(max(1, round(ttl * 1000))) + value)

    async def kv_get(self, key: str) -> Optional[bytes]:
        reply = await self._request(wire.GET, key)
        return None if reply.opcode == wire.EMPTY else reply.payload

    async def kv_delete(self, key: str) -> None:
        await self._request(wire.DEL, key)

    async def close(self) -> None:
        self._closed = True
        for conn in self._idle:
            conn.close()
        self._idle.clear()
        for sub in tuple(self._subs):
            await sub.close()
