"""Location ingestion: buffered bulk persistence plus per-user queues.

Every accepted fix goes two ways: into a write buffer that is flushed to the
location store in batches, and onto the user's named queue ``loc:<user>``
where the function runtime picks it up. The ack never waits for either the
flush or the downstream processing.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Protocol

from .broker import Broker, Envelope
from .core import LocationFix, UserId

log = logging.getLogger(__name__)

FIXES_TOPIC = "fixes"


def user_queue(user: UserId) -> str:
    return f"loc:{user}"


class LocationStore(Protocol):
    def write_batch(self, records: list[LocationFix]) -> int: ...

    def count(self) -> int: ...

    def scan(self, user: UserId) -> list[LocationFix]: ...


class StoreWriteError(OSError):
    pass


class NdjsonLocationStore:
    """Append-only newline-delimited JSON log split into numbered segments.

    Records are de-duplicated on ``(user, timestamp)``, so re-writing a batch
    after a partial failure is harmless.
    """

    def __init__(self, directory: str | os.PathLike, segment_size: int = 100_000):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.segment_size = segment_size
        self._seen: set[tuple[str, int]] = set()
        self._segment = 0
        self._in_segment = 0
        self._load()

    def _segment_path(self, seq: int) -> Path:
        return self.directory / f"locations-{seq}.ndjson"

    def _segments(self) -> list[Path]:
        paths = self.directory.glob("locations-*.ndjson")
        return sorted(paths, key=lambda p: int(p.stem.split("-", 1)[1]))

    def _load(self) -> None:
        for path in self._segments():
            self._segment = int(path.stem.split("-", 1)[1])
            self._in_segment = 0
            with path.open() as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._seen.add((rec["user_id"], rec["timestamp"]))
                    self._in_segment += 1

    def count(self) -> int:
        return len(self._seen)

    def write_batch(self, records: list[LocationFix]) -> int:
        fresh = []
        keys = set()
        for fix in records:
            key = (fix.user, fix.timestamp)
            if key in self._seen or key in keys:
                continue
            keys.add(key)
            fresh.append(fix)
        written = 0
        while written < len(fresh):
            if self._in_segment >= self.segment_size:
                self._segment += 1
                self._in_segment = 0
            room = self.segment_size - self._in_segment
            chunk = fresh[written : written + room]
            data = "".join(json.dumps(f.to_dict(), separators=(",", ":")) + "\n" for f in chunk)
            with self._segment_path(self._segment).open("a") as fh:
                fh.write(data)
                fh.flush()
            self._in_segment += len(chunk)
            written += len(chunk)
        self._seen |= keys
        return written

    def scan(self, user: UserId) -> list[LocationFix]:
        return [f for f in self._iter() if f.user == user]

    def _iter(self) -> Iterator[LocationFix]:
        for path in self._segments():
            with path.open() as fh:
                for line in fh:
                    if line.strip():
                        yield LocationFix.from_dict(json.loads(line))


@dataclass
class IngestConfig:
    flush_threshold: int = 50
    flush_interval: float = 2.0
    publish_fixes: bool = True
    work_units: float = 4.0  # modelled CPU per accepted fix


class WriteBuffer:
    def __init__(self, flush_threshold: int = 50, flush_interval: float = 2.0):
        self.pending: list[LocationFix] = []
        self.flush_threshold = flush_threshold
        self.flush_interval = flush_interval
        self.last_flush = time.monotonic()

    def __len__(self) -> int:
        return len(self.pending)

    def swap(self) -> list[LocationFix]:
        batch, self.pending = self.pending, []
        self.last_flush = time.monotonic()
        return batch


class IngestService:
    """Accepts validated fixes; owns the write buffer and the flush loop."""

    def __init__(self, broker: Broker, store: LocationStore, config: Optional[IngestConfig] = None):
        self.broker = broker
        self.store = store
        self.config = config or IngestConfig()
        self.buffer = WriteBuffer(self.config.flush_threshold, self.config.flush_interval)
        self._retry: list[LocationFix] = []
        self._flush_lock = asyncio.Lock()
        self._flusher: Optional[asyncio.Task] = None
        self._pending_flushes: set[asyncio.Task] = set()
        self._closed = False
        self.accepted = 0
        self.flushes: list[int] = []
        self.failed_flushes = 0
        self.on_accept: list[Callable[[LocationFix], None]] = []

    async def start(self) -> None:
        self._flusher = asyncio.ensure_future(self._flush_loop())

    async def accept_fix(self, fix: LocationFix) -> None:
        """Buffer ``fix`` for persistence and put it on the user's queue.

        Raises whatever the broker raises (e.g. ``BrokerClosed``) so the
        gateway can answer 503.
        """
        if self._closed:
            raise RuntimeError("ingest service is closed")
        payload = fix.to_json()
        # enqueue first: nothing is buffered for a fix the caller sees rejected
        await self.broker.enqueue(user_queue(fix.user), Envelope.new(payload))
        self.buffer.pending.append(fix)
        self.accepted += 1
        for hook in self.on_accept:
            hook(fix)
        if self.config.publish_fixes:
            await self.broker.publish(FIXES_TOPIC, Envelope.new(payload))
        if len(self.buffer) >= self.buffer.flush_threshold:
            self._spawn_flush(self.buffer.swap())

    def _spawn_flush(self, batch: list[LocationFix]) -> None:
        task = asyncio.ensure_future(self._write(batch))
        self._pending_flushes.add(task)
        task.add_done_callback(self._pending_flushes.discard)

    async def flush(self) -> int:
        """Write everything pending now; returns the number of records written."""
        return await self._write(self.buffer.swap())

    async def _write(self, batch: list[LocationFix]) -> int:
        async with self._flush_lock:
            batch = self._retry + batch
            self._retry = []
            if not batch:
                return 0
            try:
                written = await asyncio.to_thread(self.store.write_batch, batch)
            except Exception as exc:
                # keep the batch; the next interval retries it
                log.warning("store write of %d records failed: %s", len(batch), exc)
                self.failed_flushes += 1
                self._retry = batch
                return 0
            self.flushes.append(len(batch))
            return written

    async def _flush_loop(self) -> None:
        interval = self.buffer.flush_interval
        while True:
            await asyncio.sleep(interval / 4)
            due = time.monotonic() - self.buffer.last_flush >= interval
            if due and (len(self.buffer) or self._retry):
                await self._write(self.buffer.swap())
            elif due:
                self.buffer.last_flush = time.monotonic()

    async def drain_and_close(self) -> None:
        """Final flush; afterwards the store holds every accepted fix. Idempotent."""
        self._closed = True
        if self._flusher is not None:
            self._flusher.cancel()
            await asyncio.gather(self._flusher, return_exceptions=True)
            self._flusher = None
        if self._pending_flushes:
            await asyncio.gather(*self._pending_flushes, return_exceptions=True)
        for _ in range(3):
            await self._write(self.buffer.swap())
            if not self._retry:
                break

    @property
    def pending(self) -> int:
        return len(self.buffer) + len(self._retry)

    def metrics(self) -> dict:
        return {
            "accepted": self.accepted,
            "pending": self.pending,
            "stored": self.store.count(),
            "flushes": len(self.flushes),
            "failed_flushes": self.failed_flushes,
        }


def read_store(directory: str | os.PathLike) -> Iterable[LocationFix]:
    return NdjsonLocationStore(directory)._iter()
