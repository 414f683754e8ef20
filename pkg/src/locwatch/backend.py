"""Wires the services together over one broker.

In single-process mode every role shares an in-process broker; with a
``tcp://`` broker URL each role can run in its own process (see ``roles``).
"""

from __future__ import annotations

import asyncio
import json
import logging
import tempfile
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from aiohttp import web

from .broker import Broker, BrokerServer, Envelope, MemoryBroker, connect, sync_serve
from .core import FixRejected, GeoPoint, LocationFix, Role, UserProfile
from .faasrt import ANOMALY_TOPIC, AnomalyVerdict, FunctionConfig, FunctionRuntime
from .gateway import GUARDIAN_QUEUE, INGEST_QUEUE, NOTIFY_TOPIC, Gateway, GatewayConfig, TokenIssuer
from .guardian import (
    AlarmSource,
    Forbidden,
    Guardian,
    GuardianConfig,
    GuardianError,
    NotFound,
    UserDirectory,
)
from .ingest import FIXES_TOPIC, IngestConfig, IngestService, NdjsonLocationStore
from .scaler import ReplicaSet, ScalingPolicy

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

ALL_ROLES = frozenset({"gateway", "ingest", "faas", "guardian"})


def _section(cls, data: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**dict(data))


@dataclass
class BackendConfig:
    broker_url: Optional[str] = None
    data_dir: Optional[str] = None
    secret: Optional[str] = None
    roles: frozenset = ALL_ROLES
    guardian_loops: int = 2
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    function: FunctionConfig = field(default_factory=FunctionConfig)
    guardian: GuardianConfig = field(default_factory=GuardianConfig)
    gateway_scaling: ScalingPolicy = field(default_factory=ScalingPolicy)
    ingest_scaling: ScalingPolicy = field(default_factory=ScalingPolicy)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "BackendConfig":
        data = dict(data)
        scaling = data.pop("scaling", {})
        top = data.pop("backend", {})
        cfg = cls(
            gateway=_section(GatewayConfig, data.pop("gateway", {})),
            ingest=_section(IngestConfig, data.pop("ingest", {})),
            function=FunctionConfig.from_mapping(data.pop("function", {})),
            guardian=_section(GuardianConfig, data.pop("guardian", {})),
            gateway_scaling=_section(ScalingPolicy, scaling.get("gateway", {})),
            ingest_scaling=_section(ScalingPolicy, scaling.get("ingest", {})),
        )
        if data:
            raise ValueError(f"unknown config sections: {sorted(data)}")
        for key, value in top.items():
            if key == "roles":
                value = frozenset(value)
            if not hasattr(cfg, key):
                raise ValueError(f"unknown [backend] key {key!r}")
            setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "BackendConfig":
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        return cls.from_mapping(data)


def _reply(status: int, body: Any) -> bytes:
    return json.dumps({"status": status, "body": body}).encode()


class GuardianService:
    """Serves the user directory and the alarm/mission API on ``svc:guardian``."""

    def __init__(self, broker: Broker, config: GuardianConfig, loops: int = 2):
        self.broker = broker
        self.directory = UserDirectory()
        self.guardian = Guardian(self.directory, self._notify, config)
        self.loops = loops
        self._stop = asyncio.Event()
        self._tasks: list[asyncio.Task] = []

    async def _notify(self, user: str, message: dict) -> str:
        note = json.dumps({"user": user, "message": message}).encode()
        await self.broker.publish(NOTIFY_TOPIC, Envelope.new(note))
        return "published"

    async def start(self) -> None:
        self._anomalies = await self.broker.subscribe(ANOMALY_TOPIC)
        self._fixes = await self.broker.subscribe(FIXES_TOPIC)
        for _ in range(self.loops):
            self._tasks.append(asyncio.ensure_future(
                sync_serve(self.broker, GUARDIAN_QUEUE, self.handle, stop=self._stop)))
        self._tasks.append(asyncio.ensure_future(self._consume_anomalies()))
        self._tasks.append(asyncio.ensure_future(self._consume_fixes()))

    async def stop(self) -> None:
        self._stop.set()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        await self._anomalies.close()
        await self._fixes.close()

    async def _consume_anomalies(self) -> None:
        async for env in self._anomalies:
            try:
                verdict = AnomalyVerdict.from_json(env.payload)
                await self.guardian.on_verdict(verdict.user, verdict.smoothed)
            except (GuardianError, ValueError, KeyError) as exc:
                log.info("anomaly not actionable: %s", exc)

    async def _consume_fixes(self) -> None:
        async for env in self._fixes:
            try:
                await self.guardian.on_fix(LocationFix.from_json(env.payload))
            except (GuardianError, FixRejected) as exc:
                log.debug("fix relay skipped: %s", exc)

    async def handle(self, payload: bytes) -> bytes:
        msg = json.loads(payload)
        op, args = msg["op"], msg.get("args", {})
        identity = msg.get("identity") or {}
        try:
            handler = getattr(self, f"_op_{op}")
        except AttributeError:
            return _reply(400, {"error": f"unknown op {op}"})
        try:
            status, body = await handler(identity, **args)
        except GuardianError as exc:
            return _reply(exc.status, {"error": str(exc)})
        except (ValueError, KeyError, TypeError) as exc:
            return _reply(400, {"error": str(exc)})
        return _reply(status, body)

    async def _op_register(self, identity, profile):
        p = UserProfile.from_dict(profile)
        self.directory.register(p)
        return 201, p.to_dict()

    async def _op_lookup(self, identity, user):
        p = self.directory.profiles.get(user)
        if p is None:
            return 404, {"error": "unknown user"}
        return 200, {"user_id": p.user, "role": p.role.value}

    async def _op_trigger(self, identity, subject=None, location=None):
        me, role = identity["user"], Role(identity["role"])
        if role is Role.DEMENTIA:
            if subject not in (None, me):
                raise Forbidden("a person with dementia can only raise their own alarm")
            subject, source = me, AlarmSource.MANUAL
        elif role is Role.RELATIVE:
            if subject is None or not self.directory.is_linked(me, subject):
                raise Forbidden("relatives can only raise alarms for linked users")
            source = AlarmSource.RELATIVE
        else:
            raise Forbidden("volunteers cannot raise alarms")
        point = GeoPoint.from_dict(location) if location else None
        alarm = await self.guardian.trigger_alarm(subject, source, point)
        return 201, alarm.to_dict()

    async def _op_respond(self, identity, alarm, accept):
        mission = await self.guardian.respond(alarm, identity["user"], bool(accept))
        return 200, mission.to_dict()

    async def _op_close(self, identity, mission, safe_place=None):
        m = await self.guardian.close_mission(mission, identity["user"], safe_place)
        return 200, m.to_dict()

    async def _op_location(self, identity, user):
        me = identity["user"]
        if me != user and not self.directory.is_linked(me, user):
            raise Forbidden("only linked relatives can see this location")
        p = self.directory.get(user)
        if p.last_known is None:
            raise NotFound("no location yet")
        return 200, p.last_known.to_dict()


def ingest_replicas(broker: Broker, ingest: IngestService, policy: ScalingPolicy) -> ReplicaSet:
    """Ingest replicas: one ``svc:ingest`` responder loop per replica."""

    async def serve(replica):
        async def handler(payload: bytes) -> bytes:
            fix = LocationFix.from_json(payload)
            await replica.work(ingest.config.work_units)
            await ingest.accept_fix(fix)
            return b'{"status":202}'

        await sync_serve(broker, INGEST_QUEUE, handler, stop=replica.stop, poll=0.1)

    return ReplicaSet("ingest", policy, serve=serve)


class Backend:
    def __init__(self, config: Optional[BackendConfig] = None, broker: Optional[Broker] = None):
        self.config = config or BackendConfig()
        self.broker = broker or connect(self.config.broker_url)
        self._tmp: Optional[tempfile.TemporaryDirectory] = None
        self.gateway: Optional[Gateway] = None
        self.ingest: Optional[IngestService] = None
        self.runtime: Optional[FunctionRuntime] = None
        self.guardian_service: Optional[GuardianService] = None
        self.replica_sets: dict[str, ReplicaSet] = {}
        self._runner: Optional[web.AppRunner] = None
        self._tasks: list[asyncio.Task] = []
        self.url: Optional[str] = None

    @property
    def guardian(self) -> Guardian:
        return self.guardian_service.guardian

    def _data_dir(self) -> Path:
        if self.config.data_dir:
            return Path(self.config.data_dir)
        self._tmp = tempfile.TemporaryDirectory(prefix="locwatch-")
        return Path(self._tmp.name)

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> Optional[str]:
        cfg = self.config
        roles = cfg.roles
        if "guardian" in roles:
            self.guardian_service = GuardianService(self.broker, cfg.guardian, cfg.guardian_loops)
            await self.guardian_service.start()
        if "ingest" in roles:
            store = NdjsonLocationStore(self._data_dir() / "locations")
            self.ingest = IngestService(self.broker, store, cfg.ingest)
            await self.ingest.start()
            rs = ingest_replicas(self.broker, self.ingest, cfg.ingest_scaling)
            self.replica_sets["ingest"] = rs
            await rs.start()
        if "faas" in roles:
            self.runtime = FunctionRuntime(self.broker, cfg.function)
            await self.runtime.start()
            self._tasks.append(asyncio.ensure_future(self._sample_pool()))
        if "gateway" in roles:
            rs = ReplicaSet("gateway", cfg.gateway_scaling)
            self.replica_sets["gateway"] = rs
            await rs.start()
            self.gateway = Gateway(self.broker, TokenIssuer(cfg.secret), cfg.gateway, rs,
                                   metrics_providers=[self.metric_lines])
            await self.gateway.start()
            self._runner = web.AppRunner(self.gateway.app, access_log=None)
            await self._runner.setup()
            site = web.TCPSite(self._runner, host, port, backlog=2048)
            await site.start()
            sock = site._server.sockets[0].getsockname()
            self.url = f"http://{sock[0]}:{sock[1]}"
            log.info("gateway listening on %s", self.url)
        return self.url

    async def _sample_pool(self) -> None:
        while True:
            await asyncio.sleep(1.0)
            self.runtime.pool.sample()

    async def stop(self, drain: bool = True) -> None:
        """Shut down; with ``drain`` every accepted fix is persisted and processed."""
        if self._runner is not None:
            await self._runner.cleanup()
        if self.gateway is not None:
            await self.gateway.stop()
        for rs in self.replica_sets.values():
            await rs.stop()
        if self.runtime is not None:
            if drain:
                await self.runtime.drain_all()
            await self.runtime.stop()
        if self.ingest is not None:
            await self.ingest.drain_and_close()
        if self.guardian_service is not None:
            await self.guardian_service.stop()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        await self.broker.close()
        if self._tmp is not None:
            self._tmp.cleanup()

    def metric_lines(self) -> Iterable[tuple[str, dict, float]]:
        for name, rs in self.replica_sets.items():
            yield "replicas", {"service": name}, rs.current
            yield "service_utilization", {"service": name}, rs.last_util
            for slot in range(rs.policy.max_replicas):
                r = rs.replicas.get(slot)
                yield "replica_utilization", {"service": name, "replica": str(slot)}, r.last_util if r else 0.0
        if self.runtime is not None:
            pool = self.runtime.pool
            yield "replicas", {"service": "faas"}, pool.size
            for slot in range(self.config.function.max_workers):
                w = pool.workers.get(slot)
                yield "replica_utilization", {"service": "faas", "replica": str(slot)}, w.last_util if w else 0.0
            for key, value in self.runtime.metrics().items():
                yield f"faas_{key}", {}, value
        if self.ingest is not None:
            for key, value in self.ingest.metrics().items():
                yield f"ingest_{key}", {}, value
        dropped = getattr(self.broker, "dropped", None)
        if dropped is not None:
            yield "broker_dropped_total", {}, dropped


class BackendThread:
    """Runs a :class:`Backend` on its own event loop in a daemon thread.

    Handy for tests and for load runs where the load generator must not
    share an event loop with the system under test.
    """

    def __init__(self, config: Optional[BackendConfig] = None, host: str = "127.0.0.1", port: int = 0):
        self.config = config or BackendConfig()
        self.host = host
        self.port = port
        self.loop = asyncio.new_event_loop()
        self.backend: Optional[Backend] = None
        self.url: Optional[str] = None
        self._thread = threading.Thread(target=self.loop.run_forever, name="backend", daemon=True)

    def start(self) -> str:
        self._thread.start()
        self.url = self.call(self._start)
        return self.url

    async def _start(self) -> str:
        self.backend = Backend(self.config)
        return await self.backend.start(self.host, self.port)

    def call(self, fn, *args, timeout: float = 120.0):
        """Run coroutine function ``fn(*args)`` on the backend loop and wait for it."""
        return asyncio.run_coroutine_threadsafe(fn(*args), self.loop).result(timeout)

    def stop(self, drain: bool = True) -> None:
        if self.backend is not None:
            self.call(self.backend.stop, drain)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self._thread.join(10)
        self.loop.close()

    def __enter__(self) -> "BackendThread":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


async def run_broker(host: str, port: int) -> None:
    server = BrokerServer(MemoryBroker())
    await server.start(host, port)
    try:
        await server.serve_forever()
    finally:
        await server.stop()
