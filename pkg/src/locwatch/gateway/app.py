"""HTTP entry point: authenticates once, then forwards over the broker.

Request/response endpoints use ``sync_call`` against a service queue and
degrade to 503 with a default body when the service does not answer. Every
request is bounded by a global deadline (408 when exceeded).
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from aiohttp import WSMsgType, web

from ..broker import Broker, sync_call
from ..core import FixRejected, LocationFix, Role
from ..scaler import ReplicaSet
from .auth import AuthToken, InvalidToken, TokenIssuer
from .channels import NotificationHub

log = logging.getLogger(__name__)

INGEST_QUEUE = "svc:ingest"
GUARDIAN_QUEUE = "svc:guardian"
NOTIFY_TOPIC = "notify"

PUBLIC = {("POST", "/auth/login"), ("POST", "/users"), ("GET", "/metrics")}

MetricLine = tuple[str, dict, float]

# typed request keys on aiohttp >= 3.12; plain strings before that
_RequestKey = getattr(web, "RequestKey", None)
DEADLINE_KEY = _RequestKey("deadline", float) if _RequestKey else "deadline"
IDENTITY_KEY = _RequestKey("identity", AuthToken) if _RequestKey else "identity"


@dataclass
class GatewayConfig:
    deadline: float = 5.0
    sync_backoff: float = 0.005
    sync_margin: float = 0.2
    token_ttl: float = 24 * 3600.0
    buffer_size: int = 100
    buffer_ttl: float = 60.0
    work_units: dict = field(default_factory=lambda: {"locations": 12.5, "default": 12.5})

    def units(self, endpoint: str) -> float:
        return float(self.work_units.get(endpoint, self.work_units.get("default", 0.0)))


class _WsConnection:
    def __init__(self, ws: web.WebSocketResponse):
        self.ws = ws

    async def send(self, message: str) -> None:
        await self.ws.send_str(message)

    async def close(self) -> None:
        await self.ws.close()


def _json(status: int, body: Any) -> web.Response:
    return web.json_response(body, status=status)


class Gateway:
    def __init__(self, broker: Broker, issuer: Optional[TokenIssuer] = None,
                 config: Optional[GatewayConfig] = None, replicas: Optional[ReplicaSet] = None,
                 metrics_providers: Iterable[Callable[[], Iterable[MetricLine]]] = ()):
        self.broker = broker
        self.issuer = issuer or TokenIssuer()
        self.config = config or GatewayConfig()
        self.replicas = replicas
        self.metrics_providers = list(metrics_providers)
        self.hub = NotificationHub(self.config.buffer_size, self.config.buffer_ttl)
        self.counts: Counter = Counter()
        self._tasks: list[asyncio.Task] = []
        self.app = web.Application(middlewares=[self._deadline_mw, self._auth_mw])
        self.app.add_routes([
            web.post("/auth/login", self.login),
            web.post("/users", self.register),
            web.post("/locations", self.post_location),
            web.post("/alarms", self.post_alarm),
            web.post("/alarms/{id}/respond", self.respond),
            web.post("/missions/{id}/close", self.close_mission),
            web.get("/users/{id}/location", self.user_location),
            web.get("/metrics", self.metrics),
            web.get("/ws", self.websocket),
        ])

    async def start(self) -> None:
        self._notify_sub = await self.broker.subscribe(NOTIFY_TOPIC)
        self._tasks.append(asyncio.ensure_future(self._relay_notifications()))
        self._tasks.append(asyncio.ensure_future(self._sweep_buffers()))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        await self._notify_sub.close()

    async def _relay_notifications(self) -> None:
        async for env in self._notify_sub:
            try:
                note = json.loads(env.payload)
                self.push_notification(note["user"], note["message"])
            except (ValueError, KeyError) as exc:
                log.warning("bad notification: %s", exc)

    async def _sweep_buffers(self) -> None:
        while True:
            await asyncio.sleep(1.0)
            self.hub.sweep()

    def push_notification(self, user: str, message: Any) -> str:
        return self.hub.push(user, message)

    # -- middleware ---------------------------------------------------------

    @web.middleware
    async def _deadline_mw(self, request: web.Request, handler):
        if request.path == "/ws":
            return await handler(request)
        request[DEADLINE_KEY] = time.monotonic() + self.config.deadline
        try:
            resp = await asyncio.wait_for(handler(request), self.config.deadline)
        except asyncio.TimeoutError:
            resp = _json(408, {"error": "deadline exceeded"})
        self.counts[(request.method, request.match_info.route.resource.canonical
                     if request.match_info.route.resource else "unmatched", resp.status)] += 1
        return resp

    @web.middleware
    async def _auth_mw(self, request: web.Request, handler):
        if request.match_info.route.resource is None:
            return _json(404, {"error": "unknown route"})
        if (request.method, request.path) not in PUBLIC:
            raw = request.headers.get("Authorization", "")
            raw = raw[7:] if raw.startswith("Bearer ") else request.query.get("token", "")
            try:
                request[IDENTITY_KEY] = self.issuer.verify(raw)
            except InvalidToken as exc:
                return _json(401, {"error": str(exc)})
        return await handler(request)

    # -- helpers ------------------------------------------------------------

    async def _cpu(self, endpoint: str) -> None:
        if self.replicas is not None:
            await self.replicas.execute(self.config.units(endpoint))

    async def _call(self, request: web.Request, queue: str, message: dict, default: Any):
        remaining = request[DEADLINE_KEY] - time.monotonic() - self.config.sync_margin
        backoff = self.config.sync_backoff
        retries = max(1, int(remaining / backoff))
        raw, error = await sync_call(self.broker, queue, json.dumps(message).encode(),
                                     retries=retries, backoff=backoff, default=default)
        if error is not None:
            log.info("%s degraded: %s", queue, error)
            return None, error
        return json.loads(raw), None

    async def _guardian(self, request: web.Request, op: str, **args) -> web.Response:
        identity: Optional[AuthToken] = request.get(IDENTITY_KEY)
        message = {"op": op, "args": args}
        if identity is not None:
            # internal traffic carries the verified identity, never the token
            message["identity"] = {"user": identity.subject, "role": identity.role.value}
        reply, error = await self._call(request, GUARDIAN_QUEUE, message, None)
        if error is not None:
            return _json(503, {"error": "service unavailable", "detail": error})
        return _json(reply["status"], reply["body"])

    @staticmethod
    async def _body(request: web.Request) -> dict:
        if not request.can_read_body:
            return {}
        try:
            data = await request.json()
        except ValueError:
            raise web.HTTPBadRequest(text='{"error": "body is not JSON"}',
                                     content_type="application/json") from None
        if not isinstance(data, dict):
            raise web.HTTPBadRequest(text='{"error": "expected a JSON object"}',
                                     content_type="application/json")
        return data

    # -- routes -------------------------------------------------------------

    async def register(self, request: web.Request) -> web.Response:
        await self._cpu("register")
        return await self._guardian(request, "register", profile=await self._body(request))

    async def login(self, request: web.Request) -> web.Response:
        await self._cpu("login")
        body = await self._body(request)
        user = body.get("user_id")
        if not isinstance(user, str) or not user:
            return _json(400, {"error": "user_id required"})
        reply, error = await self._call(request, GUARDIAN_QUEUE, {"op": "lookup", "args": {"user": user}}, None)
        if error is not None:
            return _json(503, {"error": "service unavailable", "detail": error})
        if reply["status"] != 200:
            return _json(401, {"error": "unknown user"})
        token = self.issuer.issue(user, Role(reply["body"]["role"]), self.config.token_ttl)
        return _json(200, {"token": token.raw, "role": token.role.value, "expires_at": token.expires_at})

    async def post_location(self, request: web.Request) -> web.Response:
        await self._cpu("locations")
        try:
            fix = LocationFix.from_dict(await self._body(request))
        except FixRejected as exc:
            return _json(400, {"error": str(exc), "field": exc.field})
        if fix.user != request[IDENTITY_KEY].subject:
            return _json(403, {"error": "fix belongs to another user"})
        reply, error = await self._call(request, INGEST_QUEUE, fix.to_dict(), None)
        if error is not None:
            return _json(503, {"status": "unavailable", "detail": error})
        return _json(202, {"status": "accepted"})

    async def post_alarm(self, request: web.Request) -> web.Response:
        await self._cpu("alarms")
        body = await self._body(request)
        location = None
        if "longitude" in body and "latitude" in body:
            location = {"longitude": body["longitude"], "latitude": body["latitude"]}
        return await self._guardian(request, "trigger", subject=body.get("subject"), location=location)

    async def respond(self, request: web.Request) -> web.Response:
        await self._cpu("alarms")
        body = await self._body(request)
        decision = body.get("decision")
        if decision not in ("accept", "decline"):
            return _json(400, {"error": "decision must be accept or decline"})
        return await self._guardian(request, "respond", alarm=request.match_info["id"],
                                    accept=decision == "accept")

    async def close_mission(self, request: web.Request) -> web.Response:
        await self._cpu("missions")
        body = await self._body(request)
        return await self._guardian(request, "close", mission=request.match_info["id"],
                                    safe_place=body.get("safe_place"))

    async def user_location(self, request: web.Request) -> web.Response:
        await self._cpu("users")
        return await self._guardian(request, "location", user=request.match_info["id"])

    async def websocket(self, request: web.Request) -> web.WebSocketResponse:
        ws = web.WebSocketResponse(heartbeat=30.0)
        await ws.prepare(request)
        user = request[IDENTITY_KEY].subject
        channel = await self.hub.connect(user, _WsConnection(ws))
        try:
            async for msg in ws:
                if msg.type == WSMsgType.TEXT and msg.data == "ping":
                    await ws.send_str("pong")
                elif msg.type in (WSMsgType.ERROR, WSMsgType.CLOSE):
                    break
        finally:
            self.hub.disconnect(user, channel)
        return ws

    async def metrics(self, request: web.Request) -> web.Response:
        lines = list(self.metric_lines())
        for provider in self.metrics_providers:
            lines.extend(provider())
        return web.Response(text=render_metrics(lines), content_type="text/plain")

    def metric_lines(self) -> Iterable[MetricLine]:
        for (method, route, status), n in sorted(self.counts.items(), key=str):
            yield "gateway_requests_total", {"method": method, "route": route, "status": str(status)}, n
        yield "notifications_delivered_total", {}, self.hub.delivered
        yield "notifications_undeliverable_total", {}, self.hub.undeliverable
        yield "notification_channels", {}, self.hub.connected


def render_metrics(lines: Iterable[MetricLine]) -> str:
    out = []
    for name, labels, value in lines:
        if labels:
            inner = ",".join(f'{k}="{v}"' for k, v in labels.items())
            out.append(f"{name}{{{inner}}} {value:g}")
        else:
            out.append(f"{name} {value:g}")
    return "\n".join(out) + "\n"


def parse_metrics(text: str) -> list[MetricLine]:
    """Inverse of :func:`render_metrics` for the simple label syntax used here."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, _, value = line.rpartition(" ")
        labels = {}
        if "{" in head:
            name, _, rest = head.partition("{")
            for part in rest.rstrip("}").split(","):
                if part:
                    k, _, v = part.partition("=")
                    labels[k] = v.strip('"')
        else:
            name = head
        out.append((name, labels, float(value)))
    return out
