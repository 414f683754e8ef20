"""Closed-loop virtual users driving the HTTP API along a schedule.

Each virtual user registers, logs in, then posts a location fix, waits for
the response, thinks for ``U[1, 5]`` seconds and repeats. A request fails if
no response arrives within the timeout or the status is 5xx. Setup traffic
(registration and login) is accounted separately from the per-second samples.
"""

from __future__ import annotations

import asyncio
import csv
import heapq
import itertools
import json
import logging
import math
import random
import time
from array import array
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import aiohttp

from ..gateway.app import parse_metrics
from .scenarios import USER_LIFETIME_SECONDS, ScenarioPhase, plan_events, scheduled_users, total_duration
from .stats import MetricSample, SecondBuckets, percentile

log = logging.getLogger(__name__)

METERS_PER_DEGREE = 111_320.0
# active users are sampled at this offset into each second; kept off round
# fractions so sampling never coincides with a ramp's spawn slot
SAMPLE_OFFSET = 0.4713
CSV_HEADER = ["t", "active_users", "attempted", "ok", "failed", "latency_p50_ms", "latency_p95_ms"]


class TargetUnreachable(RuntimeError):
    pass


@dataclass
class RunConfig:
    target: str
    seed: int = 0
    timeout: float = 5.0
    think_min: float = 1.0
    think_max: float = 5.0
    lifetime: Optional[float] = USER_LIFETIME_SECONDS
    center: tuple[float, float] = (10.3883, 55.3959)  # lon, lat
    box_m: float = 10_000.0
    max_speed: float = 1.5  # m/s, walking
    ws_fraction: float = 0.05
    scrape_interval: float = 1.0
    setup_attempts: int = 3
    user_prefix: str = "lt"
    progress: Optional[Callable[[MetricSample], None]] = None


class VirtualUser:
    """One simulated client with its own deterministic random streams."""

    def __init__(self, index: int, cfg: RunConfig):
        self.index = index
        self.cfg = cfg
        self.user_id = f"{cfg.user_prefix}-{cfg.seed}-{index}"
        self.think_rng = random.Random(f"{cfg.seed}:think:{index}")
        self.move_rng = random.Random(f"{cfg.seed}:move:{index}")
        half = cfg.box_m / 2
        self.x = self.move_rng.uniform(-half, half)
        self.y = self.move_rng.uniform(-half, half)
        self.active = True
        self.token: Optional[str] = None
        self.ws: Optional[aiohttp.ClientWebSocketResponse] = None
        self.last_ts = 0
        self.last_sent = 0.0
        self.sent = 0

    def first_delay(self) -> float:
        """Delay to the first post, drawn from the renewal process' stationary residual.

        The think interval straddling an arbitrary instant is length-biased
        (density proportional to its length); the residual is a uniform
        fraction of it. Fresh users therefore post at the long-run rate at once.
        """
        lo, hi = self.cfg.think_min, self.cfg.think_max
        u, v = self.think_rng.random(), self.think_rng.random()
        straddling = math.sqrt(lo * lo + (hi * hi - lo * lo) * u)
        return v * straddling

    def think(self) -> float:
        return self.think_rng.uniform(self.cfg.think_min, self.cfg.think_max)

    def next_fix(self, dt: float) -> dict:
        """Advance a bounded random walk by ``dt`` seconds and describe the position."""
        rng = self.move_rng
        speed = rng.uniform(0.0, self.cfg.max_speed)
        heading = rng.uniform(0.0, 2 * math.pi)
        half = self.cfg.box_m / 2
        self.x = _reflect(self.x + speed * dt * math.cos(heading), half)
        self.y = _reflect(self.y + speed * dt * math.sin(heading), half)
        lon0, lat0 = self.cfg.center
        ts = max(int(time.time() * 1000), self.last_ts + 1)
        self.last_ts = ts
        return {
            "user_id": self.user_id,
            "timestamp": ts,
            "longitude": lon0 + self.x / (METERS_PER_DEGREE * math.cos(math.radians(lat0))),
            "latitude": lat0 + self.y / METERS_PER_DEGREE,
            "altitude": rng.uniform(0.0, 100.0),
            "accuracy": rng.uniform(3.0, 50.0),
            "speed": speed,
            "acceleration": rng.uniform(-1.0, 1.0),
        }


def _reflect(v: float, half: float) -> float:
    if v > half:
        return 2 * half - v
    if v < -half:
        return -2 * half - v
    return v


@dataclass
class RunResult:
    samples: list[MetricSample]
    summary: dict
    util_columns: list[str]
    # one entry per measured request: start offset, latency (s), outcome
    starts: array = field(default_factory=lambda: array("d"))
    latencies: array = field(default_factory=lambda: array("d"))
    outcomes: bytearray = field(default_factory=bytearray)  # 1 ok, 0 failed

    def window(self, t_from: float, t_to: float) -> tuple[int, int, list[float]]:
        """(ok, failed, latencies in ms) for requests started in ``[t_from, t_to)``."""
        ok = failed = 0
        lats = []
        for s, lat, o in zip(self.starts, self.latencies, self.outcomes):
            if t_from <= s < t_to:
                lats.append(lat * 1000.0)
                if o:
                    ok += 1
                else:
                    failed += 1
        return ok, failed, lats

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER + self.util_columns)
            for s in self.samples:
                w.writerow(s.row(self.util_columns))
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True))
        return out


def trailing_throughput(samples: Sequence[MetricSample], window: int = 10, mean_think: float = 3.0
                        ) -> list[tuple[int, float, float]]:
    """(t, ok requests/s, expected requests/s) over trailing ``window``-sample windows."""
    out = []
    for i in range(window - 1, len(samples)):
        chunk = samples[i - window + 1:i + 1]
        ok = sum(s.ok for s in chunk) / window
        expected = sum(s.active_users for s in chunk) / window / mean_think
        out.append((samples[i].t, ok, expected))
    return out


def _util_column(service: str, replica: str) -> str:
    return f"{service}.{replica}.util"


def _column_key(col: str):
    service, replica, _ = col.split(".")
    return service, int(replica)


class LoadRunner:
    def __init__(self, phases: Sequence[ScenarioPhase], cfg: RunConfig):
        self.phases = list(phases)
        self.cfg = cfg
        self.duration = total_duration(self.phases)
        self.buckets = SecondBuckets()
        self.users: dict[int, VirtualUser] = {}
        self.active = 0
        self.peak = 0
        self.spawned = 0
        self.setup = {"attempted": 0, "ok": 0, "failed": 0, "users_failed": 0}
        self.ws = {"opened": 0, "failed": 0, "messages": 0}
        self.result_log = (array("d"), array("d"), bytearray())
        self.client_errors = 0
        self._heap: list = []
        self._seq = itertools.count()
        self._wake = asyncio.Event()
        self._tasks: set[asyncio.Task] = set()
        self._util_cols: set[str] = set()
        self._stopping = False

    # -- clock --------------------------------------------------------------

    def now(self) -> float:
        return asyncio.get_running_loop().time() - self._t0

    def _push(self, t: float, action: str, user: int) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), action, user))
        self._wake.set()

    def _spawn_task(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    # -- main loop ----------------------------------------------------------

    async def run(self) -> RunResult:
        cfg = self.cfg
        connector = aiohttp.TCPConnector(limit=0, force_close=False)
        timeout = aiohttp.ClientTimeout(total=cfg.timeout)
        async with aiohttp.ClientSession(connector=connector, timeout=timeout) as session:
            self.session = session
            await self._check_target()
            self._t0 = asyncio.get_running_loop().time()
            for ev in plan_events(self.phases, cfg.lifetime):
                if ev.t < self.duration:
                    self._push(ev.t, ev.kind, ev.user)
            sampler = asyncio.ensure_future(self._sampler())
            try:
                await self._dispatch()
                await asyncio.sleep(max(0.0, self.duration - self.now()))
            finally:
                self._stopping = True
                for user in self.users.values():
                    user.active = False
                sampler.cancel()
                await asyncio.gather(sampler, return_exceptions=True)
                for user in self.users.values():
                    if user.ws is not None:
                        await user.ws.close()
                # requests in flight resolve within the timeout
                if self._tasks:
                    await asyncio.wait(list(self._tasks), timeout=cfg.timeout + 1.0)
                for task in list(self._tasks):
                    task.cancel()
                await asyncio.gather(*self._tasks, return_exceptions=True)
        return self._result()

    async def _check_target(self) -> None:
        try:
            async with self.session.get(self.cfg.target + "/metrics") as resp:
                if resp.status >= 500:
                    raise TargetUnreachable(f"{self.cfg.target} answered {resp.status}")
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
            raise TargetUnreachable(f"{self.cfg.target}: {exc}") from exc

    async def _dispatch(self) -> None:
        while self._heap and self._heap[0][0] < self.duration:
            t = self._heap[0][0]
            delay = t - self.now()
            if delay > 0:
                self._wake.clear()
                try:
                    await asyncio.wait_for(self._wake.wait(), delay)
                except asyncio.TimeoutError:
                    pass
                continue
            _, _, action, index = heapq.heappop(self._heap)
            if action == "spawn":
                self._on_spawn(index)
            elif action == "retire":
                self._on_retire(index)
            else:
                self._on_fire(index)

    def _on_spawn(self, index: int) -> None:
        user = VirtualUser(index, self.cfg)
        self.users[index] = user
        self.active += 1
        self.spawned += 1
        self.peak = max(self.peak, self.active)
        self._spawn_task(self._setup(user))

    def _on_retire(self, index: int) -> None:
        user = self.users.pop(index, None)
        if user is None:
            return
        user.active = False
        self.active -= 1
        if user.ws is not None:
            self._spawn_task(user.ws.close())

    def _on_fire(self, index: int) -> None:
        user = self.users.get(index)
        if user is None or not user.active or user.token is None:
            return
        self._spawn_task(self._post(user))

    # -- traffic ------------------------------------------------------------

    async def _setup_request(self, path: str, body: dict, accept: tuple[int, ...]) -> Optional[dict]:
        self.setup["attempted"] += 1
        try:
            async with self.session.post(self.cfg.target + path, json=body) as resp:
                data = await resp.json(content_type=None)
                if resp.status in accept:
                    self.setup["ok"] += 1
                    return data if isinstance(data, dict) else {}
        except (aiohttp.ClientError, asyncio.TimeoutError, ValueError) as exc:
            log.debug("setup %s failed: %s", path, exc)
        self.setup["failed"] += 1
        return None

    async def _setup(self, user: VirtualUser) -> None:
        for attempt in range(self.cfg.setup_attempts):
            if not user.active:
                return
            registered = await self._setup_request(
                "/users", {"user_id": user.user_id, "role": "dementia"}, (201, 409))
            login = registered is not None and await self._setup_request(
                "/auth/login", {"user_id": user.user_id}, (200,))
            if login:
                user.token = login["token"]
                break
            await asyncio.sleep(1.0)
        else:
            self.setup["users_failed"] += 1
            return
        if not user.active:
            return
        if self._ws_member(user):
            self._spawn_task(self._websocket(user))
        self._push(self.now() + user.first_delay(), "fire", user.index)

    def _ws_member(self, user: VirtualUser) -> bool:
        frac = self.cfg.ws_fraction
        return frac > 0 and random.Random(f"{self.cfg.seed}:ws:{user.index}").random() < frac

    async def _websocket(self, user: VirtualUser) -> None:
        try:
            ws = await self.session.ws_connect(
                self.cfg.target + "/ws", headers={"Authorization": f"Bearer {user.token}"},
                timeout=aiohttp.ClientWSTimeout(ws_close=self.cfg.timeout), autoping=True)
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            log.debug("ws for %s failed: %s", user.user_id, exc)
            self.ws["failed"] += 1
            return
        self.ws["opened"] += 1
        user.ws = ws
        if not user.active:
            await ws.close()
            return
        async for _ in ws:
            self.ws["messages"] += 1

    async def _post(self, user: VirtualUser) -> None:
        start = self.now()
        fix = user.next_fix(start - user.last_sent if user.sent else self.cfg.think_max)
        user.sent += 1
        user.last_sent = start
        self.buckets.started(start)
        ok = client_error = False
        try:
            async with self.session.post(self.cfg.target + "/locations", json=fix,
                                         headers={"Authorization": f"Bearer {user.token}"}) as resp:
                await resp.read()
                ok = resp.status < 500
                client_error = 400 <= resp.status < 500
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            log.debug("post for %s failed: %s", user.user_id, exc)
        end = self.now()
        self.buckets.finished(start, end - start, ok, client_error)
        self.client_errors += client_error
        starts, lats, outcomes = self.result_log
        starts.append(start)
        lats.append(end - start)
        outcomes.append(1 if ok else 0)
        if user.active and not self._stopping:
            self._push(end + user.think(), "fire", user.index)

    # -- sampling -----------------------------------------------------------

    async def _sampler(self) -> None:
        """Snapshot active users once per second and scrape replica utilization."""
        second = 0
        while second < math.ceil(self.duration):
            await asyncio.sleep(max(0.0, second + SAMPLE_OFFSET - self.now()))
            self.buckets.active[second] = self.active
            self._spawn_task(self._scrape(second))
            done = second - int(self.cfg.timeout) - 1
            if self.cfg.progress is not None and done >= 0:
                self.cfg.progress(self.buckets.sample(done))
            second += 1

    async def _scrape(self, second: int) -> None:
        try:
            timeout = aiohttp.ClientTimeout(total=self.cfg.scrape_interval)
            async with self.session.get(self.cfg.target + "/metrics", timeout=timeout) as resp:
                text = await resp.text()
        except (aiohttp.ClientError, asyncio.TimeoutError):
            return
        util = {}
        for name, labels, value in parse_metrics(text):
            if name == "replica_utilization":
                col = _util_column(labels.get("service", "?"), labels.get("replica", "0"))
                util[col] = value
        self._util_cols.update(util)
        self.buckets.util[second] = util

    # -- results ------------------------------------------------------------

    def _result(self) -> RunResult:
        last = math.ceil(self.duration) - 1
        samples = self.buckets.samples(until=last)
        starts, lats, outcomes = self.result_log
        all_ms = [x * 1000.0 for x in lats]
        attempted = sum(s.attempted for s in samples)
        ok = sum(s.ok for s in samples)
        failed = sum(s.failed for s in samples)
        p95s = [s.latency_p95_ms for s in samples if not math.isnan(s.latency_p95_ms)]
        mismatch = max((abs(s.active_users - scheduled_users(self.phases, s.t + SAMPLE_OFFSET)) for s in samples),
                       default=0)
        summary = {
            "target": self.cfg.target,
            "seed": self.cfg.seed,
            "duration_s": self.duration,
            "attempted": attempted,
            "ok": ok,
            "failed": failed,
            "client_errors": self.client_errors,
            "latency_p50_ms": _num(percentile(all_ms, 0.50)),
            "latency_p95_ms": _num(percentile(all_ms, 0.95)),
            "max_sample_p95_ms": max(p95s, default=None),
            "peak_active_users": self.peak,
            "users_spawned": self.spawned,
            "max_schedule_deviation": mismatch,
            "setup": dict(self.setup),
            "websocket": dict(self.ws),
        }
        cols = sorted(self._util_cols, key=_column_key)
        return RunResult(samples, summary, cols, starts, lats, outcomes)


def _num(x: float) -> Optional[float]:
    return None if math.isnan(x) else x


async def run_scenario(phases: Sequence[ScenarioPhase], cfg: RunConfig,
                       out_dir: Optional[str | Path] = None) -> RunResult:
    """Drive ``phases`` against ``cfg.target``; write CSV and summary when ``out_dir`` is set."""
    result = await LoadRunner(phases, cfg).run()
    if out_dir is not None:
        result.write(out_dir)
    log.info("run finished: %s", json.dumps({k: result.summary[k] for k in ("attempted", "ok", "failed")}))
    return result


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("progress", None)
    return d
