import asyncio
import math
import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from locwatch.broker import Envelope, MemoryBroker
from locwatch.core import GeoPoint, LocationFix
from locwatch.faasrt import (
    ANOMALY_TOPIC,
    FunctionConfig,
    FunctionRuntime,
    SlidingWindow,
    WorkerPool,
    WorkerState,
    autoscale_workers,
    moving_average,
    process_user_queue,
    target_workers,
    verdict_for,
)
from locwatch.faasrt.window import deviation_exceeds
from locwatch.ingest import user_queue

M_PER_DEG_LAT = 6_371_000.0 * math.pi / 180


def brute_means(points, w):
    """Oracle: mean over the last ``w`` points (or fewer at the start)."""
    out = []
    for i in range(len(points)):
        chunk = points[max(0, i - w + 1):i + 1]
        out.append((sum(p.longitude for p in chunk) / len(chunk), sum(p.latitude for p in chunk) / len(chunk)))
    return out


coords = st.builds(GeoPoint, st.floats(-180, 180), st.floats(-90, 90))


@given(st.lists(coords, min_size=1, max_size=40), st.integers(1, 10))
def test_streaming_window_matches_brute_force(points, w):
    win = SlidingWindow(w)
    for p, (lon, lat) in zip(points, brute_means(points, w)):
        m = win.push(p)
        assert m.longitude == pytest.approx(lon, abs=1e-12)
        assert m.latitude == pytest.approx(lat, abs=1e-12)


@given(st.lists(coords, min_size=1, max_size=12), st.integers(1, 10))
def test_window_state_round_trip(points, w):
    win = SlidingWindow(w, points)
    again = SlidingWindow.loads(w, win.dumps())
    assert list(again.points) == list(win.points)


def test_moving_average_is_order_independent():
    pts = [GeoPoint(1e-9 * i, 1e8 if i == 0 else 1.0) for i in range(5)]
    assert moving_average(pts) == moving_average(list(reversed(pts)))
    with pytest.raises(ValueError):
        moving_average([])


def _track(user, n, start=(10.0, 55.0), step_m=10.0, t0=1_000):
    lon, lat = start
    return [LocationFix(user, t0 + i, lon, lat + i * step_m / M_PER_DEG_LAT, 0, 5, 1, 0) for i in range(n)]


def test_straight_walk_is_not_anomalous():
    win = SlidingWindow(5)
    verdicts = [verdict_for(win, f, 200.0) for f in _track("u", 30)]
    assert not any(v.anomalous for v in verdicts)


def test_jump_beyond_threshold_is_flagged():
    win = SlidingWindow(5)
    track = _track("u", 10)
    for f in track:
        verdict_for(win, f, 200.0)
    last = track[-1]
    # the window includes the jump itself, which pulls the average toward it
    near = LocationFix("u", 2000, last.longitude, last.latitude + 200 / M_PER_DEG_LAT, 0, 5, 1, 0)
    far = LocationFix("u", 2001, last.longitude, last.latitude + 600 / M_PER_DEG_LAT, 0, 5, 1, 0)
    w1 = SlidingWindow(5, win.points)
    assert not verdict_for(w1, near, 200.0).anomalous
    assert verdict_for(win, far, 200.0).anomalous


def test_custom_predicate_is_used():
    always = lambda fix, smoothed, d: True
    v = verdict_for(SlidingWindow(3), _track("u", 1)[0], 200.0, always)
    assert v.anomalous


def _fill(broker, fixes):
    async def go():
        for f in fixes:
            await broker.enqueue(user_queue(f.user), Envelope.new(f.to_json()))
    return go()


def test_process_user_queue_matches_oracle(arun):
    rng = random.Random(7)
    fixes = [LocationFix("u", i + 1, rng.uniform(10, 10.01), rng.uniform(55, 55.01), 0, 1, 1, 0)
             for i in range(23)]
    cfg = FunctionConfig(window_W=4)

    async def main():
        b = MemoryBroker()
        await _fill(b, fixes)
        sub = await b.subscribe(ANOMALY_TOPIC)
        first = await process_user_queue(b, "u", cfg)
        left = await b.queue_len(user_queue("u"))
        await _fill(b, [])
        second = await process_user_queue(b, "u", cfg, low_watermark=1)
        published = 0
        while await sub.get(0) is not None:
            published += 1
        return first, left, second, published

    first, left, second, published = arun(main())
    assert left == cfg.low_watermark - 1
    assert len(first) == 23 - left and len(second) == left
    verdicts = first + second
    expected = brute_means([f.point for f in fixes], 4)
    for v, f, (lon, lat) in zip(verdicts, fixes, expected):
        assert v.at == f.timestamp
        assert v.smoothed.longitude == pytest.approx(lon, abs=1e-12)
        assert v.smoothed.latitude == pytest.approx(lat, abs=1e-12)
        assert v.anomalous == deviation_exceeds(f, GeoPoint(lon, lat), cfg.anomaly_threshold_m)
    assert published == sum(v.anomalous for v in verdicts)


def test_malformed_entries_are_skipped(arun):
    async def main():
        b = MemoryBroker()
        await b.enqueue(user_queue("u"), Envelope.new(b"garbage"))
        await _fill(b, _track("u", 3))
        await _fill(b, [LocationFix("other", 5, 1, 1, 0, 0, 0, 0)])
        await b.enqueue(user_queue("u"), b and Envelope.new(_track("other", 1)[0].to_json()))
        counters = Counter()
        out = await process_user_queue(b, "u", FunctionConfig(), low_watermark=1, counters=counters)
        return len(out), counters["malformed"]

    assert arun(main()) == (3, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        FunctionConfig(trigger_threshold=2, low_watermark=2)
    with pytest.raises(ValueError):
        FunctionConfig(min_workers=3, max_workers=2)
    with pytest.raises(ValueError):
        FunctionConfig.from_mapping({"bogus": 1})
    assert FunctionConfig.from_mapping({"window_W": 7}).window_W == 7


def test_target_and_step_scaling():
    cfg = FunctionConfig()
    assert target_workers(0, cfg) == 1
    assert target_workers(120, cfg) == 3
    assert target_workers(10_000, cfg) == 8
    assert autoscale_workers(1, 120, cfg) == 2
    assert autoscale_workers(2, 120, cfg) == 3
    assert autoscale_workers(3, 120, cfg) == 3
    assert autoscale_workers(5, 0, cfg) == 4


async def _sleepy(worker, d):
    await asyncio.sleep(d)
    return worker.index


def test_cold_start_then_warm_reuse(arun):
    cfg = FunctionConfig(cold_start_delay=0.2)

    async def main():
        pool = WorkerPool(cfg)
        assert pool.workers[0].state is WorkerState.COLD
        await pool.invoke(_sleepy, 0.01)
        await pool.invoke(_sleepy, 0.01)
        await pool.stop()
        return list(pool.calls)

    cold, warm = arun(main())
    assert cold.cold and cold.latency >= 0.2
    assert not warm.cold and warm.latency < 0.1


def test_idle_worker_goes_cold_at_min_and_retires_above(arun):
    now = [0.0]
    cfg = FunctionConfig(cold_start_delay=0.0, min_workers=1, max_workers=3, warm_idle_timeout=60)

    async def main():
        pool = WorkerPool(cfg, clock=lambda: now[0])
        await pool.invoke(_sleepy, 0)
        pool.resize(2)
        await asyncio.sleep(0.01)
        assert all(w.state is WorkerState.WARM for w in pool.workers.values())
        now[0] = 61.0
        pool.retire_idle()
        states = [w.state for w in pool.workers.values()]
        await pool.stop()
        return pool.size, states

    size, states = arun(main())
    assert size == 1 and states == [WorkerState.COLD]


def test_errors_propagate_to_caller(arun):
    async def bad(worker):
        raise KeyError("nope")

    async def main():
        pool = WorkerPool(FunctionConfig(cold_start_delay=0.0))
        with pytest.raises(KeyError):
            await pool.invoke(bad)
        # worker is reusable afterwards
        assert await pool.invoke(_sleepy, 0) == 0
        await pool.stop()

    arun(main())


def _runtime(cfg=None, **kw):
    b = MemoryBroker()
    return b, FunctionRuntime(b, cfg or FunctionConfig(cold_start_delay=0.05), **kw)


def test_threshold_triggers_one_invocation(arun):
    async def main():
        b, rt = _runtime()
        fixes = _track("u", 12)
        await _fill(b, fixes[:9])
        rt.notify("u")
        assert await rt.check_dirty() == 0
        await _fill(b, fixes[9:10])
        rt.notify("u")
        started = await rt.check_dirty()
        # a second check while running must not start another
        rt.notify("u")
        again = await rt.check_dirty()
        await rt.wait_idle()
        left = await b.queue_len(user_queue("u"))
        await rt.pool.stop()
        return started, again, left, rt.invocations

    started, again, left, invocations = arun(main())
    assert (started, again) == (1, 0)
    assert left == 1 and invocations == ["u"]


def test_lease_blocks_other_runtimes(arun):
    async def main():
        b = MemoryBroker()
        cfg = FunctionConfig(cold_start_delay=0.05)
        rts = [FunctionRuntime(b, cfg) for _ in range(3)]
        await _fill(b, _track("u", 40))
        results = await asyncio.gather(*(rt.maybe_invoke("u") for rt in rts for _ in range(5)))
        for rt in rts:
            await rt.wait_idle()
            await rt.pool.stop()
        lease = await b.kv_get("lease:u")
        return sum(results), lease

    started, lease = arun(main())
    assert started == 1 and lease is None


def test_watcher_reacts_to_fix_notices(arun):
    async def main():
        b, rt = _runtime()
        seen = []
        rt.verdict_sink = lambda user, vs: seen.extend(vs)
        await rt.start()
        from locwatch.ingest import FIXES_TOPIC
        for f in _track("u", 10):
            await b.enqueue(user_queue("u"), Envelope.new(f.to_json()))
            await b.publish(FIXES_TOPIC, Envelope.new(f.to_json()))
        for _ in range(100):
            if seen:
                break
            await asyncio.sleep(0.02)
        await rt.wait_idle()
        await rt.drain_all()
        left = await b.queue_len(user_queue("u"))
        await rt.stop()
        return [v.at for v in seen], left

    ats, left = arun(main())
    assert ats == [f.timestamp for f in _track("u", 10)]
    assert left == 0


def test_drain_all_empties_sub_threshold_queues(arun):
    async def main():
        b, rt = _runtime()
        await _fill(b, _track("a", 3) + _track("b", 1))
        rt.notify("a")
        rt.notify("b")
        await rt.drain_all()
        out = (await b.queue_len(user_queue("a")), await b.queue_len(user_queue("b")), rt.counters["verdicts"])
        await rt.pool.stop()
        return out

    assert arun(main()) == (0, 0, 4)
