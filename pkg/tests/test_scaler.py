import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locwatch.scaler import ReplicaSet, ScalingPolicy, UtilizationWindow, evaluate, needed_replicas


def window_of(values, size=10):
    w = UtilizationWindow(size)
    for i, v in enumerate(values):
        w.add(float(i), v)
    return w


def test_partial_window_holds():
    p = ScalingPolicy()
    assert evaluate(3, window_of([1.0] * 9), p) == 3
    assert evaluate(3, window_of([0.0] * 9), p) == 3


def test_thresholds_are_strict():
    p = ScalingPolicy()
    assert evaluate(3, window_of([0.9] * 10), p) == 4
    assert evaluate(3, window_of([0.8] * 10), p) == 3
    assert evaluate(3, window_of([0.1] * 10), p) == 2
    assert evaluate(3, window_of([0.3] * 10), p) == 3


def test_clamped_to_bounds():
    p = ScalingPolicy(min_replicas=2, max_replicas=4)
    assert evaluate(4, window_of([1.0] * 10), p) == 4
    assert evaluate(2, window_of([0.0] * 10), p) == 2
    assert evaluate(9, window_of([0.5] * 10), p) == 4


def test_samples_are_clipped():
    w = window_of([5.0, -1.0])
    assert [u for _, u in w.samples] == [1.0, 0.0]


def test_policy_validation():
    with pytest.raises(ValueError):
        ScalingPolicy(min_replicas=3, max_replicas=2)
    with pytest.raises(ValueError):
        ScalingPolicy(lo=0.9, hi=0.8)


def test_needed_replicas():
    p = ScalingPolicy()
    assert needed_replicas(0, p) == 1
    assert needed_replicas(800, p) == 1
    assert needed_replicas(801, p) == 2
    assert needed_replicas(1e9, p) == 8


bounds = st.integers(1, 6).flatmap(lambda lo: st.tuples(st.just(lo), st.integers(lo, 10)))


@settings(max_examples=300)
@given(bounds, st.lists(st.floats(-0.5, 1.5, allow_nan=False), max_size=80))
def test_evaluate_stays_within_bounds(b, trace):
    p = ScalingPolicy(min_replicas=b[0], max_replicas=b[1])
    w = UtilizationWindow(p.window_samples)
    n = p.min_replicas
    for i, u in enumerate(trace):
        w.add(float(i), u)
        new = evaluate(n, w, p)
        assert p.min_replicas <= new <= p.max_replicas
        assert abs(new - n) <= p.step
        if new != n:
            w.clear()
        n = new


async def _idle_serve(replica):
    await replica.stop.wait()


def _driven_set(policy):
    """A replica set stepped by hand against a fake clock."""
    now = [0.0]
    rs = ReplicaSet("svc", policy, serve=_idle_serve, clock=lambda: now[0])
    return rs, now


def test_sustained_high_load_adds_one_replica_per_window(arun):
    async def main():
        rs, now = _driven_set(ScalingPolicy(max_replicas=4))
        await rs.start(autoscale=False)
        changes = []
        for second in range(1, 61):
            now[0] = float(second)
            for idx in list(rs.replicas):
                rs.record_work(idx, 0.9)
            rs.sample()
            before = rs.current
            after = rs.evaluate_once()
            if after != before:
                changes.append((second, after))
        await rs.stop()
        return changes

    assert arun(main()) == [(10, 2), (20, 3), (30, 4)]


def test_idle_load_scales_in_to_min(arun):
    async def main():
        rs, now = _driven_set(ScalingPolicy(min_replicas=1, max_replicas=4))
        await rs.start(autoscale=False)
        rs.scale_to(3)
        for second in range(1, 31):
            now[0] = float(second)
            rs.sample()
            rs.evaluate_once()
        n = rs.current
        await rs.stop()
        return n

    assert arun(main()) == 1


def test_execute_mode_scales_out_under_load(arun):
    async def main():
        p = ScalingPolicy(max_replicas=3, window=0.5, sample_interval=0.1, start_delay=0.1)
        rs = ReplicaSet("svc", p)
        await rs.start()
        # 2x one replica's capacity
        t_end = asyncio.get_running_loop().time() + 2.5
        jobs = []
        while asyncio.get_running_loop().time() < t_end:
            jobs.append(asyncio.ensure_future(rs.execute(10.0)))
            await asyncio.sleep(0.005)
        peak = max(n for _, n in rs.history)
        for j in jobs:
            j.cancel()
        await asyncio.gather(*jobs, return_exceptions=True)
        await rs.stop()
        return peak

    assert arun(main()) >= 2


def test_cancelled_job_is_skipped(arun):
    async def main():
        rs = ReplicaSet("svc", ScalingPolicy())
        await rs.start(autoscale=False)
        blocker = asyncio.ensure_future(rs.execute(300.0))
        await asyncio.sleep(0.01)
        skipped = asyncio.ensure_future(rs.execute(300.0))
        await asyncio.sleep(0)
        skipped.cancel()
        await blocker
        await asyncio.sleep(0.05)
        processed = sum(r.processed for r in rs.replicas.values())
        await rs.stop()
        return processed

    assert arun(main()) == 1
