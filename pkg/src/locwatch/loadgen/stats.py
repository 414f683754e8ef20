"""Per-second request accounting and percentiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q*n)``-th smallest value (1-based).

    Returns NaN for an empty sample.
    """
    if not 0 <= q <= 1:
        raise ValueError("q must be in [0, 1]")
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


@dataclass
class MetricSample:
    t: int
    active_users: int
    attempted: int
    ok: int
    failed: int
    client_errors: int
    latency_p50_ms: float
    latency_p95_ms: float
    util: dict[str, float] = field(default_factory=dict)

    def row(self, util_columns: Sequence[str]) -> list:
        return [self.t, self.active_users, self.attempted, self.ok, self.failed,
                _fmt(self.latency_p50_ms), _fmt(self.latency_p95_ms),
                *(_fmt(self.util.get(c, 0.0)) for c in util_columns)]


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.3f}"


@dataclass
class _Bucket:
    attempted: int = 0
    ok: int = 0
    failed: int = 0
    client_errors: int = 0
    latencies: list = field(default_factory=list)


class SecondBuckets:
    """Requests grouped by the second in which they started."""

    def __init__(self):
        self._buckets: dict[int, _Bucket] = {}
        self.active: dict[int, int] = {}
        self.util: dict[int, dict[str, float]] = {}

    def _bucket(self, second: int) -> _Bucket:
        b = self._buckets.get(second)
        if b is None:
            b = self._buckets[second] = _Bucket()
        return b

    def started(self, t: float) -> None:
        self._bucket(int(t)).attempted += 1

    def finished(self, t: float, latency_s: float, ok: bool, client_error: bool = False) -> None:
        b = self._bucket(int(t))
        b.latencies.append(latency_s * 1000.0)
        if ok:
            b.ok += 1
        else:
            b.failed += 1
        if client_error:
            b.client_errors += 1

    def sample(self, second: int) -> MetricSample:
        b = self._buckets.get(second) or _Bucket()
        return MetricSample(
            t=second,
            active_users=self.active.get(second, 0),
            attempted=b.attempted,
            ok=b.ok,
            failed=b.failed,
            client_errors=b.client_errors,
            latency_p50_ms=percentile(b.latencies, 0.50),
            latency_p95_ms=percentile(b.latencies, 0.95),
            util=dict(self.util.get(second, {})),
        )

    def samples(self, until: Optional[int] = None) -> list[MetricSample]:
        seconds = set(self._buckets) | set(self.active)
        if not seconds:
            return []
        last = max(seconds) if until is None else until
        return [self.sample(s) for s in range(0, last + 1)]
