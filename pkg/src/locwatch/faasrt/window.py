"""Moving average over a user's recent fixes and the anomaly predicate hook."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from ..core import GeoPoint, LocationFix, UserId, haversine_m


def moving_average(window: Sequence[GeoPoint]) -> GeoPoint:
    """Arithmetic mean of longitudes and latitudes over ``window``."""
    if not window:
        raise ValueError("moving_average needs at least one point")
    n = len(window)
    # fsum keeps the result independent of summation order
    return GeoPoint(math.fsum(p.longitude for p in window) / n,
                    math.fsum(p.latitude for p in window) / n)


class AnomalyPredicate(Protocol):
    def __call__(self, fix: LocationFix, smoothed: GeoPoint, threshold_m: float) -> bool: ...


def deviation_exceeds(fix: LocationFix, smoothed: GeoPoint, threshold_m: float) -> bool:
    """Default predicate: the fix lies more than ``threshold_m`` from the smoothed track."""
    return haversine_m(fix.point, smoothed) > threshold_m


@dataclass(frozen=True)
class AnomalyVerdict:
    user: UserId
    at: int
    smoothed: GeoPoint
    deviation_m: float
    anomalous: bool

    def to_dict(self) -> dict:
        return {
            "user_id": self.user,
            "at": self.at,
            "smoothed": self.smoothed.to_dict(),
            "deviation_m": self.deviation_m,
            "anomalous": self.anomalous,
        }

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "AnomalyVerdict":
        d = json.loads(raw)
        return cls(d["user_id"], int(d["at"]), GeoPoint.from_dict(d["smoothed"]),
                   float(d["deviation_m"]), bool(d["anomalous"]))


class SlidingWindow:
    """The last ``size`` points of one user's track."""

    def __init__(self, size: int, points: Iterable[GeoPoint] = ()):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.points: deque[GeoPoint] = deque(points, maxlen=size)

    def push(self, point: GeoPoint) -> GeoPoint:
        self.points.append(point)
        return moving_average(self.points)

    def dumps(self) -> bytes:
        return json.dumps([[p.longitude, p.latitude] for p in self.points]).encode()

    @classmethod
    def loads(cls, size: int, raw: bytes | None) -> "SlidingWindow":
        if not raw:
            return cls(size)
        return cls(size, (GeoPoint(lon, lat) for lon, lat in json.loads(raw)))


def verdict_for(window: SlidingWindow, fix: LocationFix, threshold_m: float,
                predicate: AnomalyPredicate = deviation_exceeds) -> AnomalyVerdict:
    """Push ``fix`` into ``window`` and judge it against the updated average."""
    smoothed = window.push(fix.point)
    deviation = haversine_m(fix.point, smoothed)
    return AnomalyVerdict(fix.user, fix.timestamp, smoothed, deviation,
                          bool(predicate(fix, smoothed, threshold_m)))
