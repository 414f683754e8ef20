"""Domain types shared by every service, fix validation and geodesic distance."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

# Mean Earth radius in meters
EARTH_RADIUS_M = 6_371_000.0

UserId = str

FIX_FIELDS = (
    "user_id",
    "timestamp",
    "longitude",
    "latitude",
    "altitude",
    "accuracy",
    "speed",
    "acceleration",
)


class Role(str, enum.Enum):
    DEMENTIA = "dementia"
    RELATIVE = "relative"
    VOLUNTEER = "volunteer"


class FixRejected(ValueError):
    """Raised when a candidate location fix violates a field bound."""

    def __init__(self, field_name: str, reason: str = ""):
        self.field = field_name
        super().__init__(f"{field_name}: {reason}" if reason else field_name)


@dataclass(frozen=True)
class GeoPoint:
    longitude: float
    latitude: float

    def to_dict(self) -> dict:
        return {"longitude": self.longitude, "latitude": self.latitude}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeoPoint":
        point = cls(float(data["longitude"]), float(data["latitude"]))
        _check_coordinates(point.longitude, point.latitude)
        return point


@dataclass(frozen=True)
class LocationFix:
    """One timestamped location sample as posted by a phone.

    Units: timestamp in epoch milliseconds (UTC), altitude and accuracy in
    meters, speed in m/s, acceleration in m/s^2.
    """

    user: UserId
    timestamp: int
    longitude: float
    latitude: float
    altitude: float = 0.0
    accuracy: float = 0.0
    speed: float = 0.0
    acceleration: float = 0.0

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.longitude, self.latitude)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user,
            "timestamp": self.timestamp,
            "longitude": self.longitude,
            "latitude": self.latitude,
            "altitude": self.altitude,
            "accuracy": self.accuracy,
            "speed": self.speed,
            "acceleration": self.acceleration,
        }

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LocationFix":
        """Parse wire-format JSON fields and validate the result."""
        if not isinstance(data, Mapping):
            raise FixRejected("body", "expected a JSON object")
        values = {}
        for name in FIX_FIELDS:
            if name not in data:
                if name in ("altitude", "accuracy", "speed", "acceleration"):
                    values[name] = 0.0
                    continue
                raise FixRejected(name, "missing")
            values[name] = data[name]
        user = values["user_id"]
        if not isinstance(user, str) or not user:
            raise FixRejected("user_id", "must be a non-empty string")
        try:
            ts = values["timestamp"]
            if isinstance(ts, bool) or not isinstance(ts, (int, float)) or ts != int(ts):
                raise TypeError
            nums = {k: _as_float(values[k], k) for k in FIX_FIELDS[2:]}
        except TypeError:
            raise FixRejected("timestamp", "must be an integer") from None
        return validate_fix(cls(user=user, timestamp=int(ts), **nums))

    @classmethod
    def from_json(cls, raw: bytes | str) -> "LocationFix":
        try:
            data = json.loads(raw)
        except (ValueError, UnicodeDecodeError):
            raise FixRejected("body", "not JSON") from None
        return cls.from_dict(data)


def _as_float(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FixRejected(name, "must be a number")
    out = float(value)
    if not math.isfinite(out):
        raise FixRejected(name, "must be finite")
    return out


def _check_coordinates(longitude: float, latitude: float) -> None:
    if not -180.0 <= longitude <= 180.0:
        raise FixRejected("longitude", "outside [-180, 180]")
    if not -90.0 <= latitude <= 90.0:
        raise FixRejected("latitude", "outside [-90, 90]")


def validate_fix(fix: LocationFix) -> LocationFix:
    """Return ``fix`` unchanged if every field bound holds.

    Raises:
        FixRejected: naming the first violated field, checked in the order
            of the wire fields (timestamp, longitude, latitude, accuracy, speed).
    """
    if not fix.user:
        raise FixRejected("user_id", "must be non-empty")
    if fix.timestamp <= 0:
        raise FixRejected("timestamp", "must be positive")
    _check_coordinates(fix.longitude, fix.latitude)
    if not fix.accuracy >= 0:
        raise FixRejected("accuracy", "must be >= 0")
    if not fix.speed >= 0:
        raise FixRejected("speed", "must be >= 0")
    return fix


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6 371 km."""
    lat1 = math.radians(a.latitude)
    lat2 = math.radians(b.latitude)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude - a.longitude)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    # clamp guards against h drifting past 1 for antipodal points
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


@dataclass(frozen=True)
class RelativeLink:
    dementia: UserId
    priority: int  # 1 is contacted first


@dataclass
class UserProfile:
    user: UserId
    role: Role
    last_known: Optional[GeoPoint] = None
    available: Optional[bool] = None
    links: tuple[RelativeLink, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.user:
            raise ValueError("user id must be non-empty")
        self.role = Role(self.role)
        if self.role in (Role.VOLUNTEER, Role.RELATIVE):
            # relatives are handled as volunteers, so they carry availability too
            if self.available is None:
                self.available = True
        elif self.available is not None:
            raise ValueError("availability is only defined for volunteers and relatives")
        if self.links and self.role is not Role.RELATIVE:
            raise ValueError("only relatives carry links")
        for link in self.links:
            if link.priority < 1:
                raise ValueError("priority must be a positive integer")

    def to_dict(self) -> dict:
        return {
            "user_id": self.user,
            "role": self.role.value,
            "last_known": self.last_known.to_dict() if self.last_known else None,
            "available": self.available,
            "links": [{"dementia": l.dementia, "priority": l.priority} for l in self.links],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UserProfile":
        links = tuple(
            RelativeLink(str(l["dementia"]), int(l["priority"])) for l in data.get("links") or ()
        )
        last = data.get("last_known")
        return cls(
            user=str(data["user_id"]),
            role=Role(data["role"]),
            last_known=GeoPoint.from_dict(last) if last else None,
            available=data.get("available"),
            links=links,
        )
