import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locwatch.core import (
    EARTH_RADIUS_M,
    FixRejected,
    GeoPoint,
    LocationFix,
    RelativeLink,
    Role,
    UserProfile,
    haversine_m,
)

# Independent oracle: spherical law of cosines on the same sphere.
ODENSE = GeoPoint(10.3852, 55.3997)
COPENHAGEN = GeoPoint(12.5683, 55.6761)
ODENSE_COPENHAGEN_M = 140752.42199221582
HALF_CIRCUMFERENCE_M = 20015086.79602057


def cosines_oracle(a: GeoPoint, b: GeoPoint) -> float:
    p1, p2 = math.radians(a.latitude), math.radians(b.latitude)
    dl = math.radians(b.longitude - a.longitude)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return EARTH_RADIUS_M * math.acos(max(-1.0, min(1.0, c)))


lons = st.floats(-180, 180, allow_nan=False)
lats = st.floats(-90, 90, allow_nan=False)
points = st.builds(GeoPoint, lons, lats)


def test_haversine_frozen_city_pair():
    assert haversine_m(ODENSE, COPENHAGEN) == pytest.approx(ODENSE_COPENHAGEN_M, rel=1e-9)


def test_haversine_antipodes():
    assert haversine_m(GeoPoint(0, 0), GeoPoint(180, 0)) == pytest.approx(HALF_CIRCUMFERENCE_M, rel=1e-12)
    assert haversine_m(GeoPoint(0, 90), GeoPoint(0, -90)) == pytest.approx(HALF_CIRCUMFERENCE_M, rel=1e-12)


@given(points, points)
def test_haversine_matches_oracle(a, b):
    d = haversine_m(a, b)
    ref = cosines_oracle(a, b)
    # law of cosines loses precision at tiny separations; compare absolutely there
    assert d == pytest.approx(ref, rel=5e-3, abs=2.0)


@given(points, points)
def test_haversine_symmetric_and_bounded(a, b):
    d = haversine_m(a, b)
    assert d == pytest.approx(haversine_m(b, a), abs=1e-6)
    assert 0.0 <= d <= HALF_CIRCUMFERENCE_M + 1e-6


@given(points, points, points)
def test_haversine_triangle_inequality(a, b, c):
    assert haversine_m(a, c) <= haversine_m(a, b) + haversine_m(b, c) + 1e-6


@given(points)
def test_haversine_zero(a):
    assert haversine_m(a, a) == 0.0


def _fix(**over):
    base = {"user_id": "u1", "timestamp": 1_700_000_000_000, "longitude": 10.4, "latitude": 55.4,
            "altitude": 12.0, "accuracy": 5.0, "speed": 1.0, "acceleration": 0.1}
    base.update(over)
    return base


fixes = st.builds(
    LocationFix,
    user=st.text(min_size=1, max_size=20),
    timestamp=st.integers(1, 2**53),
    longitude=lons,
    latitude=lats,
    altitude=st.floats(-500, 9000, allow_nan=False),
    accuracy=st.floats(0, 1e4, allow_nan=False),
    speed=st.floats(0, 100, allow_nan=False),
    acceleration=st.floats(-50, 50, allow_nan=False),
)


@given(fixes)
def test_fix_json_round_trip(fix):
    assert LocationFix.from_json(fix.to_json()) == fix


def test_fix_wire_names():
    fix = LocationFix.from_dict(_fix())
    assert set(fix.to_dict()) == {"user_id", "timestamp", "longitude", "latitude", "altitude",
                                  "accuracy", "speed", "acceleration"}
    assert fix.point == GeoPoint(10.4, 55.4)


def test_optional_fields_default_to_zero():
    data = _fix()
    for k in ("altitude", "accuracy", "speed", "acceleration"):
        del data[k]
    fix = LocationFix.from_dict(data)
    assert (fix.altitude, fix.accuracy, fix.speed, fix.acceleration) == (0, 0, 0, 0)


@pytest.mark.parametrize("field,value", [
    ("user_id", ""),
    ("user_id", 7),
    ("timestamp", 0),
    ("timestamp", -5),
    ("timestamp", 1.5),
    ("timestamp", "now"),
    ("longitude", 180.5),
    ("longitude", -181),
    ("latitude", 90.01),
    ("latitude", float("nan")),
    ("accuracy", -1),
    ("speed", -0.1),
    ("altitude", "high"),
    ("acceleration", True),
])
def test_fix_rejections_name_the_field(field, value):
    with pytest.raises(FixRejected) as err:
        LocationFix.from_dict(_fix(**{field: value}))
    assert err.value.field == field


def test_first_offending_field_wins():
    with pytest.raises(FixRejected) as err:
        LocationFix.from_dict(_fix(longitude=999, latitude=999, speed=-1))
    assert err.value.field == "longitude"


def test_missing_required_and_bad_body():
    data = _fix()
    del data["latitude"]
    with pytest.raises(FixRejected) as err:
        LocationFix.from_dict(data)
    assert err.value.field == "latitude"
    with pytest.raises(FixRejected):
        LocationFix.from_json(b"{not json")
    with pytest.raises(FixRejected):
        LocationFix.from_dict([1, 2])  # type: ignore[arg-type]


def test_profile_rules():
    v = UserProfile("v1", Role.VOLUNTEER)
    assert v.available is True
    r = UserProfile("r1", "relative", links=(RelativeLink("d1", 1),))
    assert r.available is True and r.role is Role.RELATIVE
    with pytest.raises(ValueError):
        UserProfile("d1", Role.DEMENTIA, available=True)
    with pytest.raises(ValueError):
        UserProfile("v2", Role.VOLUNTEER, links=(RelativeLink("d1", 1),))
    with pytest.raises(ValueError):
        UserProfile("r2", Role.RELATIVE, links=(RelativeLink("d1", 0),))


def test_profile_round_trip():
    p = UserProfile("r1", Role.RELATIVE, GeoPoint(1, 2), False, (RelativeLink("d1", 2),))
    assert UserProfile.from_dict(json.loads(json.dumps(p.to_dict()))) == p
