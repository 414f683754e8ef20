import asyncio
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locwatch.core import GeoPoint, LocationFix, RelativeLink, Role, UserProfile, haversine_m
from locwatch.guardian import (
    AlarmSource,
    Conflict,
    Forbidden,
    Guardian,
    GuardianConfig,
    GuardianError,
    MissionState,
    NotFound,
    UserDirectory,
    select_responders,
)

HOME = GeoPoint(10.40, 55.40)


def build_directory(volunteers, relatives=()):
    d = UserDirectory()
    d.register(UserProfile("d1", Role.DEMENTIA, HOME))
    for uid, point, available in volunteers:
        d.register(UserProfile(uid, Role.VOLUNTEER, point, available))
    for uid, prio, available in relatives:
        d.register(UserProfile(uid, Role.RELATIVE, HOME, available, (RelativeLink("d1", prio),)))
    return d


def oracle(volunteers, at, k, radius):
    ranked = sorted((haversine_m(p, at), uid) for uid, p, ok in volunteers
                    if ok and p is not None and haversine_m(p, at) <= radius)
    return [uid for _, uid in ranked[:k]]


vol_points = st.builds(GeoPoint, st.floats(10.30, 10.50), st.floats(55.35, 55.45))


@settings(max_examples=150)
@given(st.lists(st.tuples(vol_points, st.booleans()), max_size=25), st.integers(1, 7))
def test_selection_matches_oracle(specs, k):
    volunteers = [(f"v{i:02d}", p, ok) for i, (p, ok) in enumerate(specs)]
    d = build_directory(volunteers)
    chosen, relative = select_responders(d, "d1", HOME, k, 5000.0)
    assert chosen == oracle(volunteers, HOME, k, 5000.0)
    assert relative is None


def test_relative_priority_and_availability():
    d = build_directory([], [("r1", 1, False), ("r2", 2, True), ("r3", 3, True)])
    assert select_responders(d, "d1", HOME, 5)[1] == "r2"
    d.set_available("r1", True)
    assert select_responders(d, "d1", HOME, 5)[1] == "r1"


def test_registration_rules():
    d = build_directory([], [("r1", 1, True)])
    with pytest.raises(Conflict):
        d.register(UserProfile("r2", Role.RELATIVE, links=(RelativeLink("d1", 1),)))
    with pytest.raises(GuardianError):
        d.register(UserProfile("r3", Role.RELATIVE, links=(RelativeLink("nobody", 1),)))
    with pytest.raises(Conflict):
        d.register(UserProfile("d1", Role.DEMENTIA))
    with pytest.raises(NotFound):
        d.get("ghost")


class Outbox:
    def __init__(self):
        self.messages = []

    async def __call__(self, user, message):
        self.messages.append((user, message))
        return "delivered"

    def for_user(self, user):
        return [m for u, m in self.messages if u == user]


def setup_guardian(clock=None, n_vol=7):
    vols = [(f"v{i}", GeoPoint(10.40 + 0.001 * i, 55.40), True) for i in range(n_vol)]
    d = build_directory(vols, [("r1", 1, True), ("r2", 2, True)])
    out = Outbox()
    g = Guardian(d, out, GuardianConfig(), clock=clock or (lambda: 1000.0))
    return g, out


def test_alarm_notifies_nearest_and_relative(arun):
    g, out = setup_guardian()
    alarm = arun(g.trigger_alarm("d1", AlarmSource.MANUAL))
    assert alarm.notified == ["v0", "v1", "v2", "v3", "v4", "r1"]
    assert alarm.relative == "r1"
    assert g.missions[alarm.mission_id].state is MissionState.NOTIFYING
    assert sorted(u for u, _ in out.messages) == sorted(alarm.notified)
    # idempotent while open
    assert arun(g.trigger_alarm("d1", AlarmSource.MANUAL)) is alarm


def test_mission_lifecycle(arun):
    g, out = setup_guardian()

    async def main():
        alarm = await g.trigger_alarm("d1", AlarmSource.RELATIVE)
        with pytest.raises(Forbidden):
            await g.respond(alarm.id, "v6", True)
        m = await g.respond(alarm.id, "v1", False)
        assert m.state is MissionState.NOTIFYING and m.declined == ["v1"]
        m = await g.respond(alarm.id, "v0", True)
        assert m.state is MissionState.ACTIVE and m.participants == ["v0"]
        m = await g.respond(alarm.id, "r1", True)
        assert m.participants == ["v0", "r1"]
        for i in range(3):
            await g.on_fix(LocationFix("d1", 100 + i, 10.41, 55.41, 0, 1, 1, 0))
        with pytest.raises(Forbidden):
            await g.close_mission(m.id, "v1")
        closed = await g.close_mission(m.id, "r1", "home")
        assert closed.state is MissionState.CLOSED and closed.safe_place == "home"
        assert await g.close_mission(m.id, "v0") is closed
        with pytest.raises(Conflict):
            await g.respond(alarm.id, "v2", True)
        await g.on_fix(LocationFix("d1", 200, 10.41, 55.41, 0, 1, 1, 0))
        return m

    m = arun(main())
    for member in ("v0", "r1"):
        fixes = [msg["fix"]["timestamp"] for msg in out.for_user(member) if msg["type"] == "location"]
        assert fixes == [100, 101, 102]
    assert not [msg for msg in out.for_user("v1") if msg["type"] == "location"]


def test_automatic_alarms_are_debounced(arun):
    now = [1000.0]
    g, _ = setup_guardian(clock=lambda: now[0])

    async def main():
        a1 = await g.on_verdict("d1")
        m = await g.respond(a1.id, "v0", True)
        await g.close_mission(m.id, "v0")
        now[0] += 300
        assert await g.on_verdict("d1") is None
        now[0] += 301
        a2 = await g.on_verdict("d1")
        return a1, a2

    a1, a2 = arun(main())
    assert a1.source is AlarmSource.AUTOMATIC and a2 is not None and a2.id != a1.id


def test_alarm_needs_a_location(arun):
    d = UserDirectory()
    d.register(UserProfile("d1", Role.DEMENTIA))
    g = Guardian(d, Outbox())
    with pytest.raises(GuardianError):
        arun(g.trigger_alarm("d1", AlarmSource.MANUAL))
    assert arun(g.trigger_alarm("d1", AlarmSource.MANUAL, HOME)).location == HOME


ops = st.lists(st.tuples(st.sampled_from(["trigger", "accept", "decline", "close", "fix"]),
                         st.sampled_from(["v0", "v1", "v5", "r1", "r2", "d1"])), max_size=40)


@settings(max_examples=150, deadline=None)
@given(ops)
def test_state_machine_invariants(sequence):
    g, out = setup_guardian(n_vol=6)

    async def main():
        ts = 0
        for op, user in sequence:
            alarm = g.open_alarm("d1")
            try:
                if op == "trigger":
                    await g.trigger_alarm("d1", AlarmSource.MANUAL)
                elif op in ("accept", "decline") and alarm:
                    await g.respond(alarm.id, user, op == "accept")
                elif op == "close" and alarm:
                    await g.close_mission(alarm.mission_id, user)
                elif op == "fix":
                    ts += 1
                    await g.on_fix(LocationFix("d1", ts, 10.4, 55.4, 0, 1, 1, 0))
            except GuardianError:
                pass
            for a in g.alarms.values():
                m = g.missions[a.mission_id]
                assert set(m.participants) <= set(a.notified)
                assert not set(m.participants) & set(m.declined)
                assert (m.state is MissionState.NOTIFYING) == (not m.participants and a.open)
                assert (m.state is MissionState.CLOSED) == (not a.open)
            assert sum(a.open for a in g.alarms.values()) <= 1

    asyncio.run(main())
