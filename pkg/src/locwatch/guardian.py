"""Alarms, responder selection and missions for users who get lost.

An alarm is raised manually by the person with dementia, by a linked
relative, or automatically from an anomalous verdict. It notifies the
nearest available volunteers and the highest-priority available relative;
the first acceptance turns the alarm's mission Active, after which the
subject's fixes are broadcast to every participant until one of them closes
the mission.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional

from .core import GeoPoint, LocationFix, Role, UserId, UserProfile, haversine_m

log = logging.getLogger(__name__)


class AlarmSource(str, enum.Enum):
    MANUAL = "manual"
    RELATIVE = "relative"
    AUTOMATIC = "automatic"


class MissionState(str, enum.Enum):
    NOTIFYING = "notifying"
    ACTIVE = "active"
    CLOSED = "closed"


class GuardianError(Exception):
    status = 400


class NotFound(GuardianError):
    status = 404


class Forbidden(GuardianError):
    status = 403


class Conflict(GuardianError):
    status = 409


@dataclass
class AlarmEvent:
    id: str
    subject: UserId
    source: AlarmSource
    raised_at: float
    location: Optional[GeoPoint]
    mission_id: str
    notified: list[UserId] = field(default_factory=list)
    relative: Optional[UserId] = None
    open: bool = True

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "subject": self.subject,
            "source": self.source.value,
            "raised_at": self.raised_at,
            "location": self.location.to_dict() if self.location else None,
            "mission_id": self.mission_id,
            "notified": list(self.notified),
            "relative": self.relative,
            "open": self.open,
        }


@dataclass
class Mission:
    id: str
    alarm: str
    subject: UserId
    opened_at: float
    state: MissionState = MissionState.NOTIFYING
    participants: list[UserId] = field(default_factory=list)
    declined: list[UserId] = field(default_factory=list)
    closed_at: Optional[float] = None
    closed_by: Optional[UserId] = None
    safe_place: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "alarm": self.alarm,
            "subject": self.subject,
            "state": self.state.value,
            "participants": list(self.participants),
            "declined": list(self.declined),
            "opened_at": self.opened_at,
            "closed_at": self.closed_at,
            "closed_by": self.closed_by,
            "safe_place": self.safe_place,
        }


class UserDirectory:
    """Registered users, their roles, links and last known positions."""

    def __init__(self):
        self.profiles: dict[UserId, UserProfile] = {}

    def register(self, profile: UserProfile) -> UserProfile:
        if profile.user in self.profiles:
            raise Conflict(f"user {profile.user} already registered")
        for link in profile.links:
            subject = self.profiles.get(link.dementia)
            if subject is None or subject.role is not Role.DEMENTIA:
                raise GuardianError(f"{link.dementia} is not a registered person with dementia")
            taken = {l.priority for rel in self.relatives_of(link.dementia) for l in rel.links
                     if l.dementia == link.dementia}
            if link.priority in taken:
                raise Conflict(f"priority {link.priority} already used for {link.dementia}")
        self.profiles[profile.user] = profile
        return profile

    def get(self, user: UserId) -> UserProfile:
        try:
            return self.profiles[user]
        except KeyError:
            raise NotFound(f"unknown user {user}") from None

    def update_location(self, user: UserId, point: GeoPoint) -> None:
        profile = self.profiles.get(user)
        if profile is not None:
            profile.last_known = point

    def set_available(self, user: UserId, available: bool) -> None:
        profile = self.get(user)
        if profile.role is Role.DEMENTIA:
            raise GuardianError("availability applies to volunteers and relatives")
        profile.available = available

    def volunteers(self) -> list[UserProfile]:
        return [p for p in self.profiles.values() if p.role is Role.VOLUNTEER]

    def relatives_of(self, subject: UserId) -> list[UserProfile]:
        return [p for p in self.profiles.values()
                if p.role is Role.RELATIVE and any(l.dementia == subject for l in p.links)]

    def is_linked(self, relative: UserId, subject: UserId) -> bool:
        p = self.profiles.get(relative)
        return p is not None and p.role is Role.RELATIVE and any(l.dementia == subject for l in p.links)


def select_responders(directory: UserDirectory, subject: UserId, at: GeoPoint, k: int,
                      max_radius_m: Optional[float] = None) -> tuple[list[UserId], Optional[UserId]]:
    """The ``k`` nearest available volunteers and the first-priority available relative.

    Volunteers without a known position are skipped. Ties in distance break
    on user id.
    """
    ranked = []
    for v in directory.volunteers():
        if not v.available or v.last_known is None or v.user == subject:
            continue
        d = haversine_m(v.last_known, at)
        if max_radius_m is not None and d > max_radius_m:
            continue
        ranked.append((d, v.user))
    ranked.sort()
    volunteers = [u for _, u in ranked[:k]]

    best: Optional[tuple[int, UserId]] = None
    for rel in directory.relatives_of(subject):
        if not rel.available:
            continue
        prio = min(l.priority for l in rel.links if l.dementia == subject)
        if best is None or (prio, rel.user) < best:
            best = (prio, rel.user)
    return volunteers, best[1] if best else None


Notifier = Callable[[UserId, dict], Awaitable[str]]


@dataclass
class GuardianConfig:
    k_volunteers: int = 5
    max_radius_m: Optional[float] = 5000.0
    automatic_debounce: float = 600.0


class Guardian:
    """Alarm and mission state machine; transitions serialised per subject."""

    def __init__(self, directory: UserDirectory, notifier: Notifier,
                 config: Optional[GuardianConfig] = None, clock: Callable[[], float] = time.time):
        self.directory = directory
        self.notifier = notifier
        self.config = config or GuardianConfig()
        self.clock = clock
        self.alarms: dict[str, AlarmEvent] = {}
        self.missions: dict[str, Mission] = {}
        self._open_by_subject: dict[UserId, str] = {}
        self._last_automatic: dict[UserId, float] = {}
        self._locks: dict[UserId, asyncio.Lock] = {}
        self.sent: list[tuple[UserId, dict]] = []

    def _lock(self, subject: UserId) -> asyncio.Lock:
        lock = self._locks.get(subject)
        if lock is None:
            lock = self._locks[subject] = asyncio.Lock()
        return lock

    async def _notify(self, user: UserId, message: dict) -> str:
        self.sent.append((user, message))
        return await self.notifier(user, message)

    def open_alarm(self, subject: UserId) -> Optional[AlarmEvent]:
        alarm_id = self._open_by_subject.get(subject)
        return self.alarms[alarm_id] if alarm_id else None

    async def trigger_alarm(self, subject: UserId, source: AlarmSource,
                            location: Optional[GeoPoint] = None) -> AlarmEvent:
        """Raise an alarm for ``subject`` or return the one already open."""
        profile = self.directory.get(subject)
        if profile.role is not Role.DEMENTIA:
            raise GuardianError(f"{subject} is not a person with dementia")
        source = AlarmSource(source)
        async with self._lock(subject):
            existing = self.open_alarm(subject)
            if existing is not None:
                return existing
            at = location or profile.last_known
            if at is None:
                raise GuardianError(f"no known location for {subject}")
            alarm_id = uuid.uuid4().hex
            now = self.clock()
            mission = Mission(id=f"m-{alarm_id}", alarm=alarm_id, subject=subject, opened_at=now)
            alarm = AlarmEvent(alarm_id, subject, source, now, at, mission.id)
            volunteers, relative = select_responders(
                self.directory, subject, at, self.config.k_volunteers, self.config.max_radius_m)
            alarm.notified = volunteers + ([relative] if relative else [])
            alarm.relative = relative
            self.alarms[alarm_id] = alarm
            self.missions[mission.id] = mission
            self._open_by_subject[subject] = alarm_id
            if source is AlarmSource.AUTOMATIC:
                self._last_automatic[subject] = now
            message = {"type": "alarm", "alarm": alarm.to_dict()}
            for user in alarm.notified:
                await self._notify(user, message)
            log.info("alarm %s for %s (%s): notified %d", alarm_id, subject, source.value,
                     len(alarm.notified))
            return alarm

    async def on_verdict(self, subject: UserId, location: Optional[GeoPoint] = None) -> Optional[AlarmEvent]:
        """Automatic trigger, debounced to one alarm per subject per window."""
        last = self._last_automatic.get(subject)
        if last is not None and self.clock() - last < self.config.automatic_debounce:
            return self.open_alarm(subject)
        profile = self.directory.profiles.get(subject)
        if profile is None or profile.role is not Role.DEMENTIA:
            return None
        return await self.trigger_alarm(subject, AlarmSource.AUTOMATIC, profile.last_known or location)

    def mission_for_alarm(self, alarm_id: str) -> Mission:
        alarm = self.alarms.get(alarm_id)
        if alarm is None:
            raise NotFound(f"unknown alarm {alarm_id}")
        return self.missions[alarm.mission_id]

    async def respond(self, alarm_id: str, user: UserId, accept: bool) -> Mission:
        alarm = self.alarms.get(alarm_id)
        if alarm is None:
            raise NotFound(f"unknown alarm {alarm_id}")
        async with self._lock(alarm.subject):
            mission = self.missions[alarm.mission_id]
            if mission.state is MissionState.CLOSED:
                raise Conflict("mission is closed")
            if user not in alarm.notified:
                raise Forbidden(f"{user} was not notified for this alarm")
            if not accept:
                if user not in mission.declined and user not in mission.participants:
                    mission.declined.append(user)
                return mission
            if user in mission.participants:
                return mission
            if user in mission.declined:
                mission.declined.remove(user)
            mission.participants.append(user)
            if mission.state is MissionState.NOTIFYING:
                mission.state = MissionState.ACTIVE
            update = {"type": "mission", "mission": mission.to_dict()}
            for member in mission.participants:
                await self._notify(member, update)
            return mission

    async def broadcast_location(self, mission_id: str, fix: LocationFix) -> int:
        mission = self.missions.get(mission_id)
        if mission is None:
            raise NotFound(f"unknown mission {mission_id}")
        if mission.state is not MissionState.ACTIVE:
            raise Conflict(f"mission {mission_id} is {mission.state.value}")
        if fix.user != mission.subject:
            raise GuardianError("only the subject's fixes are broadcast")
        message = {"type": "location", "mission_id": mission_id, "fix": fix.to_dict()}
        count = 0
        for member in list(mission.participants):
            if member == mission.subject:
                continue
            if await self._notify(member, message) != "undeliverable":
                count += 1
        return count

    async def close_mission(self, mission_id: str, by: UserId, safe_place: Optional[str] = None) -> Mission:
        mission = self.missions.get(mission_id)
        if mission is None:
            raise NotFound(f"unknown mission {mission_id}")
        async with self._lock(mission.subject):
            if mission.state is MissionState.CLOSED:
                return mission
            if by not in mission.participants:
                raise Forbidden(f"{by} is not a participant")
            mission.state = MissionState.CLOSED
            mission.closed_at = self.clock()
            mission.closed_by = by
            mission.safe_place = safe_place
            alarm = self.alarms[mission.alarm]
            alarm.open = False
            self._open_by_subject.pop(mission.subject, None)
            update = {"type": "mission", "mission": mission.to_dict()}
            for member in mission.participants:
                await self._notify(member, update)
            return mission

    async def on_fix(self, fix: LocationFix) -> int:
        """Track positions; relay the subject's fixes during an active mission."""
        self.directory.update_location(fix.user, fix.point)
        alarm = self.open_alarm(fix.user)
        if alarm is None:
            return 0
        mission = self.missions[alarm.mission_id]
        if mission.state is not MissionState.ACTIVE:
            return 0
        return await self.broadcast_location(mission.id, fix)
