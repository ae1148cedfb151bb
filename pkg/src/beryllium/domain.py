"""Core value types shared by every service.

All types are frozen dataclasses with canonical JSON-ready ``to_dict`` /
``from_dict`` codecs. Field names on the wire are exactly the attribute
names; absent optional fields are omitted rather than sent as null.
Timestamps are integer milliseconds since the epoch (UTC).
"""

from __future__ import annotations

import base64
import binascii
import secrets
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any
from urllib.parse import urlsplit

from beryllium.errors import AlreadyComplete, MalformedMessage, ServiceError


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def new_id(nbytes: int = 16) -> str:
    return secrets.token_hex(nbytes)


def is_valid_url(url: Any) -> bool:
    if not isinstance(url, str):
        return False
    parts = urlsplit(url)
    return parts.scheme in ("http", "https") and bool(parts.hostname)


# -- field helpers -----------------------------------------------------------


def _field(d: dict, key: str, kind, *, optional: bool = False, default=None):
    if not isinstance(d, dict):
        raise MalformedMessage("expected a JSON object")
    if key not in d:
        if optional:
            return default
        raise MalformedMessage(f"missing required field {key!r}")
    value = d[key]
    # bool is an int subclass; never accept it for numeric fields
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise MalformedMessage(f"field {key!r} must be an integer")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedMessage(f"field {key!r} must be a number")
        return value
    if kind is not int and not isinstance(value, kind):
        raise MalformedMessage(f"field {key!r} must be {kind.__name__}")
    return value


def parse_tags(values, what: str = "tags") -> frozenset[str]:
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise MalformedMessage(f"{what} must be a list of strings")
    if len(set(values)) != len(values):
        raise MalformedMessage(f"{what} contains duplicates")
    return frozenset(values)


# -- tickets -----------------------------------------------------------------


@dataclass(frozen=True)
class JobTicket:
    """Reservation capability. Incomplete until a CE inserts its URL."""

    ticket_id: str
    job_id: str
    slots: int
    issued_at: int
    reservation_ttl: float
    ce_url: str | None = None

    def __post_init__(self):
        if self.slots < 1:
            raise ServiceError("invalid-argument", "slots must be >= 1")
        if not self.reservation_ttl > 0:
            raise ServiceError("invalid-argument", "reservation_ttl must be > 0")

    @property
    def is_complete(self) -> bool:
        return self.ce_url is not None

    def to_dict(self) -> dict:
        d = {
            "ticket_id": self.ticket_id,
            "job_id": self.job_id,
            "slots": self.slots,
            "issued_at": self.issued_at,
            "reservation_ttl": self.reservation_ttl,
        }
        if self.ce_url is not None:
            d["ce_url"] = self.ce_url
        return d

    @classmethod
    def from_dict(cls, d: dict) -> JobTicket:
        ce_url = _field(d, "ce_url", str, optional=True)
        if ce_url is not None and not is_valid_url(ce_url):
            raise MalformedMessage("ce_url is not a valid URL")
        return cls(
            ticket_id=_field(d, "ticket_id", str),
            job_id=_field(d, "job_id", str),
            slots=_field(d, "slots", int),
            issued_at=_field(d, "issued_at", int),
            reservation_ttl=_field(d, "reservation_ttl", float),
            ce_url=ce_url,
        )


@dataclass(frozen=True)
class TicketDbEntry:
    """One reservation as recorded in a CE's ticket database.

    ``issued_at`` is the broker's issue time carried by the ticket;
    ``reserved_at`` and ``expires_at`` are on the CE's own clock.
    """

    ticket_id: str
    job_id: str
    slots: int
    issued_at: int
    reserved_at: int
    expires_at: int
    consumed_at: int | None = None
    expired_at: int | None = None

    @property
    def consumed(self) -> bool:
        return self.consumed_at is not None

    @property
    def expired(self) -> bool:
        return self.expired_at is not None

    def to_dict(self) -> dict:
        d = {
            "ticket_id": self.ticket_id,
            "job_id": self.job_id,
            "slots": self.slots,
            "issued_at": self.issued_at,
            "reserved_at": self.reserved_at,
            "expires_at": self.expires_at,
        }
        if self.consumed_at is not None:
            d["consumed_at"] = self.consumed_at
        if self.expired_at is not None:
            d["expired_at"] = self.expired_at
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TicketDbEntry:
        return cls(
            ticket_id=_field(d, "ticket_id", str),
            job_id=_field(d, "job_id", str),
            slots=_field(d, "slots", int),
            issued_at=_field(d, "issued_at", int),
            reserved_at=_field(d, "reserved_at", int),
            expires_at=_field(d, "expires_at", int),
            consumed_at=_field(d, "consumed_at", int, optional=True),
            expired_at=_field(d, "expired_at", int, optional=True),
        )


def ticket_new_incomplete(job_id: str, slots: int, ttl: float) -> JobTicket:
    if isinstance(slots, bool) or not isinstance(slots, int) or slots < 1:
        raise ServiceError("invalid-argument", "slots must be a positive integer")
    if not ttl > 0:
        raise ServiceError("invalid-argument", "ttl must be > 0")
    return JobTicket(
        ticket_id=new_id(16),
        job_id=job_id,
        slots=slots,
        issued_at=now_ms(),
        reservation_ttl=ttl,
    )


def ticket_complete(t: JobTicket, ce_url: str) -> JobTicket:
    if t.is_complete:
        raise AlreadyComplete(t.ticket_id)
    if not is_valid_url(ce_url):
        raise ServiceError("invalid-argument", f"not a service URL: {ce_url!r}")
    return replace(t, ce_url=ce_url)


def ticket_matches(presented: JobTicket, stored: TicketDbEntry) -> bool:
    return (
        presented.ticket_id == stored.ticket_id
        and presented.job_id == stored.job_id
        and not stored.consumed
    )


# -- requests and payloads -----------------------------------------------------


@dataclass(frozen=True)
class JobRequest:
    """What the user asks the broker for. Carries no executable content."""

    slots: int = 1
    min_free_slots: int = 0
    required_tags: frozenset[str] = frozenset()
    job_id: str | None = None

    def __post_init__(self):
        if self.slots < 1:
            raise ServiceError("invalid-argument", "slots must be >= 1")
        if self.min_free_slots < 0:
            raise ServiceError("invalid-argument", "min_free_slots must be >= 0")
        object.__setattr__(self, "required_tags", frozenset(self.required_tags))

    def to_dict(self) -> dict:
        d = {
            "slots": self.slots,
            "min_free_slots": self.min_free_slots,
            "required_tags": sorted(self.required_tags),
        }
        if self.job_id is not None:
            d["job_id"] = self.job_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> JobRequest:
        return cls(
            slots=_field(d, "slots", int),
            min_free_slots=_field(d, "min_free_slots", int, optional=True, default=0),
            required_tags=parse_tags(
                _field(d, "required_tags", list, optional=True, default=[]),
                "required_tags",
            ),
            job_id=_field(d, "job_id", str, optional=True),
        )


@dataclass(frozen=True)
class JobPayload:
    """What actually runs. Travels only between the user and a CE."""

    job_id: str
    command: tuple[str, ...]
    ticket: JobTicket
    input_files: tuple[tuple[str, bytes], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        object.__setattr__(
            self, "input_files", tuple((n, bytes(b)) for n, b in self.input_files)
        )
        if not self.command:
            raise ServiceError("invalid-argument", "command must not be empty")
        if self.ticket.job_id != self.job_id:
            raise ServiceError("invalid-argument", "ticket job_id does not match payload")

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "command": list(self.command),
            "input_files": [
                {"name": n, "data": base64.b64encode(b).decode("ascii")}
                for n, b in self.input_files
            ],
            "ticket": self.ticket.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> JobPayload:
        command = _field(d, "command", list)
        if not all(isinstance(a, str) for a in command):
            raise MalformedMessage("command must be a list of strings")
        files = []
        for item in _field(d, "input_files", list, optional=True, default=[]):
            name = _field(item, "name", str)
            try:
                data = base64.b64decode(_field(item, "data", str), validate=True)
            except binascii.Error as exc:
                raise MalformedMessage(f"input file {name!r}: bad base64") from exc
            files.append((name, data))
        return cls(
            job_id=_field(d, "job_id", str),
            command=tuple(command),
            ticket=JobTicket.from_dict(_field(d, "ticket", dict)),
            input_files=tuple(files),
        )


# -- resources ---------------------------------------------------------------


@dataclass(frozen=True)
class ResourceDescriptor:
    ce_id: str
    ce_url: str
    total_slots: int
    free_slots: int
    tags: frozenset[str] = frozenset()
    last_seen: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        if self.total_slots < 1:
            raise ServiceError("invalid-argument", "total_slots must be >= 1")
        if not 0 <= self.free_slots <= self.total_slots:
            raise ServiceError("invalid-argument", "free_slots must be in [0, total_slots]")
        if not self.ce_id:
            raise ServiceError("invalid-argument", "ce_id must not be empty")
        if not is_valid_url(self.ce_url):
            raise ServiceError("invalid-argument", f"not a service URL: {self.ce_url!r}")

    def to_dict(self) -> dict:
        return {
            "ce_id": self.ce_id,
            "ce_url": self.ce_url,
            "total_slots": self.total_slots,
            "free_slots": self.free_slots,
            "tags": sorted(self.tags),
            "last_seen": self.last_seen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ResourceDescriptor:
        return cls(
            ce_id=_field(d, "ce_id", str),
            ce_url=_field(d, "ce_url", str),
            total_slots=_field(d, "total_slots", int),
            free_slots=_field(d, "free_slots", int),
            tags=parse_tags(_field(d, "tags", list, optional=True, default=[])),
            last_seen=_field(d, "last_seen", int, optional=True, default=0),
        )


# -- job state machine -------------------------------------------------------


class JobState(str, Enum):
    RESERVED = "RESERVED"
    SUBMITTED = "SUBMITTED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    ABORTED = "ABORTED"
    EXPIRED = "EXPIRED"

    def __str__(self) -> str:
        return self.value


_TRANSITIONS = {
    JobState.RESERVED: frozenset({JobState.SUBMITTED, JobState.EXPIRED}),
    JobState.SUBMITTED: frozenset({JobState.RUNNING, JobState.ABORTED}),
    JobState.RUNNING: frozenset({JobState.DONE, JobState.FAILED}),
    JobState.DONE: frozenset(),
    JobState.FAILED: frozenset(),
    JobState.ABORTED: frozenset(),
    JobState.EXPIRED: frozenset(),
}

TERMINAL_STATES = frozenset(s for s, nxt in _TRANSITIONS.items() if not nxt)


def next_states(s: JobState) -> frozenset[JobState]:
    return _TRANSITIONS[JobState(s)]


def is_legal_transition(src: JobState, dst: JobState) -> bool:
    return JobState(dst) in _TRANSITIONS[JobState(src)]


def _state(value) -> JobState:
    try:
        return JobState(value)
    except ValueError:
        raise MalformedMessage(f"unknown job state {value!r}") from None


@dataclass(frozen=True)
class JobStatusEvent:
    """A state transition record. ``seq`` is None until L&B assigns it."""

    job_id: str
    state: JobState
    source: str
    at: int
    detail: str = ""
    seq: int | None = None
    anomalous: bool = False

    def __post_init__(self):
        object.__setattr__(self, "state", JobState(self.state))

    def to_dict(self) -> dict:
        d = {
            "job_id": self.job_id,
            "state": self.state.value,
            "source": self.source,
            "at": self.at,
            "detail": self.detail,
            "anomalous": self.anomalous,
        }
        if self.seq is not None:
            d["seq"] = self.seq
        return d

    @classmethod
    def from_dict(cls, d: dict) -> JobStatusEvent:
        return cls(
            job_id=_field(d, "job_id", str),
            state=_state(_field(d, "state", str)),
            source=_field(d, "source", str),
            at=_field(d, "at", int),
            detail=_field(d, "detail", str, optional=True, default=""),
            seq=_field(d, "seq", int, optional=True),
            anomalous=_field(d, "anomalous", bool, optional=True, default=False),
        )


# -- service data and subscriptions -----------------------------------------------


@dataclass(frozen=True)
class ServiceDataValue:
    name: str
    value: int | str
    updated_at: int

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "updated_at": self.updated_at}

    @classmethod
    def from_dict(cls, d: dict) -> ServiceDataValue:
        value = _field(d, "value", object)
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise MalformedMessage("SDE value must be an integer or string")
        return cls(
            name=_field(d, "name", str),
            value=value,
            updated_at=_field(d, "updated_at", int),
        )


def parse_topic(topic: Any) -> str | None:
    """Return the job id a topic selects, or None for ``all``."""
    if topic == "all":
        return None
    if isinstance(topic, str) and topic.startswith("job:") and len(topic) > 4:
        return topic[4:]
    raise ServiceError("invalid-argument", f"bad topic {topic!r}")


@dataclass(frozen=True)
class Subscription:
    subscription_id: str
    topic: str
    callback_url: str
    created_at: int = field(default_factory=now_ms)

    def __post_init__(self):
        parse_topic(self.topic)
        if not is_valid_url(self.callback_url):
            raise ServiceError("invalid-argument", f"bad callback_url {self.callback_url!r}")

    def matches(self, job_id: str) -> bool:
        selected = parse_topic(self.topic)
        return selected is None or selected == job_id

    def to_dict(self) -> dict:
        return {
            "subscription_id": self.subscription_id,
            "topic": self.topic,
            "callback_url": self.callback_url,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Subscription:
        return cls(
            subscription_id=_field(d, "subscription_id", str),
            topic=_field(d, "topic", str),
            callback_url=_field(d, "callback_url", str),
            created_at=_field(d, "created_at", int),
        )


@dataclass(frozen=True)
class Attempt:
    ce_id: str
    outcome: str  # accepted | rejected | unreachable

    def to_dict(self) -> dict:
        return {"ce_id": self.ce_id, "outcome": self.outcome}

    @classmethod
    def from_dict(cls, d: dict) -> Attempt:
        outcome = _field(d, "outcome", str)
        if outcome not in ("accepted", "rejected", "unreachable"):
            raise MalformedMessage(f"bad attempt outcome {outcome!r}")
        return cls(ce_id=_field(d, "ce_id", str), outcome=outcome)


@dataclass(frozen=True)
class BrokeredReservation:
    job_id: str
    ticket: JobTicket
    ce_url: str
    attempts: tuple[Attempt, ...]

    def __post_init__(self):
        object.__setattr__(self, "attempts", tuple(self.attempts))
        outcomes = [a.outcome for a in self.attempts]
        if outcomes.count("accepted") != 1 or outcomes[-1] != "accepted":
            raise ServiceError("invalid-argument", "exactly the last attempt must be accepted")
        if self.ticket.ce_url != self.ce_url:
            raise ServiceError("invalid-argument", "ticket ce_url differs from reservation")

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "ticket": self.ticket.to_dict(),
            "ce_url": self.ce_url,
            "attempts": [a.to_dict() for a in self.attempts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BrokeredReservation:
        return cls(
            job_id=_field(d, "job_id", str),
            ticket=JobTicket.from_dict(_field(d, "ticket", dict)),
            ce_url=_field(d, "ce_url", str),
            attempts=tuple(Attempt.from_dict(a) for a in _field(d, "attempts", list)),
        )
