"""Logging & Bookkeeping: the durable per-job event timeline.

Events are appended to an NDJSON file (fsync before ack) and replayed on
start. Transitions the state machine forbids are still recorded, flagged
``anomalous``, so the log never loses evidence. Subscribers receive
matching events through the container's webhook notifier.
"""

from __future__ import annotations

import argparse
import json
import os
import threading
from pathlib import Path

from beryllium import wire
from beryllium.container import Container, operation_data
from beryllium.domain import (
    JobState,
    JobStatusEvent,
    Subscription,
    is_legal_transition,
    new_id,
)
from beryllium.errors import ServiceError
from beryllium.runtime import configure_logging, serve

DEFAULT_PORT = 7703


class EventLog:
    """Append-only event store; ``path=None`` keeps it in memory only."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._timelines: dict[str, list[JobStatusEvent]] = {}
        self._count = 0
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._replay()
            self._fh = open(self.path, "ab")

    def _replay(self) -> None:
        if not self.path.exists():
            return
        good = 0
        with open(self.path, "rb") as fh:
            for line in fh:
                try:
                    event = JobStatusEvent.from_dict(json.loads(line))
                except (ValueError, ServiceError):
                    break  # torn tail from a crash mid-append
                self._timelines.setdefault(event.job_id, []).append(event)
                self._count += 1
                good += len(line)
        if good != self.path.stat().st_size:
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def __len__(self) -> int:
        return self._count

    def record(self, event: JobStatusEvent, on_recorded=None) -> JobStatusEvent:
        """Assign the next per-job seq, flag illegal transitions, persist.

        ``on_recorded`` runs under the append lock so observers see events
        in seq order.
        """
        with self._lock:
            timeline = self._timelines.setdefault(event.job_id, [])
            prev = _current(timeline)
            anomalous = prev is not None and not is_legal_transition(prev, event.state)
            stored = JobStatusEvent(
                job_id=event.job_id,
                state=event.state,
                source=event.source,
                at=event.at,
                detail=event.detail,
                seq=len(timeline) + 1,
                anomalous=anomalous,
            )
            if self._fh is not None:
                self._fh.write(wire.encode(stored) + b"\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            timeline.append(stored)
            self._count += 1
            if on_recorded is not None:
                on_recorded(stored)
            return stored

    def timeline(self, job_id: str) -> list[JobStatusEvent]:
        with self._lock:
            if job_id not in self._timelines:
                raise ServiceError("unknown-job", job_id)
            return list(self._timelines[job_id])

    def current_state(self, job_id: str) -> JobState | None:
        return _current(self.timeline(job_id))

    def jobs(self) -> list[str]:
        with self._lock:
            return sorted(self._timelines)

    def events(self) -> list[JobStatusEvent]:
        with self._lock:
            return [e for tl in self._timelines.values() for e in tl]

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None


def _current(timeline: list[JobStatusEvent]) -> JobState | None:
    for e in reversed(timeline):
        if not e.anomalous:
            return e.state
    return None


class LnbService:
    def __init__(self, container: Container, log: EventLog):
        self.container = container
        self.log = log
        self._subs: dict[str, Subscription] = {}
        self._subs_lock = threading.Lock()
        self.sde = operation_data()
        self.sde.provide("events_recorded", lambda: len(self.log))
        self.sde.provide("jobs_seen", lambda: len(self.log.jobs()))
        self.sde.provide("notifications_delivered", lambda: container.notifier.delivered)
        self.sde.provide("notification_retries", lambda: container.notifier.retries)
        self.sde.provide("subscriptions", lambda: len(self._subs))
        container.add_route("POST", "/lnb/events", self._record)
        container.add_route("GET", "/lnb/jobs/{id}", self._status)
        container.add_route("GET", "/lnb/jobs/{id}/events", self._events)
        container.add_route("POST", "/lnb/subscribe", self._subscribe)
        container.add_route("DELETE", "/lnb/subscribe/{id}", self._unsubscribe)
        container.add_route("GET", "/lnb/sde/{name}", lambda msg, name: self.sde.get(name).to_dict())
        container.on_shutdown(log.close)

    # -- operations -------------------------------------------------------------

    def record_event(self, event: JobStatusEvent) -> JobStatusEvent:
        stored = self.log.record(event, on_recorded=self._fan_out)
        self.sde.record("record_event:anomalous" if stored.anomalous else "record_event")
        self.container.log.info(
            "job %s seq %d %s%s", stored.job_id, stored.seq, stored.state,
            " (anomalous)" if stored.anomalous else "",
        )
        return stored

    def query_status(self, job_id: str) -> dict:
        timeline = self.log.timeline(job_id)
        current = _current(timeline)
        return {
            "job_id": job_id,
            "current_state": current.value if current else None,
            "timeline": [e.to_dict() for e in timeline],
        }

    def subscribe(self, topic: str, callback_url: str) -> Subscription:
        sub = Subscription(new_id(8), topic, callback_url)
        with self._subs_lock:
            self._subs[sub.subscription_id] = sub
        return sub

    def unsubscribe(self, subscription_id: str) -> None:
        with self._subs_lock:
            if self._subs.pop(subscription_id, None) is None:
                raise ServiceError("unknown-instance", f"subscription {subscription_id}")
        self.container.notifier.drop(subscription_id)

    def _fan_out(self, event: JobStatusEvent) -> None:
        with self._subs_lock:
            targets = [s for s in self._subs.values() if s.matches(event.job_id)]
        if targets:
            self.container.notifier.notify_listeners(event.to_dict(), targets)

    # -- routes -------------------------------------------------------------------

    def _record(self, msg):
        event = JobStatusEvent.from_dict({k: v for k, v in msg.items() if k not in ("seq", "anomalous")})
        stored = self.record_event(event)
        return {"seq": stored.seq, "anomalous": stored.anomalous}

    def _status(self, msg, id):
        return self.query_status(id)

    def _events(self, msg, id):
        return {"job_id": id, "events": [e.to_dict() for e in self.log.timeline(id)]}

    def _subscribe(self, msg):
        if not isinstance(msg["topic"], str) or not isinstance(msg["callback_url"], str):
            raise ServiceError("invalid-argument", "topic and callback_url must be strings")
        sub = self.subscribe(msg["topic"], msg["callback_url"])
        self.sde.record("subscribe")
        return sub.to_dict()

    def _unsubscribe(self, msg, id):
        self.unsubscribe(id)
        self.sde.record("unsubscribe")
        return {"ok": True}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beryllium-lnb", description="Logging & Bookkeeping service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--log-path", default="lnb-events.ndjson")
    return p


def create(args: argparse.Namespace) -> LnbService:
    container = Container("lnb", host=args.host, port=args.port)
    return LnbService(container, EventLog(args.log_path))


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    svc = create(build_parser().parse_args(argv))
    return serve(svc.container)


if __name__ == "__main__":
    raise SystemExit(main())
