"""Information Index: the registry of live Computing Elements.

CEs register and then keep their record alive with heartbeats; the broker
queries it for candidates. A record that misses its heartbeat window is
never returned again and is removed by the periodic sweep.
"""

from __future__ import annotations

import argparse
import threading
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from beryllium.container import Container, operation_data
from beryllium.domain import ResourceDescriptor, now_ms, parse_tags
from beryllium.errors import MalformedMessage, ServiceError
from beryllium.runtime import Periodic, configure_logging, serve

DEFAULT_PORT = 7702
DEFAULT_HEARTBEAT_TTL_S = 10.0


@dataclass(frozen=True)
class ResourceRecord:
    descriptor: ResourceDescriptor
    expires_at: int

    def alive(self, now: int) -> bool:
        return now <= self.expires_at


class Registry:
    """Thread-safe CE registry. ``clock`` returns epoch milliseconds."""

    def __init__(self, heartbeat_ttl_s: float = DEFAULT_HEARTBEAT_TTL_S,
                 clock: Callable[[], int] = now_ms):
        if not heartbeat_ttl_s > 0:
            raise ValueError("heartbeat_ttl_s must be > 0")
        self.ttl_ms = int(heartbeat_ttl_s * 1000)
        self.clock = clock
        self._lock = threading.Lock()
        self._records: dict[str, ResourceRecord] = {}

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def register(self, descriptor: ResourceDescriptor) -> None:
        now = self.clock()
        d = replace(descriptor, last_seen=now)
        with self._lock:
            self._records[d.ce_id] = ResourceRecord(d, now + self.ttl_ms)

    def renew(self, ce_id: str, free_slots: int) -> None:
        now = self.clock()
        with self._lock:
            rec = self._records.get(ce_id)
            if rec is None:
                raise ServiceError("invalid-argument", "unregistered")
            if not 0 <= free_slots <= rec.descriptor.total_slots:
                raise ServiceError("invalid-argument", "free_slots must be in [0, total_slots]")
            d = replace(rec.descriptor, free_slots=free_slots, last_seen=now)
            self._records[ce_id] = ResourceRecord(d, now + self.ttl_ms)

    def query(self, min_free_slots: int = 0,
              required_tags: Iterable[str] = ()) -> list[ResourceDescriptor]:
        tags = frozenset(required_tags)
        now = self.clock()
        with self._lock:
            records = list(self._records.values())
        hits = [
            r.descriptor
            for r in records
            if r.alive(now)
            and r.descriptor.free_slots >= min_free_slots
            and tags <= r.descriptor.tags
        ]
        return sorted(hits, key=lambda d: d.ce_id)

    def sweep_expired(self) -> int:
        now = self.clock()
        with self._lock:
            stale = [k for k, r in self._records.items() if r.expires_at < now]
            for k in stale:
                del self._records[k]
        return len(stale)

    def records(self) -> list[ResourceRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: r.descriptor.ce_id)


class IndexService:
    def __init__(self, container: Container, registry: Registry):
        self.container = container
        self.registry = registry
        self.sde = operation_data()
        self.sde.provide("registered_count", lambda: len(self.registry))
        self.sde.declare("queries_served", 0)
        container.add_route("POST", "/index/register", self._register)
        container.add_route("POST", "/index/renew", self._renew)
        container.add_route("POST", "/index/query", self._query)
        container.add_route("GET", "/index/sde/{name}", lambda msg, name: self.sde.get(name).to_dict())
        interval = registry.ttl_ms / 2000
        self._sweeper = Periodic(interval, self._sweep, "index-sweep", container.log)
        container.on_shutdown(self._sweeper.stop)

    def start_background(self) -> None:
        self._sweeper.start()

    def _register(self, msg):
        d = ResourceDescriptor.from_dict(msg)
        self.registry.register(d)
        self.sde.record("register")
        self.container.log.info("registered %s at %s (%d/%d free)",
                                d.ce_id, d.ce_url, d.free_slots, d.total_slots)
        return {"ok": True}

    def _renew(self, msg):
        ce_id, free = msg["ce_id"], msg["free_slots"]
        if not isinstance(ce_id, str) or isinstance(free, bool) or not isinstance(free, int):
            raise MalformedMessage("renew needs ce_id:str and free_slots:int")
        self.registry.renew(ce_id, free)
        self.sde.record("renew")
        return {"ok": True}

    def _query(self, msg):
        min_free = msg.get("min_free_slots", 0)
        if isinstance(min_free, bool) or not isinstance(min_free, int) or min_free < 0:
            raise MalformedMessage("min_free_slots must be a non-negative integer")
        tags = parse_tags(msg.get("required_tags", []), "required_tags")
        found = self.registry.query(min_free, tags)
        self.sde.record("query", queries_served=1)
        return {"resources": [d.to_dict() for d in found]}

    def _sweep(self):
        removed = self.registry.sweep_expired()
        if removed:
            self.sde.record("sweep_expired")
            self.container.log.info("swept %d expired record(s)", removed)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beryllium-index", description="Information Index service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--heartbeat-ttl-s", type=float, default=DEFAULT_HEARTBEAT_TTL_S)
    return p


def create(args: argparse.Namespace) -> IndexService:
    container = Container("index", host=args.host, port=args.port)
    svc = IndexService(container, Registry(args.heartbeat_ttl_s))
    svc.start_background()
    return svc


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    svc = create(build_parser().parse_args(argv))
    return serve(svc.container)


if __name__ == "__main__":
    raise SystemExit(main())
