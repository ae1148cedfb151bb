"""Protocol layer: canonical JSON codecs, endpoint schemas and the client call.

The schema table doubles as the information/data firewall: broker and index
endpoints must never declare (or receive) job payload fields. ``decode``
enforces it on live messages, ``schema_audit`` enforces it statically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Iterable

import requests

from beryllium.errors import ERROR_CODES, MalformedMessage, ServiceError, TransportError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0

# Keys that only job/data flows may carry.
PAYLOAD_KEYS = frozenset({"command", "input_files", "payload"})
FIREWALLED_PREFIXES = ("/broker/", "/index/")


def encode(value: Any) -> bytes:
    """Canonical encoding: sorted keys, no insignificant whitespace, UTF-8."""
    if hasattr(value, "to_dict"):
        value = value.to_dict()
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def iter_keys(obj: Any) -> Iterable[str]:
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from iter_keys(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from iter_keys(v)


def payload_keys_in(obj: Any) -> set[str]:
    return {k for k in iter_keys(obj) if k in PAYLOAD_KEYS}


@dataclass(frozen=True)
class MessageSchema:
    method: str
    path: str
    request: frozenset[str] = frozenset()
    required: frozenset[str] = frozenset()
    response: frozenset[str] = frozenset()

    @property
    def firewalled(self) -> bool:
        return self.path.startswith(FIREWALLED_PREFIXES)


def decode(data: bytes, schema: MessageSchema | None = None) -> dict:
    """Parse a request body and check it against ``schema``."""
    try:
        obj = json.loads(data.decode("utf-8")) if data else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedMessage("expected a JSON object")
    if schema is None:
        return obj
    if schema.firewalled:
        leaked = payload_keys_in(obj)
        if leaked:
            raise MalformedMessage(
                f"payload field(s) {sorted(leaked)} not allowed on {schema.path}"
            )
    missing = sorted(k for k in schema.required if k not in obj)
    if missing:
        raise MalformedMessage(f"missing required field(s) {missing}")
    return obj


def _paths(prefix: str, names: Iterable[str]) -> set[str]:
    return {f"{prefix}.{n}" if prefix else n for n in names}


_TICKET = {"ticket_id", "job_id", "slots", "issued_at", "reservation_ttl", "ce_url"}
_DESCRIPTOR = {"ce_id", "ce_url", "total_slots", "free_slots", "tags", "last_seen"}
_EVENT = {"job_id", "state", "source", "at", "detail", "seq", "anomalous"}
_SDE = frozenset({"name", "value", "updated_at"})
_ERROR = {"error", "detail"}
_ACK = frozenset({"ok"})


def _fs(*parts: Iterable[str]) -> frozenset[str]:
    out: set[str] = set()
    for p in parts:
        out |= set(p)
    return frozenset(out)


SCHEMAS: tuple[MessageSchema, ...] = (
    # container admin / factory surface, mounted on every service
    MessageSchema("GET", "/admin/ping", response=frozenset({"alive", "uptime_s"})),
    MessageSchema("POST", "/admin/shutdown", response=_ACK),
    MessageSchema("POST", "/admin/loglevel", frozenset({"level"}), frozenset({"level"}), _ACK),
    MessageSchema(
        "GET",
        "/admin/status",
        response=_fs(
            {"service", "url", "uptime_s", "instance_count", "requests_served", "log_level"},
            _paths("instances", {"instance_id", "service_name", "state"}),
        ),
    ),
    MessageSchema(
        "POST",
        "/factory/{service_name}",
        frozenset({"init_args"}),
        response=frozenset({"instance_id", "service_name", "state"}),
    ),
    MessageSchema("DELETE", "/instance/{id}", response=_ACK),
    MessageSchema("POST", "/instance/{id}/active", frozenset({"active"}), frozenset({"active"}), _ACK),
    MessageSchema("GET", "/instance/{id}/sde/{name}", response=_SDE),
    # information index
    MessageSchema(
        "POST", "/index/register", frozenset(_DESCRIPTOR),
        frozenset({"ce_id", "ce_url", "total_slots", "free_slots"}), _ACK,
    ),
    MessageSchema(
        "POST", "/index/renew", frozenset({"ce_id", "free_slots"}),
        frozenset({"ce_id", "free_slots"}), _ACK,
    ),
    MessageSchema(
        "POST", "/index/query", frozenset({"min_free_slots", "required_tags"}),
        response=_fs({"resources"}, _paths("resources", _DESCRIPTOR)),
    ),
    MessageSchema("GET", "/index/sde/{name}", response=_SDE),
    # resource broker
    MessageSchema(
        "POST", "/broker/submit",
        frozenset({"job_id", "slots", "min_free_slots", "required_tags"}),
        frozenset({"slots"}),
        _fs(
            {"job_id", "ticket", "ce_url", "attempts"},
            _paths("ticket", _TICKET),
            _paths("attempts", {"ce_id", "outcome"}),
            _ERROR,
        ),
    ),
    MessageSchema("GET", "/broker/sde/{name}", response=_SDE),
    # computing element
    MessageSchema(
        "POST", "/ce/confirm", frozenset(_TICKET),
        frozenset({"ticket_id", "job_id", "slots", "issued_at", "reservation_ttl"}),
        _fs({"accepted", "reason", "instance_id", "ticket"}, _paths("ticket", _TICKET)),
    ),
    MessageSchema(
        "GET", "/ce/instance/{id}/value",
        response=_fs({"ticket"}, _paths("ticket", _TICKET)),
    ),
    MessageSchema(
        "POST", "/ce/jobs",
        _fs({"job_id", "command", "input_files", "ticket"},
            _paths("input_files", {"name", "data"}), _paths("ticket", _TICKET)),
        frozenset({"job_id", "command", "ticket"}),
        frozenset({"job_id", "state"}),
    ),
    MessageSchema(
        "GET", "/ce/jobs/{id}/status",
        response=frozenset({"job_id", "state", "detail", "exit_code"}),
    ),
    MessageSchema(
        "GET", "/ce/jobs/{id}/results",
        response=_fs({"job_id", "state", "exit_code", "files"},
                     _paths("files", {"name", "data"})),
    ),
    MessageSchema("GET", "/ce/sde/{name}", response=_SDE),
    MessageSchema(
        "GET", "/ce/oplog",
        response=_fs({"operations"}, _paths("operations", {"op", "job_id", "ticket_id", "outcome", "at"})),
    ),
    MessageSchema(
        "GET", "/ce/audit",
        response=_fs({"ce_id", "ledger", "tickets", "jobs"},
                     _paths("ledger", {"total", "reserved", "running"})),
    ),
    # logging & bookkeeping
    MessageSchema(
        "POST", "/lnb/events", frozenset(_EVENT - {"seq", "anomalous"}),
        frozenset({"job_id", "state", "source", "at"}),
        frozenset({"seq", "anomalous"}),
    ),
    MessageSchema(
        "GET", "/lnb/jobs/{id}",
        response=_fs({"job_id", "current_state", "timeline"}, _paths("timeline", _EVENT)),
    ),
    MessageSchema(
        "GET", "/lnb/jobs/{id}/events",
        response=_fs({"job_id", "events"}, _paths("events", _EVENT)),
    ),
    MessageSchema(
        "POST", "/lnb/subscribe", frozenset({"topic", "callback_url"}),
        frozenset({"topic", "callback_url"}),
        frozenset({"subscription_id", "topic", "callback_url", "created_at"}),
    ),
    MessageSchema("DELETE", "/lnb/subscribe/{id}", response=_ACK),
    MessageSchema("GET", "/lnb/sde/{name}", response=_SDE),
)


def schema_for(method: str, path: str, table: Iterable[MessageSchema] = SCHEMAS) -> MessageSchema:
    for s in table:
        if s.method == method and s.path == path:
            return s
    raise KeyError(f"{method} {path}")


@dataclass(frozen=True)
class Violation:
    method: str
    path: str
    direction: str
    field: str


def schema_audit(table: Iterable[MessageSchema] = SCHEMAS) -> list[Violation]:
    """List every payload field declared on a broker or index endpoint."""
    violations = []
    for s in table:
        if not s.firewalled:
            continue
        for direction, names in (("request", s.request), ("response", s.response)):
            for name in sorted(names):
                if set(name.split(".")) & PAYLOAD_KEYS:
                    violations.append(Violation(s.method, s.path, direction, name))
    return violations


# -- client side ------------------------------------------------------------------


def call(
    method: str,
    url: str,
    body: Any = None,
    *,
    timeout: float = DEFAULT_TIMEOUT,
) -> dict:
    """Perform one JSON request.

    Returns the decoded reply on 2xx. Raises ServiceError for an error reply
    and TransportError when the peer cannot be reached or answers garbage.
    """
    data = None if body is None else encode(body)
    try:
        resp = requests.request(
            method,
            url,
            data=data,
            headers={"Content-Type": "application/json"},
            timeout=timeout,
        )
    except requests.RequestException as exc:
        raise TransportError(f"{method} {url}: {exc}") from None
    try:
        reply = resp.json() if resp.content else {}
    except ValueError:
        raise TransportError(f"{method} {url}: non-JSON reply (HTTP {resp.status_code})") from None
    if resp.status_code >= 400:
        code = reply.get("error") if isinstance(reply, dict) else None
        if code not in ERROR_CODES:
            raise TransportError(f"{method} {url}: HTTP {resp.status_code}")
        extra = {k: v for k, v in reply.items() if k not in ("error", "detail")}
        raise ServiceError(code, reply.get("detail", ""), **extra)
    if not isinstance(reply, dict):
        raise TransportError(f"{method} {url}: reply is not an object")
    return reply
