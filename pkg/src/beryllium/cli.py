"""User interface: submit jobs, follow them, fetch results, poke services.

Exit codes are a stable contract:

    0  success                 4  transport failure
    1  other service error     5  unknown job
    2  no resources            6  job not finished
    3  job aborted at the CE (ticket rejected)
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import queue
import sys
import threading
import time
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path, PurePosixPath
from typing import TextIO

from beryllium import wire
from beryllium.domain import (
    TERMINAL_STATES,
    BrokeredReservation,
    JobPayload,
    JobRequest,
    JobStatusEvent,
)
from beryllium.errors import ServiceError, TransportError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_RESOURCES = 2
EXIT_ABORTED = 3
EXIT_TRANSPORT = 4
EXIT_UNKNOWN_JOB = 5
EXIT_NOT_FINISHED = 6

CONFIG_PATH = Path("~/.beryllium.json")


def load_config() -> dict:
    path = Path(os.environ.get("BERYLLIUM_CONFIG", CONFIG_PATH)).expanduser()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        return {}
    return data if isinstance(data, dict) else {}


def _default(env: str, key: str, config: dict) -> str | None:
    return os.environ.get(env) or config.get(key)


def tamper(ticket_id: str) -> str:
    """Flip the first hex digit of a ticket id."""
    head = f"{(int(ticket_id[0], 16) + 1) % 16:x}"
    return head + ticket_id[1:]


class Printer:
    def __init__(self, out: TextIO, as_json: bool):
        self.out = out
        self.as_json = as_json

    def line(self, text: str = "", **obj) -> None:
        if self.as_json:
            if obj:
                print(json.dumps(obj, sort_keys=True), file=self.out, flush=True)
        else:
            print(text, file=self.out, flush=True)


# -- submit --------------------------------------------------------------------


def cmd_submit(args, pr: Printer) -> int:
    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        pr.line("error: no command given", error="invalid-argument", detail="no command given")
        return EXIT_ERROR
    tags = frozenset(t for t in (args.tags or "").split(",") if t)
    req = JobRequest(slots=args.slots, min_free_slots=args.min_free_slots, required_tags=tags)
    try:
        reply = wire.call("POST", f"{args.broker_url.rstrip('/')}/broker/submit", req,
                          timeout=args.timeout)
        res = BrokeredReservation.from_dict(reply)
    except TransportError as exc:
        pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
        return EXIT_TRANSPORT
    except ServiceError as exc:
        pr.line(f"{exc.reason}", error=exc.code, detail=exc.detail, **exc.extra)
        return EXIT_NO_RESOURCES if exc.code == "no-resources" else EXIT_ERROR

    pr.line(f"job_id {res.job_id}")
    pr.line(f"ce_url {res.ce_url}")
    pr.line(f"ticket_id {res.ticket.ticket_id}")

    ticket = res.ticket
    if args.tamper_ticket:
        ticket = replace(ticket, ticket_id=tamper(ticket.ticket_id))
    inputs = tuple((Path(f).name, Path(f).read_bytes()) for f in args.input)
    payload = JobPayload(res.job_id, tuple(command), ticket, inputs)
    try:
        ack = wire.call("POST", f"{res.ce_url}/ce/jobs", payload, timeout=args.timeout)
    except TransportError as exc:
        pr.line(f"transport error: {exc}", job_id=res.job_id, error="transport", detail=str(exc))
        return EXIT_TRANSPORT
    except ServiceError as exc:
        aborted = exc.code in ("ticket-mismatch", "ticket-expired")
        pr.line(f"aborted: {exc.reason}" if aborted else exc.reason,
                job_id=res.job_id, ce_url=res.ce_url, error=exc.code, detail=exc.detail,
                reason=exc.reason)
        return EXIT_ABORTED if aborted else EXIT_ERROR
    pr.line(f"submitted {ack.get('state', '')}".rstrip(), job_id=res.job_id, ce_url=res.ce_url,
            ticket_id=res.ticket.ticket_id, state=ack.get("state"),
            attempts=[a.to_dict() for a in res.attempts])
    return EXIT_OK


# -- status ----------------------------------------------------------------------


def _event_line(e: dict) -> str:
    flag = " (anomalous)" if e.get("anomalous") else ""
    return f"{e['seq']:>3} {e['state']:<9} {e['at']} {e['source']} {e.get('detail', '')}{flag}".rstrip()


def cmd_status(args, pr: Printer) -> int:
    try:
        reply = wire.call("GET", f"{args.lnb_url.rstrip('/')}/lnb/jobs/{args.job_id}",
                          timeout=args.timeout)
    except TransportError as exc:
        pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
        return EXIT_TRANSPORT
    except ServiceError as exc:
        pr.line(exc.reason, error=exc.code, detail=exc.detail)
        return EXIT_UNKNOWN_JOB if exc.code == "unknown-job" else EXIT_ERROR
    if pr.as_json:
        pr.line(**reply)
        return EXIT_OK
    pr.line(str(reply["current_state"]))
    for e in reply["timeline"]:
        pr.line(_event_line(e))
    return EXIT_OK


# -- fetch --------------------------------------------------------------------------


def _safe_target(root: Path, name: str) -> Path:
    parts = PurePosixPath(name).parts
    if not parts or PurePosixPath(name).is_absolute() or ".." in parts:
        raise ServiceError("invalid-argument", f"refusing output file name {name!r}")
    return root.joinpath(*parts)


def cmd_fetch(args, pr: Printer) -> int:
    try:
        reply = wire.call("GET", f"{args.ce_url.rstrip('/')}/ce/jobs/{args.job_id}/results",
                          timeout=args.timeout)
    except TransportError as exc:
        pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
        return EXIT_TRANSPORT
    except ServiceError as exc:
        pr.line(exc.reason, error=exc.code, detail=exc.detail)
        if exc.code == "unknown-job":
            return EXIT_UNKNOWN_JOB
        return EXIT_NOT_FINISHED if exc.code == "invalid-argument" else EXIT_ERROR
    root = Path(args.out)
    written = []
    for f in reply.get("files", []):
        target = _safe_target(root, f["name"])
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(base64.b64decode(f["data"]))
        written.append(str(target))
        pr.line(str(target))
    pr.line(job_id=args.job_id, state=reply.get("state"), exit_code=reply.get("exit_code"),
            files=written)
    return EXIT_OK


# -- watch ----------------------------------------------------------------------------


class EventListener:
    """Local webhook receiver for L&B notifications.

    ``pause_first_s`` stalls the first delivery before acknowledging it, which
    forces the sender through its retry path.
    """

    def __init__(self, host: str = "127.0.0.1", pause_first_s: float = 0.0):
        self.events: queue.Queue = queue.Queue()
        self.received = 0
        self._pause = pause_first_s
        self._lock = threading.Lock()
        listener = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.0"

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length)
                with listener._lock:
                    listener.received += 1
                    pause, listener._pause = listener._pause, 0.0
                if pause:
                    time.sleep(pause)
                try:
                    listener.events.put(json.loads(body))
                except ValueError:
                    self.send_response(400)
                    self.end_headers()
                    return
                self.send_response(204)
                self.end_headers()

            def log_message(self, format, *args):
                pass

        self._server = ThreadingHTTPServer((host, 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/events"

    def __enter__(self) -> EventListener:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def watch_job(lnb_url: str, job_id: str, pr: Printer, *, pause_first_s: float = 0.0,
              timeout_s: float | None = None, request_timeout: float = wire.DEFAULT_TIMEOUT) -> int:
    lnb_url = lnb_url.rstrip("/")
    deadline = None if timeout_s is None else time.monotonic() + timeout_s
    with EventListener(pause_first_s=pause_first_s) as listener:
        try:
            sub = wire.call("POST", f"{lnb_url}/lnb/subscribe",
                            {"topic": f"job:{job_id}", "callback_url": listener.url},
                            timeout=request_timeout)
        except TransportError as exc:
            pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
            return EXIT_TRANSPORT
        try:
            pending: dict[int, dict] = {}
            try:
                # events recorded before the subscription took effect
                backfill = wire.call("GET", f"{lnb_url}/lnb/jobs/{job_id}/events",
                                     timeout=request_timeout)["events"]
            except ServiceError:
                backfill = []
            for e in backfill:
                pending.setdefault(e["seq"], e)
            printed = 0
            while True:
                while printed + 1 in pending:
                    e = pending.pop(printed + 1)
                    printed += 1
                    pr.line(_event_line(e), **e)
                    event = JobStatusEvent.from_dict(e)
                    if event.state in TERMINAL_STATES and not event.anomalous:
                        return EXIT_OK
                wait = 0.5
                if deadline is not None:
                    wait = min(wait, deadline - time.monotonic())
                    if wait <= 0:
                        pr.line("timed out", error="timeout", job_id=job_id)
                        return EXIT_TRANSPORT
                try:
                    e = listener.events.get(timeout=wait)
                except queue.Empty:
                    continue
                if e.get("job_id") == job_id and e.get("seq", 0) > printed:
                    pending.setdefault(e["seq"], e)
        except TransportError as exc:
            pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
            return EXIT_TRANSPORT
        finally:
            try:
                wire.call("DELETE", f"{lnb_url}/lnb/subscribe/{sub['subscription_id']}",
                          timeout=request_timeout)
            except (TransportError, ServiceError):
                pass


def cmd_watch(args, pr: Printer) -> int:
    return watch_job(args.lnb_url, args.job_id, pr, pause_first_s=args.pause_first_delivery_s,
                     timeout_s=args.timeout_s, request_timeout=args.timeout)


# -- admin -------------------------------------------------------------------------


def cmd_admin(args, pr: Printer) -> int:
    base = args.url.rstrip("/")
    try:
        if args.action == "ping":
            r = wire.call("GET", f"{base}/admin/ping", timeout=args.timeout)
            pr.line(f"alive uptime={r['uptime_s']}", **r)
        elif args.action == "shutdown":
            wire.call("POST", f"{base}/admin/shutdown", timeout=args.timeout)
            pr.line("shutdown requested", ok=True)
        elif args.action == "loglevel":
            if not args.level:
                pr.line("loglevel needs a level", error="invalid-argument")
                return EXIT_ERROR
            wire.call("POST", f"{base}/admin/loglevel", {"level": args.level}, timeout=args.timeout)
            pr.line(f"log level {args.level}", ok=True, level=args.level)
        else:
            r = wire.call("GET", f"{base}/admin/status", timeout=args.timeout)
            if pr.as_json:
                pr.line(**r)
            else:
                for k in ("service", "url", "uptime_s", "instance_count", "requests_served", "log_level"):
                    pr.line(f"{k} {r.get(k)}")
    except TransportError as exc:
        pr.line(f"transport error: {exc}", error="transport", detail=str(exc))
        return EXIT_TRANSPORT
    except ServiceError as exc:
        pr.line(exc.detail or exc.code, error=exc.code, detail=exc.detail)
        return EXIT_ERROR
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser(config: dict | None = None) -> argparse.ArgumentParser:
    config = load_config() if config is None else config
    broker_default = _default("BERYLLIUM_BROKER_URL", "broker_url", config)
    lnb_default = _default("BERYLLIUM_LNB_URL", "lnb_url", config)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--timeout", type=float, default=wire.DEFAULT_TIMEOUT,
                        help="per-request timeout in seconds")

    p = argparse.ArgumentParser(prog="beryllium", description="Beryllium user interface")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("submit", parents=[common], help="broker a reservation and run a job")
    s.add_argument("--broker-url", default=broker_default, required=broker_default is None)
    s.add_argument("--slots", type=int, default=1)
    s.add_argument("--min-free-slots", type=int, default=0)
    s.add_argument("--tags", default="", help="comma-separated required tags")
    s.add_argument("--input", action="append", default=[], metavar="FILE")
    s.add_argument("--tamper-ticket", action="store_true", help=argparse.SUPPRESS)
    s.add_argument("command", nargs=argparse.REMAINDER)
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("status", parents=[common], help="show a job's state and timeline")
    s.add_argument("--lnb-url", default=lnb_default, required=lnb_default is None)
    s.add_argument("job_id")
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("fetch", parents=[common], help="download a finished job's outputs")
    s.add_argument("--ce-url", required=True)
    s.add_argument("--out", default=".")
    s.add_argument("job_id")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("watch", parents=[common], help="stream a job's events until it ends")
    s.add_argument("--lnb-url", default=lnb_default, required=lnb_default is None)
    s.add_argument("--timeout-s", type=float, default=None)
    s.add_argument("--pause-first-delivery-s", type=float, default=0.0, help=argparse.SUPPRESS)
    s.add_argument("job_id")
    s.set_defaults(func=cmd_watch)

    s = sub.add_parser("admin", parents=[common], help="container admin operations")
    s.add_argument("--url", required=True)
    s.add_argument("action", choices=["ping", "shutdown", "loglevel", "status"])
    s.add_argument("level", nargs="?")
    s.set_defaults(func=cmd_admin)
    return p


def main(argv: list[str] | None = None, out: TextIO | None = None) -> int:
    args = build_parser().parse_args(argv)
    pr = Printer(out or sys.stdout, args.json)
    return args.func(args, pr)


if __name__ == "__main__":
    raise SystemExit(main())
