"""Computing Element: reservations, ticket validation and job execution.

The CE's confirmation service reserves slots against an incomplete ticket,
records the reservation in an append-only NDJSON ticket database and hands
back the ticket completed with its own URL. A job arriving later runs only
if its ticket matches an unconsumed, unexpired reservation; otherwise it is
aborted and the reason goes back to the submitter.

Durable state lives under ``--workdir-root``:

    tickets.ndjson   reservations plus consumed/expired tombstones
    jobs.ndjson      job state journal
    jobs/<job_id>/   sandbox working directory; outputs under ``out/``
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import re
import subprocess
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

from beryllium import wire
from beryllium.container import Container, DropConnection, operation_data
from beryllium.domain import (
    TERMINAL_STATES,
    JobPayload,
    JobState,
    JobStatusEvent,
    JobTicket,
    ResourceDescriptor,
    TicketDbEntry,
    now_ms,
    ticket_complete,
    ticket_matches,
)
from beryllium.errors import ServiceError, TransportError
from beryllium.runtime import Periodic, configure_logging, serve

DEFAULT_PORT = 7710
DEFAULT_RESERVATION_TTL_S = 60.0
DEFAULT_WALL_LIMIT_S = 300.0
DEFAULT_HEARTBEAT_INTERVAL_S = 3.0

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


class LedgerViolation(AssertionError):
    pass


@dataclass
class SlotLedger:
    total: int
    reserved: int = 0
    running: int = 0
    peak: int = 0

    @property
    def free(self) -> int:
        return self.total - self.reserved - self.running

    def _check(self) -> None:
        if self.reserved < 0 or self.running < 0 or self.reserved + self.running > self.total:
            raise LedgerViolation(f"slot ledger out of bounds: {self}")
        self.peak = max(self.peak, self.reserved + self.running)

    def reserve(self, n: int) -> bool:
        if self.free < n:
            return False
        self.reserved += n
        self._check()
        return True

    def start(self, n: int) -> None:
        self.reserved -= n
        self.running += n
        self._check()

    def release_reservation(self, n: int) -> None:
        self.reserved -= n
        self._check()

    def finish(self, n: int) -> None:
        self.running -= n
        self._check()

    def to_dict(self) -> dict:
        return {"total": self.total, "reserved": self.reserved, "running": self.running}


class _Ndjson:
    """Append-only NDJSON file, fsynced per record. ``path=None`` is in-memory."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None

    def replay(self) -> list[dict]:
        if self.path is None or not self.path.exists():
            return []
        records, good = [], 0
        with open(self.path, "rb") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except ValueError:
                    break  # torn tail from a crash mid-append
                if not isinstance(rec, dict):
                    break
                records.append(rec)
                good += len(line)
        if good != self.path.stat().st_size:
            with open(self.path, "r+b") as fh:
                fh.truncate(good)
        return records

    def append(self, record: dict) -> None:
        if self.path is None:
            return
        if self._fh is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")
        self._fh.write(wire.encode(record) + b"\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._fh = None


class TicketDb:
    """The CE's reservation database, rebuilt by replaying its file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self._file = _Ndjson(Path(path) if path is not None else None)
        self._entries: dict[str, TicketDbEntry] = {}
        for rec in self._file.replay():
            tid = rec.get("ticket_id")
            if "job_id" in rec:
                if tid in self._entries:
                    raise ValueError(f"duplicate ticket_id {tid} in ticket database")
                self._entries[tid] = TicketDbEntry.from_dict(rec)
            elif "consumed_at" in rec and tid in self._entries:
                self._entries[tid] = replace(self._entries[tid], consumed_at=rec["consumed_at"])
            elif "expired_at" in rec and tid in self._entries:
                self._entries[tid] = replace(self._entries[tid], expired_at=rec["expired_at"])

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, ticket_id: str) -> bool:
        return ticket_id in self._entries

    def get(self, ticket_id: str) -> TicketDbEntry | None:
        return self._entries.get(ticket_id)

    def entries(self) -> list[TicketDbEntry]:
        return list(self._entries.values())

    def add(self, entry: TicketDbEntry) -> None:
        if entry.ticket_id in self._entries:
            raise ValueError(f"duplicate ticket_id {entry.ticket_id}")
        self._file.append(entry.to_dict())
        self._entries[entry.ticket_id] = entry

    def consume(self, ticket_id: str, at: int) -> TicketDbEntry:
        entry = self._entries[ticket_id]
        if entry.consumed:
            raise ValueError(f"ticket {ticket_id} already consumed")
        self._file.append({"ticket_id": ticket_id, "consumed_at": at})
        entry = self._entries[ticket_id] = replace(entry, consumed_at=at)
        return entry

    def expire(self, ticket_id: str, at: int) -> TicketDbEntry:
        self._file.append({"ticket_id": ticket_id, "expired_at": at})
        entry = self._entries[ticket_id] = replace(self._entries[ticket_id], expired_at=at)
        return entry

    def pending_slots(self) -> int:
        return sum(e.slots for e in self._entries.values() if not e.consumed and not e.expired)

    def close(self) -> None:
        self._file.close()


@dataclass
class CeJobRecord:
    job_id: str
    state: JobState
    workdir: str
    slots: int = 0
    ticket_id: str = ""
    detail: str = ""
    exit_code: int | None = None
    output_files: list[str] = field(default_factory=list)
    released_at: int | None = None

    def to_dict(self) -> dict:
        d = {
            "job_id": self.job_id,
            "state": self.state.value,
            "workdir": self.workdir,
            "slots": self.slots,
            "ticket_id": self.ticket_id,
            "detail": self.detail,
            "output_files": list(self.output_files),
        }
        if self.exit_code is not None:
            d["exit_code"] = self.exit_code
        if self.released_at is not None:
            d["released_at"] = self.released_at
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CeJobRecord:
        return cls(
            job_id=d["job_id"],
            state=JobState(d["state"]),
            workdir=d["workdir"],
            slots=d.get("slots", 0),
            ticket_id=d.get("ticket_id", ""),
            detail=d.get("detail", ""),
            exit_code=d.get("exit_code"),
            output_files=list(d.get("output_files", [])),
            released_at=d.get("released_at"),
        )


class ConfirmationInstance:
    """Per-reservation instance; holds the completed ticket once accepted."""

    def __init__(self):
        self.value: JobTicket | None = None


def _safe_name(name: str) -> str:
    p = PurePosixPath(name)
    if p.is_absolute() or p.name != name or name in ("", ".", ".."):
        raise ServiceError("invalid-argument", f"input file name {name!r} must be a bare file name")
    return name


class ComputingElement:
    def __init__(
        self,
        container: Container,
        *,
        ce_id: str,
        slots: int,
        tags: frozenset[str] = frozenset(),
        workdir_root: str | os.PathLike,
        index_url: str | None = None,
        lnb_url: str | None = None,
        reservation_ttl_s: float = DEFAULT_RESERVATION_TTL_S,
        job_wall_limit_s: float = DEFAULT_WALL_LIMIT_S,
        heartbeat_interval_s: float = DEFAULT_HEARTBEAT_INTERVAL_S,
        always_reject: bool = False,
        drop_confirms: bool = False,
        url: str | None = None,
    ):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.container = container
        self.log = container.log
        self.ce_id = ce_id
        self.url = url or container.url
        self.tags = frozenset(tags)
        self.root = Path(workdir_root)
        self.index_url = index_url.rstrip("/") if index_url else None
        self.lnb_url = lnb_url.rstrip("/") if lnb_url else None
        self.reservation_ttl_s = reservation_ttl_s
        self.job_wall_limit_s = job_wall_limit_s
        self.heartbeat_interval_s = heartbeat_interval_s
        self.always_reject = always_reject
        self.drop_confirms = drop_confirms

        self._lock = threading.RLock()
        self.root.mkdir(parents=True, exist_ok=True)
        self.db = TicketDb(self.root / "tickets.ndjson")
        self._journal = _Ndjson(self.root / "jobs.ndjson")
        self.jobs: dict[str, CeJobRecord] = {}
        self.ledger = SlotLedger(total=slots)
        self.oplog: list[dict] = []
        self._procs: dict[str, subprocess.Popen] = {}
        self._restart_failures: list[CeJobRecord] = []
        self._replay()

        self.sde = operation_data()
        self.sde.provide("free_slots", lambda: self.ledger.free)
        self.sde.provide("reserved_slots", lambda: self.ledger.reserved)
        self.sde.provide("running_jobs", self._running_jobs)
        self.sde.provide("peak_slots", lambda: self.ledger.peak)

        container.register_factory("ce-confirm-service", lambda inst, args: self)
        container.register_factory("ce-confirm", lambda inst, args: ConfirmationInstance())
        self.confirm_service_id = container.create_instance("ce-confirm-service").instance_id
        self._mount()

        self._poke = threading.Event()
        self._stopping = threading.Event()
        self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, name="ce-heartbeat",
                                                  daemon=True)
        self._sweeper = Periodic(reservation_ttl_s / 2, self.expire_reservations, "ce-expiry", self.log)
        container.on_shutdown(self.close)

    # -- persistence ---------------------------------------------------------------

    def _replay(self) -> None:
        for rec in self._journal.replay():
            job = CeJobRecord.from_dict(rec)
            self.jobs[job.job_id] = job
        self.ledger.reserved = self.db.pending_slots()
        for job in self.jobs.values():
            if job.state in TERMINAL_STATES:
                continue
            # the executor died with the previous process
            job.state = JobState.FAILED
            job.detail = "ce-restart"
            job.exit_code = -1
            job.released_at = now_ms()
            self._journal.append(job.to_dict())
            self._restart_failures.append(job)
        self.ledger._check()

    def _save(self, job: CeJobRecord) -> None:
        self._journal.append(job.to_dict())

    def start_background(self) -> None:
        self._heartbeat_thread.start()
        self._sweeper.start()
        for job in self._restart_failures:
            self._emit(job.job_id, JobState.FAILED, job.detail)
        self._restart_failures.clear()

    def close(self) -> None:
        self._stopping.set()
        self._poke.set()
        self._sweeper.stop()
        with self._lock:
            procs = list(self._procs.values())
        for p in procs:
            p.kill()
        with self._lock:
            self.db.close()
            self._journal.close()

    # -- index and bookkeeping -------------------------------------------------------

    def descriptor(self) -> ResourceDescriptor:
        with self._lock:
            free = self.ledger.free
        return ResourceDescriptor(self.ce_id, self.url, self.ledger.total, free, self.tags, now_ms())

    def heartbeat(self) -> None:
        if not self.index_url:
            return
        d = self.descriptor()
        try:
            try:
                wire.call("POST", f"{self.index_url}/index/renew",
                          {"ce_id": d.ce_id, "free_slots": d.free_slots})
            except ServiceError:
                # index lost us (restart or expiry): register afresh
                wire.call("POST", f"{self.index_url}/index/register", d)
        except (TransportError, ServiceError) as exc:
            self.log.warning("heartbeat to index failed: %s", exc)

    def poke_index(self) -> None:
        self._poke.set()

    def _heartbeat_loop(self) -> None:
        while not self._stopping.is_set():
            self.heartbeat()
            self._poke.wait(self.heartbeat_interval_s)
            self._poke.clear()

    def _emit(self, job_id: str, state: JobState, detail: str = "", at: int | None = None) -> None:
        if not self.lnb_url:
            return
        event = JobStatusEvent(job_id, state, self.url, at if at is not None else now_ms(), detail)
        for _ in range(3):
            try:
                wire.call("POST", f"{self.lnb_url}/lnb/events", event)
                return
            except TransportError as exc:
                last = exc
                self._stopping.wait(0.2)
            except ServiceError as exc:
                last = exc
                break
        self.log.warning("could not record %s %s: %s", job_id, state, last)

    def _note(self, op: str, outcome: str, job_id: str = "", ticket_id: str = "") -> None:
        self.oplog.append(
            {"op": op, "job_id": job_id, "ticket_id": ticket_id, "outcome": outcome, "at": now_ms()}
        )
        self.sde.record(f"{op}:{outcome}")

    def _running_jobs(self) -> int:
        with self._lock:
            return sum(1 for j in self.jobs.values() if j.state in (JobState.SUBMITTED, JobState.RUNNING))

    # -- confirmation service -----------------------------------------------------

    def confirm(self, ticket: JobTicket) -> dict:
        """Dispatch a reservation request through the stable confirmation instance."""
        if ticket.is_complete:
            raise ServiceError("invalid-argument", "ticket is already complete")
        return self.container.dispatch(
            self.confirm_service_id, "tkt_confirm", lambda inst: self.tkt_confirm(ticket)
        )

    def tkt_confirm(self, ticket: JobTicket) -> tuple[dict, str]:
        holder = self.container.create_instance("ce-confirm", {"ticket_id": ticket.ticket_id})
        reason = None
        with self._lock:
            if self.always_reject:
                reason = "rejected-by-policy"
            elif ticket.ticket_id in self.db:
                reason = "duplicate-ticket"
            elif self.ledger.free < ticket.slots:
                reason = "capacity-exceeded"
            else:
                now = now_ms()
                ttl_ms = int(min(ticket.reservation_ttl, self.reservation_ttl_s) * 1000)
                entry = TicketDbEntry(
                    ticket_id=ticket.ticket_id,
                    job_id=ticket.job_id,
                    slots=ticket.slots,
                    issued_at=ticket.issued_at,
                    reserved_at=now,
                    expires_at=now + ttl_ms,
                )
                self.db.add(entry)
                self.ledger.reserve(ticket.slots)
                completed = ticket_complete(ticket, self.url)
                holder.impl.value = completed
            self._note("tkt_confirm", "rejected" if reason else "accepted",
                       ticket.job_id, ticket.ticket_id)
        self.poke_index()
        if reason:
            self.log.info("rejected reservation for %s: %s", ticket.job_id, reason)
            reply = {"accepted": False, "reason": reason, "instance_id": holder.instance_id}
            return reply, "tkt_confirm:rejected"
        self.log.info("reserved %d slot(s) for %s", ticket.slots, ticket.job_id)
        reply = {"accepted": True, "instance_id": holder.instance_id, "ticket": completed.to_dict()}
        return reply, "tkt_confirm:accepted"

    def get_value(self, instance_id: str) -> JobTicket | None:
        def op(inst):
            if not isinstance(inst.impl, ConfirmationInstance):
                raise ServiceError("invalid-argument", f"{instance_id} is not a confirmation instance")
            return inst.impl.value, None

        return self.container.dispatch(instance_id, "get_value", op)

    # -- job submission --------------------------------------------------------------

    def submit_job(self, p: JobPayload) -> dict:
        if p.ticket.ce_url != self.url:
            raise ServiceError("invalid-argument", f"ticket is addressed to {p.ticket.ce_url}, not {self.url}")
        if not _SAFE_ID.match(p.job_id):
            raise ServiceError("invalid-argument", f"unusable job_id {p.job_id!r}")
        for name, _ in p.input_files:
            _safe_name(name)
        workdir = self.root / "jobs" / p.job_id
        failure: ServiceError | None = None
        first_contact = False
        with self._lock:
            entry = self.db.get(p.ticket.ticket_id)
            now = now_ms()
            if p.job_id in self.jobs:
                failure = ServiceError("ticket-mismatch", f"job {p.job_id} was already submitted here")
            elif entry is None or not ticket_matches(p.ticket, entry):
                failure = ServiceError("ticket-mismatch", "ticket does not match any open reservation")
            elif entry.expired or now >= entry.expires_at:
                failure = ServiceError("ticket-expired", f"reservation expired at {entry.expires_at}")
            if failure is not None:
                if p.job_id not in self.jobs:
                    first_contact = True
                    job = CeJobRecord(p.job_id, JobState.ABORTED, str(workdir), detail=failure.reason)
                    self.jobs[p.job_id] = job
                    self._save(job)
                self._note("submit_job", "aborted", p.job_id, p.ticket.ticket_id)
            else:
                self.db.consume(entry.ticket_id, now)
                self.ledger.start(entry.slots)
                job = CeJobRecord(p.job_id, JobState.SUBMITTED, str(workdir),
                                  slots=entry.slots, ticket_id=entry.ticket_id)
                self.jobs[p.job_id] = job
                self._save(job)
                self._note("submit_job", "accepted", p.job_id, p.ticket.ticket_id)

        if failure is not None:
            # SUBMITTED first keeps a fresh job's timeline a legal path to ABORTED
            if first_contact:
                self._emit(p.job_id, JobState.SUBMITTED, "payload received")
            self._emit(p.job_id, JobState.ABORTED, failure.reason)
            self.log.info("aborted %s: %s", p.job_id, failure.reason)
            raise failure

        (workdir / "out").mkdir(parents=True, exist_ok=True)
        for name, data in p.input_files:
            (workdir / name).write_bytes(data)
        self._emit(p.job_id, JobState.SUBMITTED, f"ticket {p.ticket.ticket_id} validated")
        threading.Thread(target=self.run_job, args=(job, list(p.command)),
                         name=f"job-{p.job_id}", daemon=True).start()
        return {"job_id": p.job_id, "state": JobState.SUBMITTED.value}

    def run_job(self, job: CeJobRecord, command: list[str]) -> JobState:
        workdir = Path(job.workdir)
        exit_code: int | None = None
        detail = ""
        try:
            with open(workdir / "stdout.txt", "wb") as out, open(workdir / "stderr.txt", "wb") as err:
                try:
                    proc = subprocess.Popen(command, cwd=workdir, stdout=out, stderr=err,
                                            stdin=subprocess.DEVNULL)
                except OSError as exc:
                    proc = None
                    exit_code, detail = 127, f"spawn failed: {exc}"
                with self._lock:
                    job.state = JobState.RUNNING
                    self._save(job)
                    if proc is not None:
                        self._procs[job.job_id] = proc
                self._emit(job.job_id, JobState.RUNNING, f"pid {proc.pid}" if proc else "spawn")
                if proc is not None:
                    try:
                        exit_code = proc.wait(timeout=self.job_wall_limit_s)
                        detail = f"exit {exit_code}"
                    except subprocess.TimeoutExpired:
                        proc.kill()
                        exit_code = proc.wait()
                        detail = "timeout"
        except Exception as exc:  # keep the ledger honest whatever happens
            self.log.exception("executor for %s failed", job.job_id)
            exit_code, detail = exit_code if exit_code is not None else -1, f"executor error: {exc}"
        final = JobState.DONE if exit_code == 0 and detail != "timeout" else JobState.FAILED
        outputs = _collect_outputs(workdir / "out")
        with self._lock:
            self._procs.pop(job.job_id, None)
            at = now_ms()
            job.state = final
            job.exit_code = exit_code
            job.detail = detail
            job.output_files = outputs
            job.released_at = at
            self.ledger.finish(job.slots)
            self._save(job)
            self._note("run_job", final.value.lower(), job.job_id, job.ticket_id)
        self._emit(job.job_id, final, detail, at=at)
        self.poke_index()
        return final

    def job_status(self, job_id: str) -> CeJobRecord:
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None:
                raise ServiceError("unknown-job", job_id)
            return replace(job, output_files=list(job.output_files))

    def fetch_results(self, job_id: str) -> list[tuple[str, bytes]]:
        job = self.job_status(job_id)
        if job.state not in (JobState.DONE, JobState.FAILED):
            raise ServiceError("invalid-argument", f"job {job_id} is {job.state.value}, not finished")
        out = Path(job.workdir) / "out"
        return [(name, (out / name).read_bytes()) for name in job.output_files]

    def expire_reservations(self) -> int:
        to_emit = []
        count = 0
        with self._lock:
            now = now_ms()
            for entry in self.db.entries():
                if entry.consumed or entry.expired or now < entry.expires_at:
                    continue
                self.db.expire(entry.ticket_id, now)
                self.ledger.release_reservation(entry.slots)
                count += 1
                known = self.jobs.get(entry.job_id)
                # a job already finished here (e.g. aborted) keeps its terminal state
                if known is None or known.state not in TERMINAL_STATES:
                    to_emit.append(entry)
            if count:
                self._note("expire_reservations", str(count))
        for entry in to_emit:
            self._emit(entry.job_id, JobState.EXPIRED, f"reservation {entry.ticket_id} expired")
        if count:
            self.poke_index()
        return count

    def audit(self) -> dict:
        with self._lock:
            return {
                "ce_id": self.ce_id,
                "ledger": self.ledger.to_dict(),
                "tickets": [e.to_dict() for e in self.db.entries()],
                "jobs": [j.to_dict() for j in self.jobs.values()],
            }

    # -- routes ---------------------------------------------------------------------

    def _mount(self) -> None:
        c = self.container

        def confirm(msg):
            if self.drop_confirms:
                raise DropConnection()
            return self.confirm(JobTicket.from_dict(msg))

        def value(msg, id):
            t = self.get_value(id)
            return {"ticket": t.to_dict()} if t is not None else {}

        def status(msg, id):
            job = self.job_status(id)
            d = {"job_id": job.job_id, "state": job.state.value, "detail": job.detail}
            if job.exit_code is not None:
                d["exit_code"] = job.exit_code
            return d

        def results(msg, id):
            files = self.fetch_results(id)
            job = self.job_status(id)
            return {
                "job_id": id,
                "state": job.state.value,
                "exit_code": job.exit_code,
                "files": [{"name": n, "data": base64.b64encode(b).decode("ascii")} for n, b in files],
            }

        def oplog(msg):
            with self._lock:
                return {"operations": list(self.oplog)}

        c.add_route("POST", "/ce/confirm", confirm)
        c.add_route("GET", "/ce/instance/{id}/value", value)
        c.add_route("POST", "/ce/jobs", lambda msg: self.submit_job(JobPayload.from_dict(msg)))
        c.add_route("GET", "/ce/jobs/{id}/status", status)
        c.add_route("GET", "/ce/jobs/{id}/results", results)
        c.add_route("GET", "/ce/sde/{name}", lambda msg, name: self.sde.get(name).to_dict())
        c.add_route("GET", "/ce/oplog", oplog)
        c.add_route("GET", "/ce/audit", lambda msg: self.audit())


def _collect_outputs(out: Path) -> list[str]:
    if not out.is_dir():
        return []
    return sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beryllium-ce", description="Computing Element service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--ce-id", required=True)
    p.add_argument("--slots", type=int, required=True)
    p.add_argument("--tags", default="", help="comma-separated attribute tags")
    p.add_argument("--index-url")
    p.add_argument("--lnb-url")
    p.add_argument("--workdir-root", required=True)
    p.add_argument("--reservation-ttl-s", type=float, default=DEFAULT_RESERVATION_TTL_S)
    p.add_argument("--job-wall-limit-s", type=float, default=DEFAULT_WALL_LIMIT_S)
    p.add_argument("--heartbeat-interval-s", type=float, default=DEFAULT_HEARTBEAT_INTERVAL_S)
    p.add_argument("--always-reject", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--drop-confirms", action="store_true", help=argparse.SUPPRESS)
    return p


def create(args: argparse.Namespace) -> ComputingElement:
    container = Container("ce", host=args.host, port=args.port)
    ce = ComputingElement(
        container,
        ce_id=args.ce_id,
        slots=args.slots,
        tags=frozenset(t for t in args.tags.split(",") if t),
        workdir_root=args.workdir_root,
        index_url=args.index_url,
        lnb_url=args.lnb_url,
        reservation_ttl_s=args.reservation_ttl_s,
        job_wall_limit_s=args.job_wall_limit_s,
        heartbeat_interval_s=args.heartbeat_interval_s,
        always_reject=args.always_reject,
        drop_confirms=args.drop_confirms,
    )
    ce.start_background()
    return ce


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    ce = create(build_parser().parse_args(argv))
    return serve(ce.container)


if __name__ == "__main__":
    raise SystemExit(main())
