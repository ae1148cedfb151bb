"""Resource Broker: turns a job request into a confirmed reservation.

The broker only ever handles metadata. It asks the index for candidates,
ranks them, offers a fresh incomplete ticket to the best CE and, when that
CE declines or cannot be reached, excludes it and asks the index again.
Job payloads go straight from the user to the CE that confirmed.
"""

from __future__ import annotations

import argparse
from typing import Sequence

from beryllium import wire
from beryllium.container import Container, operation_data
from beryllium.domain import (
    Attempt,
    BrokeredReservation,
    JobRequest,
    JobState,
    JobStatusEvent,
    JobTicket,
    ResourceDescriptor,
    new_id,
    now_ms,
    ticket_new_incomplete,
)
from beryllium.errors import ServiceError, TransportError
from beryllium.runtime import configure_logging, serve

DEFAULT_PORT = 7701
DEFAULT_MAX_ROUNDS = 5
DEFAULT_TICKET_TTL_S = 60.0


class MaxFreeSlots:
    """Most free slots first; ties go to the lexicographically smallest ce_id."""

    name = "max-free-slots"

    def rank(self, candidates: Sequence[ResourceDescriptor]) -> list[ResourceDescriptor]:
        return sorted(candidates, key=lambda d: (-d.free_slots, d.ce_id))


POLICIES = {MaxFreeSlots.name: MaxFreeSlots}


def match_select(candidates: Sequence[ResourceDescriptor], req: JobRequest | None = None,
                 policy=None) -> str | None:
    ranked = (policy or MaxFreeSlots()).rank(candidates)
    return ranked[0].ce_id if ranked else None


class NoResources(ServiceError):
    def __init__(self, attempts: list[Attempt], detail: str):
        ServiceError.__init__(self, "no-resources", detail,
                              attempts=[a.to_dict() for a in attempts])
        self.attempts = attempts


class Broker:
    def __init__(
        self,
        index_url: str,
        lnb_url: str | None,
        *,
        url: str = "",
        max_rounds: int = DEFAULT_MAX_ROUNDS,
        ticket_ttl_s: float = DEFAULT_TICKET_TTL_S,
        policy: str = MaxFreeSlots.name,
        timeout: float = wire.DEFAULT_TIMEOUT,
        log=None,
    ):
        if max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        self.index_url = index_url.rstrip("/")
        self.lnb_url = lnb_url.rstrip("/") if lnb_url else None
        self.url = url
        self.max_rounds = max_rounds
        self.ticket_ttl_s = ticket_ttl_s
        self.policy = POLICIES[policy]()
        self.timeout = timeout
        self.log = log
        self.sde = operation_data()
        self.sde.declare("jobs_brokered", 0)
        self.sde.declare("jobs_failed", 0)

    def _query_index(self, req: JobRequest) -> list[ResourceDescriptor]:
        reply = wire.call(
            "POST",
            f"{self.index_url}/index/query",
            {
                "min_free_slots": max(req.min_free_slots, req.slots),
                "required_tags": sorted(req.required_tags),
            },
            timeout=self.timeout,
        )
        return [ResourceDescriptor.from_dict(d) for d in reply.get("resources", [])]

    def _offer(self, ce: ResourceDescriptor, ticket: JobTicket) -> tuple[str, JobTicket | None]:
        try:
            reply = wire.call("POST", f"{ce.ce_url}/ce/confirm", ticket, timeout=self.timeout)
        except TransportError as exc:
            self._warn("CE %s unreachable: %s", ce.ce_id, exc)
            return "unreachable", None
        except ServiceError as exc:
            # instance-inactive and friends count as a refusal
            self._warn("CE %s refused with %s", ce.ce_id, exc.reason)
            return "rejected", None
        if not reply.get("accepted"):
            return "rejected", None
        try:
            completed = JobTicket.from_dict(reply["ticket"])
        except (KeyError, ServiceError):
            return "rejected", None
        if (completed.ticket_id, completed.job_id) != (ticket.ticket_id, ticket.job_id):
            return "rejected", None
        if completed.ce_url != ce.ce_url:
            return "rejected", None
        return "accepted", completed

    def submit_request(self, req: JobRequest) -> BrokeredReservation:
        job_id = f"job-{new_id(8)}"
        attempts: list[Attempt] = []
        excluded: set[str] = set()
        try:
            for _ in range(self.max_rounds):
                try:
                    found = self._query_index(req)
                except (TransportError, ServiceError) as exc:
                    self._warn("index query failed: %s", exc)
                    break
                candidates = [d for d in found if d.ce_id not in excluded]
                ranked = self.policy.rank(candidates)
                if not ranked:
                    break
                ce = ranked[0]
                ticket = ticket_new_incomplete(job_id, req.slots, self.ticket_ttl_s)
                outcome, completed = self._offer(ce, ticket)
                attempts.append(Attempt(ce.ce_id, outcome))
                if completed is not None:
                    reservation = BrokeredReservation(job_id, completed, completed.ce_url, attempts)
                    self._record_reserved(reservation)
                    self.sde.record("submit_request:accepted", jobs_brokered=1)
                    return reservation
                excluded.add(ce.ce_id)
        except Exception:
            self.sde.record("submit_request:error", jobs_failed=1)
            raise
        self.sde.record("submit_request:no-resources", jobs_failed=1)
        raise NoResources(attempts, f"no CE confirmed job {job_id} after {len(attempts)} attempt(s)")

    def _record_reserved(self, r: BrokeredReservation) -> None:
        if not self.lnb_url:
            return
        event = JobStatusEvent(
            job_id=r.job_id,
            state=JobState.RESERVED,
            source=self.url,
            at=now_ms(),
            detail=f"reserved {r.ticket.slots} slot(s) at {r.ce_url}",
        )
        try:
            wire.call("POST", f"{self.lnb_url}/lnb/events", event, timeout=self.timeout)
        except (TransportError, ServiceError) as exc:
            self._warn("could not record RESERVED for %s: %s", r.job_id, exc)

    def _warn(self, msg, *args):
        if self.log is not None:
            self.log.warning(msg, *args)


class BrokerService:
    def __init__(self, container: Container, broker: Broker):
        self.container = container
        self.broker = broker
        broker.url = broker.url or container.url
        broker.log = container.log
        container.add_route("POST", "/broker/submit", self._submit)
        container.add_route("GET", "/broker/sde/{name}", lambda msg, name: broker.sde.get(name).to_dict())

    def _submit(self, msg):
        req = JobRequest.from_dict(msg)
        r = self.broker.submit_request(req)
        self.container.log.info("brokered %s -> %s (%d attempt(s))", r.job_id, r.ce_url, len(r.attempts))
        return r.to_dict()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beryllium-broker", description="Resource Broker service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--index-url", required=True)
    p.add_argument("--lnb-url")
    p.add_argument("--max-rounds", type=int, default=DEFAULT_MAX_ROUNDS)
    p.add_argument("--ticket-ttl-s", type=float, default=DEFAULT_TICKET_TTL_S)
    p.add_argument("--policy", choices=sorted(POLICIES), default=MaxFreeSlots.name)
    return p


def create(args: argparse.Namespace) -> BrokerService:
    container = Container("broker", host=args.host, port=args.port)
    broker = Broker(
        args.index_url,
        args.lnb_url,
        max_rounds=args.max_rounds,
        ticket_ttl_s=args.ticket_ttl_s,
        policy=args.policy,
    )
    return BrokerService(container, broker)


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    svc = create(build_parser().parse_args(argv))
    return serve(svc.container)


if __name__ == "__main__":
    raise SystemExit(main())
