"""Error taxonomy shared by every service and the client.

Every failure that crosses the wire carries one code from ``ERROR_CODES``.
Client-side transport failures are a separate exception because they never
appear in a reply body.
"""

from __future__ import annotations

ERROR_CODES = frozenset(
    {
        "invalid-argument",
        "unknown-factory",
        "unknown-instance",
        "unknown-sde",
        "unknown-job",
        "ticket-mismatch",
        "ticket-expired",
        "no-resources",
        "instance-inactive",
        "already-destroyed",
        "service-shutting-down",
        "capacity-exceeded",
    }
)

HTTP_STATUS = {
    "invalid-argument": 400,
    "unknown-factory": 404,
    "unknown-instance": 404,
    "unknown-sde": 404,
    "unknown-job": 404,
    "ticket-mismatch": 409,
    "ticket-expired": 409,
    "no-resources": 409,
    "instance-inactive": 409,
    "already-destroyed": 410,
    "service-shutting-down": 503,
    "capacity-exceeded": 409,
}


class ServiceError(Exception):
    """A failure with a machine code from the closed set and a human detail."""

    def __init__(self, code: str, detail: str = "", **extra):
        if code not in ERROR_CODES:
            raise ValueError(f"unknown error code {code!r}")
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail
        self.extra = extra

    @property
    def status(self) -> int:
        return HTTP_STATUS[self.code]

    def to_dict(self) -> dict:
        body = dict(self.extra)
        body["error"] = self.code
        body["detail"] = self.detail
        return body

    @property
    def reason(self) -> str:
        """The one-line reason shown to users and recorded in event details."""
        return f"{self.code}: {self.detail}" if self.detail else self.code


class MalformedMessage(ServiceError):
    def __init__(self, detail: str):
        super().__init__("invalid-argument", f"malformed-message: {detail}")


class AlreadyComplete(ServiceError):
    def __init__(self, ticket_id: str):
        super().__init__("invalid-argument", f"already-complete: ticket {ticket_id}")


class TransportError(Exception):
    """The peer could not be reached or did not answer."""
