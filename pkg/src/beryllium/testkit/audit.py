"""Post-run audits over CE ticket databases, job journals and L&B logs."""

from __future__ import annotations

import re

from beryllium.domain import is_legal_transition


def slot_intervals(audit: dict) -> list[tuple[int, float, int]]:
    """(start, end, slots) for every reservation in one CE's audit snapshot.

    A slot is held from the CE-side reservation time until the reservation
    expires or, once consumed, until the job released it. Unreleased
    holdings end at +inf.
    """
    released = {j["ticket_id"]: j.get("released_at") for j in audit["jobs"] if j.get("ticket_id")}
    out = []
    for t in audit["tickets"]:
        if t.get("expired_at") is not None:
            end = t["expired_at"]
        elif t.get("consumed_at") is not None:
            end = released.get(t["ticket_id"])
            end = float("inf") if end is None else end
        else:
            end = float("inf")
        out.append((t["reserved_at"], end, t["slots"]))
    return out


def peak_occupancy(intervals) -> int:
    """Maximum simultaneous slots over half-open [start, end) intervals."""
    points = []
    for start, end, slots in intervals:
        points.append((start, 1, slots))
        points.append((end, 0, -slots))  # releases sort before acquisitions at a tie
    peak = cur = 0
    for _, _, delta in sorted(points):
        cur += delta
        peak = max(peak, cur)
    return peak


def illegal_paths(timelines: dict[str, list[dict]]) -> dict[str, list[str]]:
    """Jobs whose event sequence is not a path in the transition relation."""
    bad = {}
    for job_id, events in timelines.items():
        states = [e["state"] for e in sorted(events, key=lambda e: e["seq"])]
        if any(not is_legal_transition(a, b) for a, b in zip(states, states[1:])):
            bad[job_id] = states
    return bad


_TOKENS = re.compile(r"https?://[\w.:-]+|\bjob-[0-9a-f]+\b|\b[0-9a-f]{16,}\b|\bpid \d+\b")


def normalize_events(events: list[dict]) -> list[dict]:
    """Drop timestamps and replace ids/URLs/pids by order of first appearance."""
    names: dict[str, str] = {}

    def sub(text: str) -> str:
        def repl(m):
            tok = m.group(0)
            if tok not in names:
                names[tok] = f"<{len(names)}>"
            return names[tok]

        return _TOKENS.sub(repl, text)

    out = []
    for e in events:
        out.append({
            "job_id": sub(e["job_id"]),
            "state": e["state"],
            "source": sub(e["source"]),
            "seq": e["seq"],
            "detail": sub(e.get("detail", "")),
            "anomalous": e.get("anomalous", False),
        })
    return out
