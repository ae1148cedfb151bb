"""Brute-force reference implementations used as ground truth in tests.

These are deliberately naive (quadratic scans, no sorting helpers, no code
shared with the services) so a bug in the services cannot hide here too.
"""

from __future__ import annotations


def oracle_match(candidates, req=None):
    """The ce_id no other candidate beats: more free slots, or equal and smaller id."""
    for c in candidates:
        beaten = False
        for d in candidates:
            if d.free_slots > c.free_slots:
                beaten = True
            elif d.free_slots == c.free_slots and d.ce_id < c.ce_id:
                beaten = True
        if not beaten:
            return c.ce_id
    return None


def oracle_filter(records, req, now):
    """Unexpired records satisfying the request, ordered by ce_id.

    ``records`` is an iterable of (descriptor, expires_at) pairs and ``req``
    any object with ``min_free_slots`` and ``required_tags``.
    """
    kept = []
    for descriptor, expires_at in records:
        if expires_at < now:
            continue
        if descriptor.free_slots < req.min_free_slots:
            continue
        has_all = True
        for tag in req.required_tags:
            if tag not in descriptor.tags:
                has_all = False
        if has_all:
            kept.append(descriptor)
    # selection sort by ce_id
    ordered = []
    while kept:
        smallest = kept[0]
        for d in kept:
            if d.ce_id < smallest.ce_id:
                smallest = d
        ordered.append(smallest)
        kept.remove(smallest)
    return ordered
