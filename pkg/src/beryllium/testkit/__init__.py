"""Topology harness, recording proxy and brute-force oracles for testing."""

from beryllium.testkit.audit import illegal_paths, normalize_events, peak_occupancy, slot_intervals
from beryllium.testkit.oracles import oracle_filter, oracle_match
from beryllium.testkit.proxy import CapturedMessage, RecordingProxy, recording_proxy
from beryllium.testkit.topology import (
    CeSpec,
    Topology,
    TopologyError,
    TopologySpec,
    spawn_topology,
)

__all__ = [
    "CapturedMessage",
    "CeSpec",
    "RecordingProxy",
    "Topology",
    "TopologyError",
    "TopologySpec",
    "illegal_paths",
    "normalize_events",
    "oracle_filter",
    "oracle_match",
    "peak_occupancy",
    "recording_proxy",
    "slot_intervals",
    "spawn_topology",
]
