import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from beryllium import wire
from beryllium.domain import JobRequest
from beryllium.errors import ERROR_CODES, HTTP_STATUS, MalformedMessage, ServiceError, TransportError
from beryllium.wire import MessageSchema, schema_audit, schema_for


def test_encode_is_canonical():
    assert wire.encode({"b": 1, "a": [1, {"d": 2, "c": 3}]}) == b'{"a":[1,{"c":3,"d":2}],"b":1}'


def test_job_request_round_trip():
    req = JobRequest(slots=2, min_free_slots=1, required_tags=frozenset({"x"}), job_id="j1")
    back = JobRequest.from_dict(wire.decode(wire.encode(req)))
    assert back == req


def test_broker_submit_rejects_command_field():
    s = schema_for("POST", "/broker/submit")
    with pytest.raises(MalformedMessage) as exc:
        wire.decode(b'{"slots":1,"command":["ls"]}', s)
    assert exc.value.code == "invalid-argument"
    assert "command" in exc.value.detail


def test_nested_payload_key_is_found():
    s = schema_for("POST", "/index/query")
    with pytest.raises(MalformedMessage):
        wire.decode(b'{"min_free_slots":0,"extra":[{"payload":1}]}', s)


def test_ce_jobs_may_carry_payload_but_needs_job_id():
    s = schema_for("POST", "/ce/jobs")
    ok = {"job_id": "j", "command": ["true"], "ticket": {}}
    assert wire.decode(wire.encode(ok), s) == ok
    with pytest.raises(MalformedMessage) as exc:
        wire.decode(b'{"command":["true"],"ticket":{}}', s)
    assert "job_id" in exc.value.detail


@pytest.mark.parametrize("raw", [b"not json", b"[1,2]", b"\xff\xfe"])
def test_garbage_is_malformed(raw):
    with pytest.raises(MalformedMessage):
        wire.decode(raw, schema_for("POST", "/index/query"))


def test_shipped_schema_table_is_clean():
    assert schema_audit() == []


def test_audit_flags_injected_field():
    bad = MessageSchema("POST", "/index/query", frozenset({"min_free_slots", "command"}))
    table = wire.SCHEMAS + (bad,)
    found = schema_audit(table)
    assert len(found) == 1
    assert found[0].field == "command" and found[0].direction == "request"


def test_audit_flags_nested_response_field():
    bad = MessageSchema("POST", "/broker/submit", response=frozenset({"job.input_files"}))
    assert [v.field for v in schema_audit([bad])] == ["job.input_files"]


def test_audit_of_empty_table():
    assert schema_audit([]) == []


def test_payload_allowed_outside_firewall_in_audit():
    ok = MessageSchema("POST", "/ce/jobs", frozenset({"command"}))
    assert schema_audit([ok]) == []


def test_error_codes_have_http_statuses():
    assert set(HTTP_STATUS) == set(ERROR_CODES)
    with pytest.raises(ValueError):
        ServiceError("not-a-code", "x")


payload_bodies = st.dictionaries(
    st.sampled_from(["slots", "job_id", "ce_id", "note"]), st.integers(0, 5), max_size=3
).flatmap(
    lambda base: st.sampled_from(sorted(wire.PAYLOAD_KEYS)).map(lambda k: {**base, k: ["x"]})
)


@given(st.sampled_from(wire.SCHEMAS), payload_bodies)
def test_every_endpoint_honours_the_firewall(schema, body):
    # fill required keys so the only possible failure is the firewall
    for key in schema.required:
        body.setdefault(key, 1)
    raw = wire.encode(body)
    if schema.firewalled:
        with pytest.raises(MalformedMessage):
            wire.decode(raw, schema)
    else:
        assert wire.decode(raw, schema) == json.loads(raw)


def test_every_schema_is_unique():
    keys = [(s.method, s.path) for s in wire.SCHEMAS]
    assert len(keys) == len(set(keys))


def test_required_is_subset_of_request():
    for s in wire.SCHEMAS:
        assert s.required <= s.request, dataclasses.asdict(s)


def test_call_to_closed_port_is_transport_error():
    with pytest.raises(TransportError):
        wire.call("GET", "http://127.0.0.1:9/admin/ping", timeout=1)
