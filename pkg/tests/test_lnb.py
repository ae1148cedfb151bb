import argparse

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beryllium import lnb, wire
from beryllium.domain import JobState, JobStatusEvent, is_legal_transition
from beryllium.errors import ServiceError
from beryllium.lnb import EventLog
from beryllium.testkit.audit import illegal_paths

from test_container import Receiver

S = JobState


def ev(job, state, at=0):
    return JobStatusEvent(job, state, "http://src:1", at)


def test_sequence_numbers_are_per_job():
    log = EventLog()
    assert [log.record(ev("a", s)).seq for s in (S.RESERVED, S.SUBMITTED)] == [1, 2]
    assert log.record(ev("b", S.RESERVED)).seq == 1
    assert len(log) == 3 and log.jobs() == ["a", "b"]


def test_illegal_transition_is_kept_and_flagged():
    log = EventLog()
    log.record(ev("a", S.RESERVED))
    bad = log.record(ev("a", S.DONE))
    assert bad.anomalous and bad.seq == 2
    assert log.current_state("a") is S.RESERVED
    ok = log.record(ev("a", S.SUBMITTED))
    assert not ok.anomalous


def test_events_after_terminal_are_anomalous():
    log = EventLog()
    for s in (S.RESERVED, S.SUBMITTED, S.ABORTED):
        assert not log.record(ev("a", s)).anomalous
    assert log.record(ev("a", S.EXPIRED)).anomalous
    assert log.current_state("a") is S.ABORTED


def test_unknown_job():
    with pytest.raises(ServiceError) as exc:
        EventLog().timeline("nope")
    assert exc.value.code == "unknown-job"


@settings(max_examples=60)
@given(st.lists(st.sampled_from(list(JobState)), min_size=1, max_size=8))
def test_non_anomalous_events_form_a_legal_path(states):
    log = EventLog()
    for s in states:
        log.record(ev("j", s))
    clean = [e.state for e in log.timeline("j") if not e.anomalous]
    for a, b in zip(clean, clean[1:]):
        assert is_legal_transition(a, b)
    kept = [e.to_dict() for e in log.timeline("j") if not e.anomalous]
    assert illegal_paths({"j": kept}) == {}
    assert [e.seq for e in log.timeline("j")] == list(range(1, len(states) + 1))


def test_replay_survives_torn_tail(tmp_path):
    path = tmp_path / "ev.ndjson"
    log = EventLog(path)
    log.record(ev("a", S.RESERVED, 1))
    log.record(ev("a", S.SUBMITTED, 2))
    log.close()
    with open(path, "ab") as fh:
        fh.write(b'{"job_id":"a","sta')
    again = EventLog(path)
    assert [e.state for e in again.timeline("a")] == [S.RESERVED, S.SUBMITTED]
    assert again.record(ev("a", S.RUNNING, 3)).seq == 3
    again.close()
    assert [e.seq for e in EventLog(path).timeline("a")] == [1, 2, 3]


@pytest.fixture
def service(tmp_path):
    svc = lnb.create(argparse.Namespace(host="127.0.0.1", port=0, log_path=str(tmp_path / "ev.ndjson")))
    svc.container.start()
    yield svc
    svc.container.shutdown()


def post(svc, job, state):
    return wire.call("POST", f"{svc.container.url}/lnb/events", ev(job, state))


def test_http_record_and_query(service):
    assert post(service, "j", S.RESERVED) == {"seq": 1, "anomalous": False}
    assert post(service, "j", S.RUNNING) == {"seq": 2, "anomalous": True}
    st_ = wire.call("GET", f"{service.container.url}/lnb/jobs/j")
    assert st_["current_state"] == "RESERVED"
    assert [e["seq"] for e in st_["timeline"]] == [1, 2]
    with pytest.raises(ServiceError) as exc:
        wire.call("GET", f"{service.container.url}/lnb/jobs/missing/events")
    assert exc.value.code == "unknown-job"


def test_client_supplied_seq_is_ignored(service):
    body = {**ev("j", S.RESERVED).to_dict(), "seq": 99, "anomalous": True}
    assert wire.call("POST", f"{service.container.url}/lnb/events", body) == {"seq": 1, "anomalous": False}


def test_subscribe_receives_matching_events(service):
    r_all, r_job = Receiver(), Receiver()
    url = service.container.url
    try:
        wire.call("POST", f"{url}/lnb/subscribe", {"topic": "all", "callback_url": r_all.url})
        sub = wire.call("POST", f"{url}/lnb/subscribe", {"topic": "job:x", "callback_url": r_job.url})
        post(service, "x", S.RESERVED)
        post(service, "y", S.RESERVED)
        assert service.container.notifier.flush(5)
        assert sorted(b["job_id"] for b in r_all.bodies) == ["x", "y"]
        assert [b["job_id"] for b in r_job.bodies] == ["x"]
        wire.call("DELETE", f"{url}/lnb/subscribe/{sub['subscription_id']}")
        post(service, "x", S.SUBMITTED)
        assert service.container.notifier.flush(5)
        assert len(r_job.bodies) == 1
        assert wire.call("GET", f"{url}/lnb/sde/subscriptions")["value"] == 1
    finally:
        r_all.close()
        r_job.close()


def test_unsubscribe_unknown(service):
    with pytest.raises(ServiceError) as exc:
        wire.call("DELETE", f"{service.container.url}/lnb/subscribe/nope")
    assert exc.value.code == "unknown-instance"


def test_bad_subscription(service):
    with pytest.raises(ServiceError):
        wire.call("POST", f"{service.container.url}/lnb/subscribe", {"topic": "job:x", "callback_url": "nope"})


def test_restart_keeps_history(tmp_path):
    path = str(tmp_path / "ev.ndjson")
    svc = lnb.create(argparse.Namespace(host="127.0.0.1", port=0, log_path=path))
    svc.container.start()
    post(svc, "j", S.RESERVED)
    post(svc, "j", S.SUBMITTED)
    before = svc.query_status("j")
    svc.container.shutdown()
    svc2 = lnb.create(argparse.Namespace(host="127.0.0.1", port=0, log_path=path))
    try:
        assert svc2.query_status("j") == before
        assert svc2.sde.get("events_recorded").value == 2
    finally:
        svc2.container.shutdown()
