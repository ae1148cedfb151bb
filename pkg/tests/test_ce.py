import dataclasses
import sys
import threading
import time

import pytest

from beryllium import wire
from beryllium.ce import ComputingElement, LedgerViolation, SlotLedger, TicketDb
from beryllium.container import Container
from beryllium.domain import JobPayload, JobState, JobTicket, TicketDbEntry, ticket_new_incomplete
from beryllium.errors import ServiceError


def make_ce(root, slots=4, port=0, **kw):
    c = Container("ce", port=port)
    ce = ComputingElement(c, ce_id="ce-t", slots=slots, workdir_root=root, **kw)
    ce.start_background()
    c.start()
    return ce


@pytest.fixture
def ce(tmp_path):
    ce = make_ce(tmp_path / "ce")
    yield ce
    ce.container.shutdown()


def reserve(ce, slots=1, job_id=None, ttl=60):
    job_id = job_id or f"j{time.monotonic_ns()}"
    reply = ce.confirm(ticket_new_incomplete(job_id, slots, ttl))
    return reply


def wait_terminal(ce, job_id, timeout=10):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        job = ce.job_status(job_id)
        if job.state in (JobState.DONE, JobState.FAILED):
            return job
        time.sleep(0.02)
    raise AssertionError(f"{job_id} stuck in {ce.job_status(job_id).state}")


def payload(reply, command, files=()):
    t = JobTicket.from_dict(reply["ticket"])
    return JobPayload(t.job_id, tuple(command), t, tuple(files))


# -- slot ledger ---------------------------------------------------------------


def test_ledger_accounting():
    led = SlotLedger(4)
    assert led.reserve(3)
    assert not led.reserve(2)
    led.start(2)
    led.release_reservation(1)
    assert (led.reserved, led.running, led.free) == (0, 2, 2)
    led.finish(2)
    assert led.free == 4 and led.peak == 3


def test_ledger_refuses_negative():
    with pytest.raises(LedgerViolation):
        SlotLedger(2).finish(1)


# -- confirmation ---------------------------------------------------------------


def test_capacity_bound(ce):
    assert reserve(ce, 3)["accepted"]
    rejected = reserve(ce, 2)
    assert rejected == {"accepted": False, "reason": "capacity-exceeded",
                        "instance_id": rejected["instance_id"]}
    assert reserve(ce, 1)["accepted"]
    assert ce.ledger.free == 0


def test_duplicate_ticket_is_rejected(ce):
    t = ticket_new_incomplete("j1", 1, 60)
    assert ce.confirm(t)["accepted"]
    assert ce.confirm(t)["reason"] == "duplicate-ticket"


def test_complete_ticket_cannot_be_confirmed(ce):
    reply = reserve(ce)
    with pytest.raises(ServiceError):
        ce.confirm(JobTicket.from_dict(reply["ticket"]))


def test_fifty_concurrent_confirms_against_ten_slots(tmp_path):
    ce = make_ce(tmp_path / "ce", slots=10)
    try:
        results = []
        lock = threading.Lock()
        barrier = threading.Barrier(50)

        def go(i):
            barrier.wait()
            r = wire.call("POST", f"{ce.url}/ce/confirm", ticket_new_incomplete(f"j{i}", 1, 60))
            with lock:
                results.append(r["accepted"])

        threads = [threading.Thread(target=go, args=(i,)) for i in range(50)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results.count(True) == 10
        assert ce.ledger.peak == 10
        assert ce.sde.get("free_slots").value == 0
    finally:
        ce.container.shutdown()


def test_get_value_returns_completed_ticket(ce):
    reply = reserve(ce, job_id="jv")
    v = wire.call("GET", f"{ce.url}/ce/instance/{reply['instance_id']}/value")
    assert v["ticket"] == reply["ticket"]
    assert v["ticket"]["ce_url"] == ce.url
    rej = reserve(ce, 99)
    assert wire.call("GET", f"{ce.url}/ce/instance/{rej['instance_id']}/value") == {}


def test_last_operation_matches_oplog(ce):
    reserve(ce)
    reserve(ce, 99)
    last = ce.oplog[-1]
    assert ce.sde.get("last_operation").value == f"{last['op']}:{last['outcome']}"
    assert ce.sde.get("operations_count").value == len(ce.oplog)


# -- submission and execution ---------------------------------------------------------


def test_echo_job_runs_and_results_are_idempotent(ce):
    reply = reserve(ce, job_id="echo1")
    cmd = [sys.executable, "-c", "import shutil; shutil.copy('in.txt', 'out/copy.txt'); print('hi')"]
    assert ce.submit_job(payload(reply, cmd, [("in.txt", b"payload")]))["state"] == "SUBMITTED"
    job = wait_terminal(ce, "echo1")
    assert job.state is JobState.DONE and job.exit_code == 0
    first = ce.fetch_results("echo1")
    assert first == [("copy.txt", b"payload")] == ce.fetch_results("echo1")
    assert ce.ledger.free == 4


def test_shell_job_writes_output_file(ce):
    reply = reserve(ce, job_id="shell")
    ce.submit_job(payload(reply, ["sh", "-c", "echo hi > out/r.txt"]))
    assert wait_terminal(ce, "shell").state is JobState.DONE
    assert ce.fetch_results("shell") == [("r.txt", b"hi\n")]


def test_nonzero_exit_fails(ce):
    reply = reserve(ce, job_id="bad")
    ce.submit_job(payload(reply, [sys.executable, "-c", "raise SystemExit(3)"]))
    job = wait_terminal(ce, "bad")
    assert job.state is JobState.FAILED and job.exit_code == 3


def test_wall_limit(tmp_path):
    ce = make_ce(tmp_path / "ce", job_wall_limit_s=0.5)
    try:
        reply = reserve(ce, job_id="slow")
        ce.submit_job(payload(reply, [sys.executable, "-c", "import time; time.sleep(30)"]))
        job = wait_terminal(ce, "slow")
        assert job.state is JobState.FAILED and job.detail == "timeout"
        assert ce.ledger.free == 4
    finally:
        ce.container.shutdown()


def test_results_before_finish(ce):
    reply = reserve(ce, job_id="sleepy")
    ce.submit_job(payload(reply, [sys.executable, "-c", "import time; time.sleep(1)"]))
    with pytest.raises(ServiceError) as exc:
        ce.fetch_results("sleepy")
    assert exc.value.code == "invalid-argument"
    wait_terminal(ce, "sleepy")


def test_tampered_ticket_aborts(ce):
    reply = reserve(ce, job_id="tam")
    p = payload(reply, ["true"])
    bad = dataclasses.replace(p.ticket, ticket_id=("0" if p.ticket.ticket_id[0] != "0" else "1")
                              + p.ticket.ticket_id[1:])
    with pytest.raises(ServiceError) as exc:
        ce.submit_job(dataclasses.replace(p, ticket=bad))
    assert exc.value.code == "ticket-mismatch"
    assert ce.job_status("tam").state is JobState.ABORTED
    # the reservation stays pending until it expires
    assert ce.ledger.reserved == 1


def test_replayed_payload_is_rejected(ce):
    reply = reserve(ce, job_id="twice")
    p = payload(reply, ["true"])
    ce.submit_job(p)
    with pytest.raises(ServiceError) as exc:
        ce.submit_job(p)
    assert exc.value.code == "ticket-mismatch"
    wait_terminal(ce, "twice")


def test_wrong_ce_url(ce):
    reply = reserve(ce, job_id="elsewhere")
    p = payload(reply, ["true"])
    moved = dataclasses.replace(p, ticket=dataclasses.replace(p.ticket, ce_url="http://other:1"))
    with pytest.raises(ServiceError) as exc:
        ce.submit_job(moved)
    assert exc.value.code == "invalid-argument"


@pytest.mark.parametrize("name", ["../x", "/etc/passwd", "a/b", ".."])
def test_unsafe_input_names(ce, name):
    reply = reserve(ce, job_id="unsafe")
    with pytest.raises(ServiceError):
        ce.submit_job(payload(reply, ["true"], [(name, b"")]))


# -- expiry -----------------------------------------------------------------------


def test_unused_reservation_expires(tmp_path):
    ce = make_ce(tmp_path / "ce", reservation_ttl_s=0.3)
    try:
        reply = reserve(ce, 2, job_id="late")
        assert ce.ledger.free == 2
        time.sleep(0.5)
        ce.expire_reservations()
        assert ce.ledger.free == 4
        with pytest.raises(ServiceError) as exc:
            ce.submit_job(payload(reply, ["true"]))
        assert exc.value.code in ("ticket-expired", "ticket-mismatch")
    finally:
        ce.container.shutdown()


def test_expired_submit_before_sweep(tmp_path):
    ce = make_ce(tmp_path / "ce", reservation_ttl_s=30)
    try:
        reply = reserve(ce, job_id="late2", ttl=0.2)
        time.sleep(0.3)
        with pytest.raises(ServiceError) as exc:
            ce.submit_job(payload(reply, ["true"]))
        assert exc.value.code == "ticket-expired"
    finally:
        ce.container.shutdown()


def test_ttl_is_min_of_ticket_and_ce(ce):
    reply = reserve(ce, job_id="short", ttl=5)
    entry = ce.db.get(reply["ticket"]["ticket_id"])
    assert entry.expires_at - entry.reserved_at == 5000


def test_expiry_keeps_aborted_state(tmp_path):
    ce = make_ce(tmp_path / "ce", reservation_ttl_s=0.2)
    try:
        reply = reserve(ce, job_id="ab")
        p = payload(reply, ["true"])
        with pytest.raises(ServiceError):
            ce.submit_job(dataclasses.replace(p, ticket=dataclasses.replace(p.ticket, ticket_id="f" * 32)))
        time.sleep(0.3)
        ce.expire_reservations()
        assert ce.ledger.free == 4
        assert ce.job_status("ab").state is JobState.ABORTED
    finally:
        ce.container.shutdown()


# -- durability -----------------------------------------------------------------------


def test_ticket_db_replay_and_torn_tail(tmp_path):
    path = tmp_path / "t.ndjson"
    db = TicketDb(path)
    db.add(TicketDbEntry("t1", "j1", 1, 0, 1, 10))
    db.add(TicketDbEntry("t2", "j2", 2, 0, 1, 10))
    db.consume("t1", 5)
    db.close()
    with open(path, "ab") as fh:
        fh.write(b'{"ticket_id":"t3","job_')
    db2 = TicketDb(path)
    assert db2.get("t1").consumed_at == 5
    assert db2.pending_slots() == 2
    assert "t3" not in db2
    assert path.read_bytes().endswith(b"\n")


def test_duplicate_ticket_in_file_is_an_error(tmp_path):
    path = tmp_path / "t.ndjson"
    line = wire.encode(TicketDbEntry("t1", "j1", 1, 0, 1, 10)) + b"\n"
    path.write_bytes(line + line)
    with pytest.raises(ValueError):
        TicketDb(path)


def test_restart_replays_state(tmp_path):
    root = tmp_path / "ce"
    ce = make_ce(root)
    reply = reserve(ce, 2, job_id="kept")
    done = reserve(ce, 1, job_id="ran")
    ce.submit_job(payload(done, ["true"]))
    wait_terminal(ce, "ran")
    before = ce.audit()
    port = int(ce.url.rsplit(":", 1)[1])
    ce.container.shutdown()

    ce2 = make_ce(root, port=port)
    try:
        assert ce2.audit() == before
        assert ce2.ledger.reserved == 2
        ce2.submit_job(payload(reply, ["true"]))
        assert wait_terminal(ce2, "kept").state is JobState.DONE
    finally:
        ce2.container.shutdown()


def test_restart_fails_unfinished_jobs(tmp_path):
    root = tmp_path / "ce"
    ce = make_ce(root)
    reply = reserve(ce, 1, job_id="orphan")
    ce.submit_job(payload(reply, [sys.executable, "-c", "import time; time.sleep(30)"]))
    time.sleep(0.3)
    ce.container.shutdown()  # kills the child; executor may or may not journal first
    ce2 = make_ce(root)
    try:
        job = ce2.job_status("orphan")
        assert job.state is JobState.FAILED and job.exit_code is not None
        assert ce2.ledger.running == 0 and ce2.ledger.free == 4
    finally:
        ce2.container.shutdown()


def test_sde_routes(ce):
    reserve(ce, 1)
    get = lambda n: wire.call("GET", f"{ce.url}/ce/sde/{n}")["value"]
    assert get("free_slots") == 3
    assert get("reserved_slots") == 1
    assert get("running_jobs") == 0
    assert get("last_operation") == "tkt_confirm:accepted"
    ops = wire.call("GET", f"{ce.url}/ce/oplog")["operations"]
    assert [o["op"] for o in ops] == ["tkt_confirm"]
