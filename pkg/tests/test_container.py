import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from beryllium import wire
from beryllium.container import Container, InstanceState, Notifier, ServiceData
from beryllium.domain import Subscription
from beryllium.errors import ServiceError


class Receiver:
    """Webhook sink. ``stall`` is how long to sit on each of the first N requests."""

    def __init__(self, stall: float = 0.0, stall_count: int = 0, fail_count: int = 0):
        self.bodies: list[dict] = []
        self.stall, self.stall_count, self.fail_count = stall, stall_count, fail_count
        self.hits = 0
        lock = threading.Lock()
        outer = self

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with lock:
                    outer.hits += 1
                    n = outer.hits
                    outer.bodies.append(body)
                if n <= outer.stall_count:
                    time.sleep(outer.stall)
                code = 500 if n <= outer.fail_count else 200
                self.send_response(code)
                self.send_header("Content-Length", "2")
                self.end_headers()
                self.wfile.write(b"{}")

            def log_message(self, *a):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.server.daemon_threads = True
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/cb"

    def unique(self) -> list[dict]:
        seen, out = set(), []
        for b in self.bodies:
            if b["seq"] not in seen:
                seen.add(b["seq"])
                out.append(b)
        return out

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def container():
    c = Container("echo")
    c.register_factory("echo", lambda inst, args: dict(args))
    c.start()
    yield c
    c.shutdown()


def test_create_and_destroy(container):
    inst = container.create_instance("echo", {"x": 1})
    assert container.instance_count() == 1
    assert inst.impl == {"x": 1}
    container.destroy_instance(inst.instance_id)
    assert container.instance_count() == 0
    with pytest.raises(ServiceError) as exc:
        container.destroy_instance(inst.instance_id)
    assert exc.value.code == "already-destroyed"


def test_unknown_factory_and_instance(container):
    with pytest.raises(ServiceError) as exc:
        container.create_instance("nope")
    assert exc.value.code == "unknown-factory"
    with pytest.raises(ServiceError) as exc:
        container.get_instance("missing")
    assert exc.value.code == "unknown-instance"


def test_factory_over_http(container):
    reply = wire.call("POST", f"{container.url}/factory/echo", {"init_args": {"a": 2}})
    assert reply["state"] == "ACTIVE"
    assert container.get_instance(reply["instance_id"]).impl == {"a": 2}
    wire.call("DELETE", f"{container.url}/instance/{reply['instance_id']}")
    with pytest.raises(ServiceError) as exc:
        wire.call("DELETE", f"{container.url}/instance/{reply['instance_id']}")
    assert exc.value.code == "already-destroyed"


def test_query_sde_reports_operations(container):
    inst = container.create_instance("echo")
    assert container.query_sde(inst.instance_id, "operations_count").value == 0
    container.dispatch(inst.instance_id, "poke", lambda i: (None, "poke:ok"))
    container.dispatch(inst.instance_id, "poke", lambda i: (None, None))
    sde = wire.call("GET", f"{container.url}/instance/{inst.instance_id}/sde/operations_count")
    assert sde["value"] == 2
    last = container.query_sde(inst.instance_id, "last_operation")
    assert last.value == "poke" == inst.oplog[-1]
    with pytest.raises(ServiceError) as exc:
        container.query_sde(inst.instance_id, "bogus")
    assert exc.value.code == "unknown-sde"


def test_deactivate_blocks_dispatch(container):
    inst = container.create_instance("echo")
    wire.call("POST", f"{container.url}/instance/{inst.instance_id}/active", {"active": False})
    assert inst.state is InstanceState.INACTIVE
    with pytest.raises(ServiceError) as exc:
        container.dispatch(inst.instance_id, "op", lambda i: (1, None))
    assert exc.value.code == "instance-inactive"
    container.set_instance_active(inst.instance_id, True)
    assert container.dispatch(inst.instance_id, "op", lambda i: (1, None)) == 1


def test_dispatch_is_serialized_per_instance(container):
    inst = container.create_instance("echo")
    inside, overlap = [0], [False]

    def op(i):
        inside[0] += 1
        if inside[0] > 1:
            overlap[0] = True
        time.sleep(0.01)
        inside[0] -= 1
        return None, None

    threads = [threading.Thread(target=container.dispatch, args=(inst.instance_id, "op", op)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not overlap[0]
    assert inst.sde.get("operations_count").value == 8


def test_ping_and_status(container):
    assert wire.call("GET", f"{container.url}/admin/ping")["alive"] is True
    status = wire.call("GET", f"{container.url}/admin/status")
    assert status["service"] == "echo" and status["log_level"] == "INFO"


def test_unknown_route_is_404(container):
    with pytest.raises(ServiceError) as exc:
        wire.call("GET", f"{container.url}/nowhere")
    assert exc.value.code == "invalid-argument"


def test_log_filter_at_runtime(container, caplog):
    caplog.set_level(logging.DEBUG, logger="beryllium")
    wire.call("GET", f"{container.url}/admin/ping")
    assert not [r for r in caplog.records if r.name == container.log.name and r.levelno == logging.DEBUG]
    wire.call("POST", f"{container.url}/admin/loglevel", {"level": "DEBUG"})
    caplog.clear()
    wire.call("GET", f"{container.url}/admin/ping")
    assert [r for r in caplog.records if r.name == container.log.name and r.levelno == logging.DEBUG]
    wire.call("POST", f"{container.url}/admin/loglevel", {"level": "ERROR"})
    caplog.clear()
    wire.call("GET", f"{container.url}/admin/ping")
    assert not [r for r in caplog.records if r.name == container.log.name]


def test_bad_log_level(container):
    with pytest.raises(ServiceError) as exc:
        wire.call("POST", f"{container.url}/admin/loglevel", {"level": "BOGUS"})
    assert exc.value.code == "invalid-argument"
    assert "invalid-level" in exc.value.detail


def test_shutdown_over_http_stops_service():
    c = Container("echo").start()
    wire.call("POST", f"{c.url}/admin/shutdown")
    assert c.wait_stopped(5)


def test_shutdown_runs_hooks_once():
    c = Container("echo").start()
    calls = []
    c.on_shutdown(lambda: calls.append(1))
    c.shutdown()
    c.shutdown()
    assert calls == [1]


def test_service_data_update_is_atomic():
    sd = ServiceData()
    sd.declare("a", 0)
    sd.declare("b", 0)
    sd.update(a=1, b=2)
    assert sd.snapshot() == {"a": 1, "b": 2}
    with pytest.raises(ServiceError):
        sd.update(a=3, c=1)
    with pytest.raises(ValueError):
        sd.declare("a")


# -- notifier -----------------------------------------------------------------------


def _subs(*receivers):
    return [Subscription(f"s{i}", "all", r.url) for i, r in enumerate(receivers)]


def test_two_subscribers_each_get_one_copy():
    r1, r2 = Receiver(), Receiver()
    n = Notifier()
    try:
        report = n.notify_listeners({"seq": 1, "job_id": "j"}, _subs(r1, r2))
        assert report.queued == ["s0", "s1"]
        assert n.flush(5)
        assert [b["seq"] for b in r1.bodies] == [1]
        assert [b["seq"] for b in r2.bodies] == [1]
        assert n.delivered == 2 and n.retries == 0
    finally:
        n.close()
        r1.close()
        r2.close()


def test_stalled_ack_is_retried_and_deduplicated():
    # first POST stalls past the 1 s delivery timeout, so the sender retries
    r = Receiver(stall=1.5, stall_count=1)
    n = Notifier()
    try:
        n.notify_listeners({"seq": 1, "job_id": "j"}, _subs(r))
        n.notify_listeners({"seq": 2, "job_id": "j"}, _subs(r))
        assert n.flush(10)
        time.sleep(0.6)
        assert n.retries >= 1
        assert len(r.bodies) >= 3
        assert [b["seq"] for b in r.unique()] == [1, 2]
        assert n.failures == []
    finally:
        n.close()
        r.close()


def test_failing_subscriber_gives_up_after_retries():
    r = Receiver(fail_count=100)
    n = Notifier(backoff=(0.01, 0.01, 0.01))
    try:
        n.notify_listeners({"seq": 1}, _subs(r))
        assert n.flush(5)
        assert r.hits == 4
        assert n.retries == 3
        assert len(n.failures) == 1
    finally:
        n.close()
        r.close()


def test_zero_subscribers_is_a_no_op():
    n = Notifier()
    assert n.notify_listeners({"seq": 1}, []).queued == []
    assert n.flush(1)
    assert n.delivered == 0
    n.close()
