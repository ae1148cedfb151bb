"""Minimal hosting runtime embedded in every service process.

A ``Container`` owns an HTTP listener, a registry of factories and the
transient instances they create, per-instance service data, a runtime log
filter and a webhook notifier. Services mount their own routes next to the
admin/factory/instance routes every container exposes.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

import requests

from beryllium import wire
from beryllium.domain import ServiceDataValue, new_id, now_ms
from beryllium.errors import ServiceError

LOG_LEVELS = {
    "ERROR": logging.ERROR,
    "WARN": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
}
_LEVEL_NAMES = {v: k for k, v in LOG_LEVELS.items()}
_logger_ids = itertools.count(1)


class DropConnection(Exception):
    """Raised by a handler to close the connection without any reply."""


# -- service data ---------------------------------------------------------------


class ServiceData:
    """Named, queryable state values of one service or instance."""

    def __init__(self):
        self._lock = threading.Lock()
        self._values: dict[str, ServiceDataValue] = {}
        self._providers: dict[str, Callable[[], Any]] = {}

    def declare(self, name: str, initial: int | str = 0) -> None:
        with self._lock:
            if name in self._values or name in self._providers:
                raise ValueError(f"SDE {name!r} already declared")
            self._values[name] = ServiceDataValue(name, initial, now_ms())

    def provide(self, name: str, fn: Callable[[], Any]) -> None:
        """Declare an SDE computed on every read."""
        with self._lock:
            if name in self._values or name in self._providers:
                raise ValueError(f"SDE {name!r} already declared")
            self._providers[name] = fn

    def set(self, name: str, value: int | str) -> None:
        with self._lock:
            if name not in self._values:
                raise ServiceError("unknown-sde", name)
            self._values[name] = ServiceDataValue(name, value, now_ms())

    def incr(self, name: str, by: int = 1) -> int:
        with self._lock:
            cur = self._values[name].value
            self._values[name] = ServiceDataValue(name, cur + by, now_ms())
            return cur + by

    def update(self, **values: int | str) -> None:
        """Set several values in one step so readers never see a partial update."""
        with self._lock:
            at = now_ms()
            for name, value in values.items():
                if name not in self._values:
                    raise ServiceError("unknown-sde", name)
                self._values[name] = ServiceDataValue(name, value, at)

    def record(self, label: str, **counters: int) -> None:
        """Bump operations_count (and any extra counters) and set last_operation."""
        with self._lock:
            at = now_ms()
            for name, by in {"operations_count": 1, **counters}.items():
                cur = self._values[name].value
                self._values[name] = ServiceDataValue(name, cur + by, at)
            self._values["last_operation"] = ServiceDataValue("last_operation", label, at)

    def get(self, name: str) -> ServiceDataValue:
        with self._lock:
            if name in self._values:
                return self._values[name]
            fn = self._providers.get(name)
        if fn is None:
            raise ServiceError("unknown-sde", name)
        return ServiceDataValue(name, fn(), now_ms())

    def names(self) -> list[str]:
        with self._lock:
            return sorted([*self._values, *self._providers])

    def snapshot(self) -> dict[str, int | str]:
        return {n: self.get(n).value for n in self.names()}


def operation_data() -> ServiceData:
    sd = ServiceData()
    sd.declare("operations_count", 0)
    sd.declare("last_operation", "")
    return sd


# -- instances -----------------------------------------------------------------------


class InstanceState(str, enum.Enum):
    ACTIVE = "ACTIVE"
    INACTIVE = "INACTIVE"
    DESTROYED = "DESTROYED"


@dataclass
class ServiceInstance:
    instance_id: str
    service_name: str
    state: InstanceState = InstanceState.ACTIVE
    sde: ServiceData = field(default_factory=operation_data)
    impl: Any = None
    oplog: list[str] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def handle(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "service_name": self.service_name,
            "state": self.state.value,
        }


Factory = Callable[[ServiceInstance, dict], Any]


# -- notification ------------------------------------------------------------------


@dataclass
class DeliveryReport:
    queued: list[str]


class Notifier:
    """At-least-once webhook delivery.

    One worker per subscription keeps each subscriber's stream in the order
    events were queued; a dead subscriber never delays the others.
    """

    def __init__(
        self,
        *,
        backoff: tuple[float, ...] = (0.2, 0.4, 0.8),
        timeout: float = 1.0,
        log: logging.Logger | None = None,
    ):
        self.backoff = backoff
        self.timeout = timeout
        self.log = log or logging.getLogger(__name__)
        self._lock = threading.Lock()
        self._queues: dict[str, queue.Queue] = {}
        self._closed = False
        self.delivered = 0
        self.retries = 0
        self.failures: list[dict] = []

    def notify_listeners(self, event: dict, subscriptions) -> DeliveryReport:
        queued = []
        with self._lock:
            if self._closed:
                return DeliveryReport(queued)
            for sub in subscriptions:
                q = self._queues.get(sub.subscription_id)
                if q is None:
                    q = queue.Queue()
                    self._queues[sub.subscription_id] = q
                    threading.Thread(
                        target=self._worker,
                        args=(sub.subscription_id, q),
                        name=f"notify-{sub.subscription_id[:8]}",
                        daemon=True,
                    ).start()
                q.put((sub.callback_url, event))
                queued.append(sub.subscription_id)
        return DeliveryReport(queued)

    def drop(self, subscription_id: str) -> None:
        with self._lock:
            q = self._queues.pop(subscription_id, None)
        if q is not None:
            q.put(None)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            queues = list(self._queues.values())
            self._queues.clear()
        for q in queues:
            q.put(None)

    def flush(self, timeout: float = 10.0) -> bool:
        """Wait until every queued delivery has finished (or given up)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                pending = sum(q.unfinished_tasks for q in self._queues.values())
            if pending == 0:
                return True
            time.sleep(0.02)
        return False

    def _count(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def _deliver_once(self, url: str, event: dict) -> bool:
        try:
            resp = requests.post(url, data=wire.encode(event), timeout=self.timeout,
                                 headers={"Content-Type": "application/json"})
        except requests.RequestException:
            return False
        return 200 <= resp.status_code < 300

    def _worker(self, subscription_id: str, q: queue.Queue) -> None:
        while True:
            item = q.get()
            try:
                if item is None:
                    return
                url, event = item
                if self._deliver_once(url, event):
                    self._count("delivered")
                    continue
                for delay in self.backoff:
                    time.sleep(delay)
                    self._count("retries")
                    if self._deliver_once(url, event):
                        self._count("delivered")
                        break
                else:
                    self.log.warning("delivery to %s failed after retries", url)
                    self.failures.append(
                        {"subscription_id": subscription_id, "callback_url": url, "event": event}
                    )
            finally:
                q.task_done()


# -- routing and HTTP ---------------------------------------------------------------


@dataclass
class Route:
    method: str
    pattern: str
    regex: re.Pattern
    handler: Callable[..., Any]
    schema: wire.MessageSchema | None


def _compile(pattern: str) -> re.Pattern:
    rx = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern)
    return re.compile(f"^{rx}$")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.0"
    server_version = "beryllium"

    def _serve(self, method: str) -> None:
        container: Container = self.server.container  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            status, reply = container.handle(method, self.path, body)
        except DropConnection:
            self.close_connection = True
            return
        data = wire.encode(reply)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._serve("GET")

    def do_POST(self):
        self._serve("POST")

    def do_DELETE(self):
        self._serve("DELETE")

    def log_message(self, format, *args):
        pass


class _Server(ThreadingHTTPServer):
    daemon_threads = False
    block_on_close = True
    request_queue_size = 256
    allow_reuse_address = True


class Container:
    """Hosts one service: its routes, factories, instances and admin surface."""

    def __init__(self, service_name: str, *, host: str = "127.0.0.1", port: int = 0):
        self.service_name = service_name
        self.log = logging.getLogger(f"beryllium.{service_name}.{next(_logger_ids)}")
        self.log.setLevel(logging.INFO)
        self.notifier = Notifier(log=self.log)
        self._routes: list[Route] = []
        self._factories: dict[str, Factory] = {}
        self._instances: dict[str, ServiceInstance] = {}
        self._registry_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._started = time.monotonic()
        self._requests_served = 0
        self._shutdown_hooks: list[Callable[[], None]] = []
        self._shutting_down = threading.Event()
        self._stopped = threading.Event()
        self._server = _Server((host, port), _Handler)
        self._server.container = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None
        self._serving = False
        self._mount_core_routes()

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    # -- routes ----------------------------------------------------------

    def route(self, method: str, pattern: str):
        def deco(fn):
            self.add_route(method, pattern, fn)
            return fn

        return deco

    def add_route(self, method: str, pattern: str, handler: Callable[..., Any]) -> None:
        try:
            schema = wire.schema_for(method, pattern)
        except KeyError:
            schema = None
        self._routes.append(Route(method, pattern, _compile(pattern), handler, schema))

    def handle(self, method: str, path: str, body: bytes) -> tuple[int, dict]:
        path = path.split("?", 1)[0]
        if self._shutting_down.is_set():
            err = ServiceError("service-shutting-down", self.service_name)
            return err.status, err.to_dict()
        with self._stats_lock:
            self._requests_served += 1
        self.log.debug("request %s %s %s", method, path, body[:200])
        for r in self._routes:
            m = r.regex.match(path)
            if m is None or r.method != method:
                continue
            try:
                msg = wire.decode(body, r.schema)
                result = r.handler(msg, **m.groupdict())
            except ServiceError as exc:
                self.log.debug("reply %s %s -> %s", method, path, exc.reason)
                return exc.status, exc.to_dict()
            except DropConnection:
                raise
            except Exception:
                self.log.exception("handler failed: %s %s", method, path)
                return 500, {"error": "invalid-argument", "detail": "internal error"}
            status, reply = result if isinstance(result, tuple) else (200, result)
            self.log.debug("reply %s %s -> %d", method, path, status)
            return status, reply
        return 404, {"error": "invalid-argument", "detail": f"no route for {method} {path}"}

    # -- factories and instances -------------------------------------------------

    def register_factory(self, service_name: str, create: Factory) -> None:
        self._factories[service_name] = create

    def create_instance(self, factory: str, init_args: dict | None = None) -> ServiceInstance:
        create = self._factories.get(factory)
        if create is None:
            raise ServiceError("unknown-factory", factory)
        inst = ServiceInstance(instance_id=new_id(8), service_name=factory)
        inst.impl = create(inst, init_args or {})
        with self._registry_lock:
            self._instances[inst.instance_id] = inst
        return inst

    def get_instance(self, instance_id: str) -> ServiceInstance:
        with self._registry_lock:
            inst = self._instances.get(instance_id)
        if inst is None:
            raise ServiceError("unknown-instance", instance_id)
        return inst

    def destroy_instance(self, instance_id: str) -> None:
        with self._registry_lock:
            inst = self._instances.get(instance_id)
            if inst is None:
                raise ServiceError("unknown-instance", instance_id)
            if inst.state is InstanceState.DESTROYED:
                raise ServiceError("already-destroyed", instance_id)
            inst.state = InstanceState.DESTROYED

    def set_instance_active(self, instance_id: str, active: bool) -> None:
        with self._registry_lock:
            inst = self._instances.get(instance_id)
            if inst is None or inst.state is InstanceState.DESTROYED:
                raise ServiceError("unknown-instance", instance_id)
            inst.state = InstanceState.ACTIVE if active else InstanceState.INACTIVE

    def dispatch(self, instance_id: str, op: str, fn: Callable[[ServiceInstance], Any]) -> Any:
        """Run ``fn`` against an ACTIVE instance, serialized per instance.

        ``fn`` returns ``(result, label)``; the label (default ``op``) becomes
        the instance's last_operation.
        """
        inst = self.get_instance(instance_id)
        with inst.lock:
            if inst.state is InstanceState.DESTROYED:
                raise ServiceError("unknown-instance", instance_id)
            if inst.state is InstanceState.INACTIVE:
                raise ServiceError("instance-inactive", instance_id)
            result, label = fn(inst)
            label = label or op
            inst.oplog.append(label)
            inst.sde.record(label)
            return result

    def query_sde(self, instance_id: str, name: str) -> ServiceDataValue:
        inst = self.get_instance(instance_id)
        if inst.state is not InstanceState.ACTIVE:
            raise ServiceError(
                "unknown-instance" if inst.state is InstanceState.DESTROYED else "instance-inactive",
                instance_id,
            )
        return inst.sde.get(name)

    def instance_count(self) -> int:
        with self._registry_lock:
            return sum(1 for i in self._instances.values() if i.state is not InstanceState.DESTROYED)

    # -- admin -----------------------------------------------------------------

    def uptime_s(self) -> float:
        return round(time.monotonic() - self._started, 3)

    def log_level(self) -> str:
        return _LEVEL_NAMES.get(self.log.level, "INFO")

    def set_log_filter(self, level: str) -> None:
        if level not in LOG_LEVELS:
            raise ServiceError("invalid-argument", f"invalid-level: {level!r}")
        self.log.setLevel(LOG_LEVELS[level])

    def stats(self) -> dict:
        with self._registry_lock:
            instances = [i.handle() for i in self._instances.values()]
        with self._stats_lock:
            served = self._requests_served
        return {
            "service": self.service_name,
            "url": self.url,
            "uptime_s": self.uptime_s(),
            "instance_count": self.instance_count(),
            "requests_served": served,
            "log_level": self.log_level(),
            "instances": instances,
        }

    def on_shutdown(self, hook: Callable[[], None]) -> None:
        self._shutdown_hooks.append(hook)

    def _mount_core_routes(self) -> None:
        self.add_route("GET", "/admin/ping", lambda msg: {"alive": True, "uptime_s": self.uptime_s()})
        self.add_route("GET", "/admin/status", lambda msg: self.stats())

        def shutdown(msg):
            threading.Thread(target=self.shutdown, name="shutdown", daemon=True).start()
            return {"ok": True}

        self.add_route("POST", "/admin/shutdown", shutdown)

        def loglevel(msg):
            self.set_log_filter(msg["level"])
            return {"ok": True}

        self.add_route("POST", "/admin/loglevel", loglevel)

        def create(msg, service_name):
            init_args = msg.get("init_args") or {}
            if not isinstance(init_args, dict):
                raise ServiceError("invalid-argument", "init_args must be an object")
            return self.create_instance(service_name, init_args).handle()

        self.add_route("POST", "/factory/{service_name}", create)

        def destroy(msg, id):
            self.destroy_instance(id)
            return {"ok": True}

        self.add_route("DELETE", "/instance/{id}", destroy)

        def active(msg, id):
            if not isinstance(msg["active"], bool):
                raise ServiceError("invalid-argument", "active must be a boolean")
            self.set_instance_active(id, msg["active"])
            return {"ok": True}

        self.add_route("POST", "/instance/{id}/active", active)
        self.add_route(
            "GET", "/instance/{id}/sde/{name}", lambda msg, id, name: self.query_sde(id, name).to_dict()
        )

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> Container:
        """Serve on a background thread (in-process hosting)."""
        self._thread = threading.Thread(
            target=self.serve_forever, name=f"{self.service_name}-http", daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._serving = True
        try:
            self._server.serve_forever(poll_interval=0.1)
        finally:
            self._stopped.set()

    def shutdown(self) -> None:
        """Refuse new work, run shutdown hooks (flushes), stop the listener."""
        if self._shutting_down.is_set():
            return
        self._shutting_down.set()
        for hook in self._shutdown_hooks:
            try:
                hook()
            except Exception:
                self.log.exception("shutdown hook failed")
        self.notifier.close()
        if self._serving:
            self._server.shutdown()
        self._server.server_close()
        self._stopped.set()

    def wait_stopped(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)
