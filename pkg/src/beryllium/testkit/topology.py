"""Boot, fault and tear down whole service constellations on loopback.

``spawn_topology`` starts an L&B, an index, N CEs and a broker, either as
separate processes (``mode="process"``, the default) or as containers on
threads of the calling process (``mode="thread"``, fast, no kill support).
"""

from __future__ import annotations

import json
import os
import queue
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from beryllium import broker as broker_mod
from beryllium import ce as ce_mod
from beryllium import index as index_mod
from beryllium import lnb as lnb_mod
from beryllium import wire
from beryllium.errors import ServiceError, TransportError
from beryllium.runtime import READY_PREFIX
from beryllium.testkit.proxy import RecordingProxy

STARTUP_TIMEOUT_S = 10.0
FAULTS = frozenset({"always-reject", "drop-confirms"})
_MODULES = {"lnb": lnb_mod, "index": index_mod, "broker": broker_mod, "ce": ce_mod}


class TopologyError(RuntimeError):
    pass


@dataclass
class CeSpec:
    slots: int
    ce_id: str | None = None
    tags: list[str] = field(default_factory=list)
    faults: list[str] = field(default_factory=list)


@dataclass
class TopologySpec:
    ces: list[CeSpec]
    heartbeat_ttl_s: float = index_mod.DEFAULT_HEARTBEAT_TTL_S
    heartbeat_interval_s: float | None = None
    reservation_ttl_s: float = ce_mod.DEFAULT_RESERVATION_TTL_S
    ticket_ttl_s: float = broker_mod.DEFAULT_TICKET_TTL_S
    job_wall_limit_s: float = ce_mod.DEFAULT_WALL_LIMIT_S
    max_rounds: int = broker_mod.DEFAULT_MAX_ROUNDS
    proxy: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> TopologySpec:
        d = dict(d)
        ces = [CeSpec(**c) for c in d.pop("ces")]
        return cls(ces=ces, **d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> TopologySpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def ce_ids(self) -> list[str]:
        return [c.ce_id or f"ce-{i}" for i, c in enumerate(self.ces)]

    def validate(self) -> None:
        ids = self.ce_ids()
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise TopologyError(f"duplicate ce_id(s) {dupes}")
        for c in self.ces:
            unknown = set(c.faults) - FAULTS
            if unknown:
                raise TopologyError(f"unknown fault(s) {sorted(unknown)}")
            if c.slots < 1:
                raise TopologyError("CE slots must be >= 1")

    @property
    def effective_heartbeat_interval_s(self) -> float:
        if self.heartbeat_interval_s is not None:
            return self.heartbeat_interval_s
        return min(3.0, self.heartbeat_ttl_s / 3)


# -- service handles ---------------------------------------------------------------


class ServiceHandle:
    def __init__(self, name: str, kind: str, argv: list[str]):
        self.name = name
        self.kind = kind
        self.argv = argv
        self.url = ""

    @property
    def port(self) -> int:
        return int(self.url.rsplit(":", 1)[1])

    def ping(self, timeout: float = 1.0) -> bool:
        try:
            return bool(wire.call("GET", f"{self.url}/admin/ping", timeout=timeout).get("alive"))
        except (TransportError, ServiceError):
            return False


class ProcessHandle(ServiceHandle):
    def __init__(self, name: str, kind: str, argv: list[str], log_path: Path):
        super().__init__(name, kind, argv)
        self.log_path = log_path
        self.proc: subprocess.Popen | None = None

    def start(self, port: int = 0) -> ProcessHandle:
        cmd = [sys.executable, "-m", f"beryllium.{self.kind}", "--port", str(port), *self.argv]
        log = open(self.log_path, "ab")
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=log,
                                     stdin=subprocess.DEVNULL, text=True)
        log.close()
        lines: queue.Queue = queue.Queue()
        threading.Thread(target=lambda: lines.put(self.proc.stdout.readline()), daemon=True).start()
        try:
            line = lines.get(timeout=STARTUP_TIMEOUT_S)
        except queue.Empty:
            self.kill()
            raise TopologyError(f"startup-timeout: {self.name}") from None
        if not line.startswith(READY_PREFIX):
            self.kill()
            raise TopologyError(f"{self.name} failed to start; see {self.log_path}")
        self.url = line[len(READY_PREFIX):].strip()
        return self

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def kill(self, sig: int = signal.SIGKILL) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.send_signal(sig)
            self.proc.wait(timeout=10)

    def restart(self) -> ProcessHandle:
        """Start again on the same port, so stored URLs stay valid."""
        if self.alive():
            raise TopologyError(f"{self.name} is still running")
        return self.start(self.port)

    def stop(self) -> None:
        if not self.alive():
            return
        self.proc.terminate()
        try:
            self.proc.wait(timeout=3)
        except subprocess.TimeoutExpired:
            self.kill()

    def logs(self) -> str:
        try:
            return self.log_path.read_text(errors="replace")
        except FileNotFoundError:
            return ""


class ThreadHandle(ServiceHandle):
    def __init__(self, name: str, kind: str, argv: list[str]):
        super().__init__(name, kind, argv)
        self.service = None

    def start(self, port: int = 0) -> ThreadHandle:
        mod = _MODULES[self.kind]
        args = mod.build_parser().parse_args(["--port", str(port), *self.argv])
        self.service = mod.create(args)
        self.service.container.start()
        self.url = self.service.container.url
        return self

    def alive(self) -> bool:
        return self.service is not None and not self.service.container.wait_stopped(0)

    def kill(self, sig: int = signal.SIGKILL) -> None:
        raise TopologyError("thread-mode services cannot be killed; use mode='process'")

    def stop(self) -> None:
        if self.service is not None:
            self.service.container.shutdown()

    def logs(self) -> str:
        return ""


# -- topology ----------------------------------------------------------------------


class Topology:
    def __init__(self, spec: TopologySpec, workdir: Path, mode: str):
        self.spec = spec
        self.workdir = workdir
        self.mode = mode
        self.services: dict[str, ServiceHandle] = {}
        self.proxies: dict[str, RecordingProxy] = {}

    # urls as clients see them (through the proxies when enabled)
    @property
    def lnb_url(self) -> str:
        return self.services["lnb"].url

    @property
    def index_url(self) -> str:
        return self.proxies["index"].url if "index" in self.proxies else self.services["index"].url

    @property
    def broker_url(self) -> str:
        return self.proxies["broker"].url if "broker" in self.proxies else self.services["broker"].url

    def ce(self, ce_id: str) -> ServiceHandle:
        return self.services[ce_id]

    @property
    def ce_urls(self) -> dict[str, str]:
        return {ce_id: self.services[ce_id].url for ce_id in self.spec.ce_ids()}

    def _handle(self, name: str, kind: str, argv: list[str]) -> ServiceHandle:
        if self.mode == "process":
            h = ProcessHandle(name, kind, argv, self.workdir / f"{name}.log")
        else:
            h = ThreadHandle(name, kind, argv)
        self.services[name] = h
        return h

    def boot(self) -> Topology:
        spec = self.spec
        self._handle("lnb", "lnb", ["--log-path", str(self.workdir / "lnb" / "events.ndjson")]).start()
        self._handle("index", "index", ["--heartbeat-ttl-s", str(spec.heartbeat_ttl_s)]).start()
        if spec.proxy:
            self.proxies["index"] = RecordingProxy(self.services["index"].url).start()
        for ce_id, c in zip(spec.ce_ids(), spec.ces):
            argv = [
                "--ce-id", ce_id,
                "--slots", str(c.slots),
                "--tags", ",".join(c.tags),
                "--index-url", self.index_url,
                "--lnb-url", self.lnb_url,
                "--workdir-root", str(self.workdir / ce_id),
                "--reservation-ttl-s", str(spec.reservation_ttl_s),
                "--job-wall-limit-s", str(spec.job_wall_limit_s),
                "--heartbeat-interval-s", str(spec.effective_heartbeat_interval_s),
            ]
            argv += [f"--{f}" for f in c.faults]
            self._handle(ce_id, "ce", argv).start()
        self._handle("broker", "broker", [
            "--index-url", self.index_url,
            "--lnb-url", self.lnb_url,
            "--max-rounds", str(spec.max_rounds),
            "--ticket-ttl-s", str(spec.ticket_ttl_s),
        ]).start()
        if spec.proxy:
            self.proxies["broker"] = RecordingProxy(self.services["broker"].url).start()
        self.wait_registered(spec.ce_ids())
        return self

    def query_index(self, min_free_slots: int = 0, required_tags=()) -> list[dict]:
        reply = wire.call("POST", f"{self.services['index'].url}/index/query",
                          {"min_free_slots": min_free_slots, "required_tags": sorted(required_tags)})
        return reply["resources"]

    def wait_registered(self, ce_ids, timeout: float = STARTUP_TIMEOUT_S) -> None:
        want = set(ce_ids)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                if want <= {d["ce_id"] for d in self.query_index()}:
                    return
            except (TransportError, ServiceError):
                pass
            time.sleep(0.05)
        raise TopologyError(f"startup-timeout: CEs {sorted(want)} never registered")

    def kill(self, name: str) -> None:
        self.services[name].kill()

    def restart(self, name: str) -> ServiceHandle:
        return self.services[name].restart()

    def teardown(self) -> dict[str, str]:
        for p in self.proxies.values():
            p.stop()
        for name in reversed(list(self.services)):
            self.services[name].stop()
        return {name: h.logs() for name, h in self.services.items()}

    def __enter__(self) -> Topology:
        return self

    def __exit__(self, *exc) -> None:
        self.teardown()


def spawn_topology(spec: TopologySpec | dict, *, workdir: str | os.PathLike | None = None,
                   mode: str = "process") -> Topology:
    if isinstance(spec, dict):
        spec = TopologySpec.from_dict(spec)
    spec.validate()
    if mode not in ("process", "thread"):
        raise ValueError(f"unknown mode {mode!r}")
    root = Path(workdir) if workdir is not None else Path(tempfile.mkdtemp(prefix="beryllium-"))
    root.mkdir(parents=True, exist_ok=True)
    topo = Topology(spec, root, mode)
    try:
        return topo.boot()
    except BaseException:
        topo.teardown()
        raise
