"""Process bootstrap shared by the four service entry points."""

from __future__ import annotations

import logging
import sys
import threading
from typing import Callable

from beryllium.container import Container

READY_PREFIX = "READY "


class Periodic:
    """Run ``fn`` every ``interval`` seconds on a daemon thread until stopped."""

    def __init__(self, interval: float, fn: Callable[[], object], name: str, log: logging.Logger):
        self.interval = interval
        self.fn = fn
        self.log = log
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)

    def start(self) -> Periodic:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.fn()
            except Exception:
                self.log.exception("periodic task %s failed", self._thread.name)


def configure_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    # each container filters its own logger at run time
    logging.getLogger("beryllium").setLevel(logging.DEBUG)


def serve(container: Container) -> int:
    """Announce the bound URL on stdout, then serve until admin shutdown."""
    print(f"{READY_PREFIX}{container.url}", flush=True)
    container.log.info("serving %s at %s", container.service_name, container.url)
    try:
        container.serve_forever()
    except KeyboardInterrupt:
        container.shutdown()
    return 0
