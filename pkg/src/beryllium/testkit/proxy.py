"""Transparent recording HTTP relay placed in front of a service."""

from __future__ import annotations

import http.client
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from beryllium.wire import payload_keys_in


@dataclass(frozen=True)
class CapturedMessage:
    method: str
    path: str
    request_body: bytes
    status: int
    response_body: bytes

    def bodies(self):
        for raw in (self.request_body, self.response_body):
            if not raw:
                continue
            try:
                yield json.loads(raw)
            except ValueError:
                yield raw.decode("utf-8", "replace")

    def payload_keys(self) -> set[str]:
        found: set[str] = set()
        for body in self.bodies():
            found |= payload_keys_in(body)
        return found


class RecordingProxy:
    """Relays every request byte-for-byte to ``target_url`` and keeps a copy."""

    def __init__(self, target_url: str, host: str = "127.0.0.1", port: int = 0):
        target = urlsplit(target_url)
        self.target_host = target.hostname
        self.target_port = target.port or 80
        self._lock = threading.Lock()
        self._captured: list[CapturedMessage] = []
        proxy = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.0"

            def _relay(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                conn = http.client.HTTPConnection(proxy.target_host, proxy.target_port, timeout=30)
                try:
                    headers = {k: v for k, v in self.headers.items()
                               if k.lower() not in ("host", "connection")}
                    conn.request(self.command, self.path, body=body or None, headers=headers)
                    resp = conn.getresponse()
                    status, reply = resp.status, resp.read()
                    content_type = resp.getheader("Content-Type")
                except OSError:
                    status, reply, content_type = 502, b"", None
                finally:
                    conn.close()
                proxy._record(CapturedMessage(self.command, self.path, body, status, reply))
                self.send_response(status)
                if content_type:
                    self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(reply)))
                self.end_headers()
                self.wfile.write(reply)

            do_GET = do_POST = do_DELETE = _relay

            def log_message(self, format, *args):
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._server.request_queue_size = 256
        self._thread = threading.Thread(target=self._server.serve_forever, name="proxy", daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _record(self, msg: CapturedMessage) -> None:
        with self._lock:
            self._captured.append(msg)

    @property
    def captured(self) -> list[CapturedMessage]:
        with self._lock:
            return list(self._captured)

    def messages_with_payload_keys(self) -> list[CapturedMessage]:
        return [m for m in self.captured if m.payload_keys()]

    def start(self) -> RecordingProxy:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def recording_proxy(target_url: str) -> RecordingProxy:
    return RecordingProxy(target_url).start()
