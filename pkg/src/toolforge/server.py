"""HTTP front end for the tool registry.

Every reply to ``/api/{name}`` is the two-key ``{"error", "response"}``
envelope, including failures; upstream trouble never becomes a 5xx.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .apihub import API_MISSING, BindError, RegistryExecutor, ToolRegistry
from .model import ApiCall, Observation, canonical_json

log = logging.getLogger(__name__)


def _handler_for(registry: ToolRegistry, executor: RegistryExecutor) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        # headers and body are separate writes; Nagle would stall keep-alive clients
        disable_nagle_algorithm = True

        def log_message(self, fmt: str, *args: Any) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, payload: Any) -> None:
            body = canonical_json(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _envelope(self, status: int, error: str, response: Any = "") -> None:
            self._send(status, Observation(error, response).to_dict())

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok"})
            elif self.path == "/specs":
                self._send(200, [s.to_dict() for s in registry])
            else:
                self._envelope(404, "Not found")

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not self.path.startswith("/api/"):
                self._envelope(404, "Not found")
                return
            name = self.path[len("/api/"):]
            if name not in registry:
                self._envelope(404, API_MISSING)
                return
            try:
                kwargs = json.loads(raw.decode("utf-8")) if raw.strip() else {}
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._envelope(400, "Invalid JSON body")
                return
            if not isinstance(kwargs, dict):
                self._envelope(400, "Request body must be a JSON object of keyword arguments")
                return
            try:
                call = ApiCall(name, kwargs)
            except (TypeError, ValueError) as exc:
                self._envelope(400, f"Invalid API Request: {exc}")
                return
            try:
                obs = executor(call)
            except Exception as exc:  # the envelope contract outranks error propagation
                log.exception("executor failed for %s", name)
                obs = Observation(f"Internal error: {type(exc).__name__}", "")
            self._send(200, obs.to_dict())

    return Handler


class RegistryServer:
    """A running registry service; use as a context manager or call ``close``."""

    def __init__(self, httpd: ThreadingHTTPServer):
        self.httpd = httpd
        self.thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self) -> "RegistryServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def make_server(registry: ToolRegistry, bind: tuple[str, int], executor: RegistryExecutor) -> ThreadingHTTPServer:
    if len(registry) == 0:
        raise ValueError("registry must not be empty")
    try:
        httpd = ThreadingHTTPServer(bind, _handler_for(registry, executor))
    except OSError as exc:
        raise BindError(exc.errno, f"cannot bind {bind[0]}:{bind[1]}: {exc.strerror}") from exc
    httpd.daemon_threads = True
    return httpd


def serve_registry(
    registry: ToolRegistry,
    bind: tuple[str, int] = ("127.0.0.1", 0),
    executor: RegistryExecutor | None = None,
) -> RegistryServer:
    """Start the service on a background thread. Port 0 picks a free port."""
    return RegistryServer(make_server(registry, bind, executor or RegistryExecutor(registry)))
