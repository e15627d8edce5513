"""Minimal threaded HTTP server shared by every service in the package.

Request targets are passed through verbatim: TimeMap routes embed whole
URIs in the path ("/timemap/cdxj/http://example.com/") and nothing here
may normalize or decode them. Request logging records method, path, and
status only; headers and bodies never reach the log, so bearer tokens and
credentials cannot leak through logging configuration.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

logger = logging.getLogger(__name__)

_REASONS = {
    200: "OK",
    302: "Found",
    400: "Bad Request",
    401: "Unauthorized",
    404: "Not Found",
    405: "Method Not Allowed",
    406: "Not Acceptable",
    500: "Internal Server Error",
    508: "Loop Detected",
}


@dataclass(frozen=True)
class Request:
    method: str
    path: str
    headers: dict[str, str]
    body: bytes = b""

    def header(self, name: str, default: str | None = None) -> str | None:
        return self.headers.get(name.lower(), default)


@dataclass
class Response:
    status: int = 200
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    @classmethod
    def text(cls, status: int, text: str, content_type: str = "text/plain") -> "Response":
        return cls(
            status=status,
            headers=[("Content-Type", f"{content_type}; charset=utf-8")],
            body=text.encode("utf-8"),
        )


Handler = Callable[[Request], Response]


def _make_handler_class(service_name: str, handle: Handler):
    class _RequestHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "mementity"
        sys_version = ""

        def _dispatch(self, include_body: bool) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            request = Request(
                method=self.command,
                path=self.path,
                headers={k.lower(): v for k, v in self.headers.items()},
                body=body,
            )
            try:
                response = handle(request)
            except Exception:
                logger.exception("%s: handler failed for %s %s", service_name, self.command, self.path)
                response = Response.text(500, "internal error")
            self.log_request(response.status)
            self.send_response_only(response.status, _REASONS.get(response.status))
            names = {name.lower() for name, _ in response.headers}
            for name, value in response.headers:
                self.send_header(name, value)
            if "content-length" not in names:
                self.send_header("Content-Length", str(len(response.body)))
            self.end_headers()
            if include_body and response.body:
                self.wfile.write(response.body)

        def do_GET(self):
            self._dispatch(include_body=True)

        def do_POST(self):
            self._dispatch(include_body=True)

        def do_HEAD(self):
            self._dispatch(include_body=False)

        def do_OPTIONS(self):
            self._dispatch(include_body=True)

        def log_message(self, format, *args):  # noqa: A002 - stdlib signature
            logger.debug("%s: %s", service_name, format % args)

        def log_request(self, code="-", size="-"):
            logger.debug("%s: %s %s -> %s", service_name, self.command, self.path, code)

    return _RequestHandler


class HttpService:
    """One handler function behind a ThreadingHTTPServer.

    Port 0 (the default) binds an ephemeral port, readable as ``.port``
    after construction, so topologies of many services can start without
    port coordination.
    """

    def __init__(self, handler: Handler, *, name: str = "service",
                 host: str = "127.0.0.1", port: int = 0):
        self.name = name
        self._server = ThreadingHTTPServer((host, port), _make_handler_class(name, handler))
        self._server.daemon_threads = True
        # Never wait for in-flight handlers on close; a simulated-timeout
        # handler may be holding its thread for many seconds by design.
        self._server.block_on_close = False
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "HttpService":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name=f"httpd-{self.name}",
            daemon=True,
        )
        self._thread.start()
        logger.info("%s listening on %s", self.name, self.base_url)
        return self

    def stop(self) -> None:
        if self._thread is None:
            return
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
        self._thread = None

    def __enter__(self) -> "HttpService":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


__all__ = ["Handler", "HttpService", "Request", "Response"]
