"""Tiny HTTP front-end shared by the pusher and the collect agent.

Both daemons expose a pure ``handle(method, path, query)`` function that
returns ``(status, body)``; this module only puts it on a socket.
"""

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from . import __version__
from .errors import BindFailure

log = logging.getLogger(__name__)


def split_address(addr, default_port):
    host, _, port = str(addr).rpartition(":")
    if not host:
        return port or "127.0.0.1", default_port
    return host, int(port)


def query_params(raw: str) -> dict:
    return {k: v[-1] for k, v in parse_qs(raw, keep_blank_values=True).items()}


def _make_handler(app):
    class Handler(BaseHTTPRequestHandler):
        server_version = f"shv/{__version__}"

        def _dispatch(self, method):
            parts = urlsplit(self.path)
            try:
                status, body = app(method, parts.path, query_params(parts.query))
            except Exception:  # keep the server alive
                log.exception("REST handler failed for %s %s", method, self.path)
                status, body = 500, "internal error\n"
            data = body.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "text/plain; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                self.rfile.read(length)
            self._dispatch("POST")

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

    return Handler


class RestServer:
    def __init__(self, app, host="127.0.0.1", port=0):
        try:
            self.httpd = ThreadingHTTPServer((host, port), _make_handler(app))
        except OSError as exc:
            raise BindFailure(f"cannot bind REST server to {host}:{port}: {exc}") from exc
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def port(self):
        return self.httpd.server_address[1]

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="rest", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join()
