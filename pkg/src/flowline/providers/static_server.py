"""Static file HTTP server backing instances and ephemeral test envs.

GET only: URL paths map to files under the served root, 404 on miss,
``/__health`` answers 200. Runs either in-process (`StaticSite`) or as a
detached process (``python -m flowline.providers.static_server``) so a
provisioned instance outlives the CLI that created it.
"""

from __future__ import annotations

import argparse
import errno
import functools
import http.server
import os
import signal
import sys
import threading

from .base import PortUnavailable

HEALTH_PATH = "/__health"


class StaticFileHandler(http.server.SimpleHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self):
        if self.path == HEALTH_PATH:
            body = b"ok\n"
            self.send_response(200)
            self.send_header("Content-Type", "text/plain; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        super().do_GET()

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass


def make_server(root, host="127.0.0.1", port=0):
    handler = functools.partial(StaticFileHandler, directory=os.fspath(root))
    try:
        return http.server.ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        if exc.errno in (errno.EADDRINUSE, errno.EACCES):
            raise PortUnavailable(f"cannot bind {host}:{port}: {exc}") from exc
        raise


class StaticSite:
    """In-process static server on an auto-allocated (or fixed) port."""

    def __init__(self, root, host="127.0.0.1", port=0):
        self.root = root
        self.host = host
        self._server = make_server(root, host, port)
        self.port = self._server.server_address[1]
        self.addr = f"{host}:{self.port}"
        self.url = f"http://{self.addr}/"
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"static-{self.port}", daemon=True
        )
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowline-static-server")
    parser.add_argument("--root", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--port-file")
    parser.add_argument("--pid-file")
    args = parser.parse_args(argv)

    try:
        server = make_server(args.root, args.host, args.port)
    except PortUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    if args.pid_file:
        with open(args.pid_file, "w", encoding="utf-8") as fh:
            fh.write(str(os.getpid()) + "\n")
    if args.port_file:
        # Written after a successful bind: readers treat it as the ready signal.
        with open(args.port_file, "w", encoding="utf-8") as fh:
            fh.write(str(server.server_address[1]) + "\n")

    def _shutdown(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _shutdown)
    signal.signal(signal.SIGINT, _shutdown)
    server.serve_forever()
    server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
