"""HTTP service: pipelines, runs, logs, approvals, webhooks, infra state.

All endpoints live under ``/api`` and speak JSON; errors are
``{"error": {"code", "message"}}``. The dashboard's static assets are
served at ``/``. Log delivery is pull-based: clients page through
``/api/runs/<id>/log?offset=N`` until ``complete`` turns true.
"""

from __future__ import annotations

import errno
import hmac
import http.server
import json
import logging
import mimetypes
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from . import dsl, executor, pipeline as pl, scm
from .iac import StateStore

log = logging.getLogger(__name__)

STATIC_DIR = Path(__file__).parent / "static"

FALLBACK_INDEX = """<!doctype html>
<html><head><title>flowline</title></head>
<body><h1>flowline</h1>
<p>The dashboard has not been built. The API lives under <code>/api</code>.</p>
</body></html>
"""


class ConfigInvalid(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class AddressInUse(Exception):
    pass


@dataclass
class ApiConfig:
    listen: str = "127.0.0.1:8080"
    config_dir: str = "."
    data_dir: str = "data"
    webhook_token: str = ""

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(":", 1)[1])


def load_config_dir(config_dir):
    """Parse every .fl document in `config_dir`.

    Returns (pipelines, targets). Pipeline documents are validated;
    infrastructure documents are checked for parseability only (they are
    applied by the infra commands, not the server).
    """
    config_dir = Path(config_dir)
    pipelines = {}
    targets = {}
    problems = []
    for path in sorted(config_dir.glob("*.fl")):
        try:
            doc = dsl.parse_source(path.read_text(encoding="utf-8"), str(path))
        except dsl.PositionedError as exc:
            problems.append(f"{path}:{exc}")
            continue
        keywords = {
            item.keyword for item in doc.items if isinstance(item, dsl.Block)
        }
        try:
            if "pipeline" in keywords:
                spec = pl.validate(doc, base_dir=path.parent)
                if spec.name in pipelines:
                    problems.append(f"{path}: duplicate pipeline '{spec.name}'")
                else:
                    pipelines[spec.name] = spec
            for item in doc.items:
                if isinstance(item, dsl.Block) and item.keyword == "target":
                    target = pl.parse_target(item)
                    if target.name in targets:
                        problems.append(f"{path}: duplicate target '{target.name}'")
                    else:
                        targets[target.name] = target
        except dsl.PositionedError as exc:
            problems.append(f"{path}:{exc}")
    if problems:
        raise ConfigInvalid(problems)
    return pipelines, targets


def _redact(value):
    if isinstance(value, dict):
        return {
            key: "(redacted)"
            if "password" in key.lower() and not isinstance(val, (dict, list))
            else _redact(val)
            for key, val in value.items()
        }
    if isinstance(value, list):
        return [_redact(item) for item in value]
    return value


class _HttpError(Exception):
    def __init__(self, status, code, message):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


class ApiHandler(http.server.BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "flowline"

    # route table filled in below the class
    ROUTES = []

    @property
    def service(self):
        return self.server.service

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        log.debug("%s - %s", self.address_string(), format % args)

    def _send_json(self, status, payload):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status, code, message):
        self._send_json(status, {"error": {"code": code, "message": message}})

    def _read_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > 1_000_000:
            raise _HttpError(400, "bad_request", "request body too large")
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            parsed = json.loads(raw)
        except ValueError:
            raise _HttpError(400, "bad_request", "request body is not valid JSON")
        if not isinstance(parsed, dict):
            raise _HttpError(400, "bad_request", "request body must be a JSON object")
        return parsed

    def _dispatch(self, method):
        parsed = urlparse(self.path)
        query = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
        try:
            for route_method, pattern, handler in self.ROUTES:
                if route_method != method:
                    continue
                match = pattern.fullmatch(parsed.path)
                if match:
                    handler(self, query, *match.groups())
                    return
            if method == "GET" and not parsed.path.startswith("/api"):
                self._serve_static(parsed.path)
                return
            self._send_error_json(404, "not_found", f"no such endpoint: {parsed.path}")
        except _HttpError as exc:
            self._send_error_json(exc.status, exc.code, exc.message)
        except executor.UnknownRun as exc:
            self._send_error_json(404, "unknown_run", f"no such run: {exc}")
        except executor.UnknownPipeline as exc:
            self._send_error_json(404, "unknown_pipeline", f"no such pipeline: {exc}")
        except executor.NotWaiting:
            self._send_error_json(
                409, "not_waiting", "run is not waiting for approval"
            )
        except BrokenPipeError:
            pass
        except Exception as exc:
            log.exception("handler failed for %s %s", method, self.path)
            self._send_error_json(500, "internal", str(exc))

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    # -- endpoint implementations ------------------------------------

    def _pipelines(self, query):
        payload = [
            {
                "name": spec.name,
                "stages": spec.stage_names(),
                "trigger": {
                    "poll": spec.trigger.poll,
                    "webhook": spec.trigger.webhook,
                    "interval_s": spec.trigger.interval_s,
                },
            }
            for spec in self.service.engine.pipelines.values()
        ]
        self._send_json(200, payload)

    def _pipeline_runs(self, query, name):
        if name not in self.service.engine.pipelines:
            raise executor.UnknownPipeline(name)
        limit = _int_param(query, "limit", default=50)
        self._send_json(200, self.service.engine.list_runs(name, limit))

    def _revision_from(self, body, spec):
        given = body.get("revision")
        if given is not None:
            if not isinstance(given, str) or not given:
                raise _HttpError(400, "bad_request", "revision must be a non-empty string")
            return scm.Revision(given)
        if spec.trigger.repo is None:
            raise _HttpError(
                400,
                "bad_request",
                "pipeline has no repo; supply {\"revision\": ...}",
            )
        try:
            return scm.head(spec.trigger.repo)
        except (scm.RepoUnreachable, scm.BranchNotFound) as exc:
            raise _HttpError(400, "bad_request", f"cannot resolve head: {exc}")

    def _trigger_run(self, query, name):
        engine = self.service.engine
        spec = engine.pipelines.get(name)
        if spec is None:
            raise executor.UnknownPipeline(name)
        body = self._read_body()
        revision = self._revision_from(body, spec)
        run, created = self.service.enqueue(name, revision, "manual")
        self._send_json(201 if created else 200, run.to_json_value())

    def _webhook(self, query, name):
        token = self.headers.get("X-Hook-Token", "")
        expected = self.service.config.webhook_token
        if not expected or not hmac.compare_digest(token, expected):
            raise _HttpError(401, "unauthorized", "missing or wrong X-Hook-Token")
        engine = self.service.engine
        spec = engine.pipelines.get(name)
        if spec is None:
            raise executor.UnknownPipeline(name)
        if not spec.trigger.webhook:
            raise _HttpError(400, "bad_request", f"pipeline '{name}' has no webhook trigger")
        body = self._read_body()
        revision = self._revision_from(body, spec)
        run, created = self.service.enqueue(name, revision, "webhook")
        self._send_json(201 if created else 200, run.to_json_value())

    def _run(self, query, run_id):
        self._send_json(200, self.service.engine.run_snapshot(run_id))

    def _run_log(self, query, run_id):
        offset = _int_param(query, "offset", default=0)
        limit = _int_param(query, "limit", default=1000)
        if offset < 0 or limit < 0:
            raise _HttpError(400, "bad_request", "offset and limit must be >= 0")
        events, next_offset, complete = self.service.engine.get_log(
            run_id, offset, limit
        )
        self._send_json(
            200, {"events": events, "next_offset": next_offset, "complete": complete}
        )

    def _approval(self, query, run_id):
        body = self._read_body()
        decision = body.get("decision")
        if decision not in ("approve", "reject"):
            raise _HttpError(
                400, "bad_request", "decision must be 'approve' or 'reject'"
            )
        by = body.get("by") or "anonymous"
        run = self.service.engine.resolve_approval(run_id, decision, str(by))
        self._send_json(200, run.to_json_value())

    def _infra_state(self, query):
        store = StateStore(self.service.engine.state_path)
        if not store.path.exists():
            raise _HttpError(404, "no_state", "no infrastructure state recorded")
        payload = store.load().to_json_value()
        if query.get("reveal") != "true":
            payload = _redact(payload)
        self._send_json(200, payload)

    def _metrics(self, query):
        pipeline_name = query.get("pipeline")
        engine = self.service.engine
        runs = engine.list_runs(pipeline_name)
        payload = [
            {"run_id": r["id"], "pipeline": r["pipeline"], **r["metrics"]}
            for r in reversed(runs)
            if r["metrics"] is not None
        ]
        self._send_json(200, payload)

    # -- static assets -------------------------------------------------

    def _serve_static(self, path):
        static_root = self.service.static_dir
        name = path.lstrip("/") or "index.html"
        file_path = None
        if static_root is not None:
            candidate = (static_root / name).resolve()
            if (
                str(candidate).startswith(str(static_root.resolve()) + "/")
                and candidate.is_file()
            ):
                file_path = candidate
        if file_path is None:
            if name == "index.html":
                body = FALLBACK_INDEX.encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            self._send_error_json(404, "not_found", f"no such file: {path}")
            return
        body = file_path.read_bytes()
        ctype = mimetypes.guess_type(str(file_path))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def _int_param(query, name, default):
    raw = query.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise _HttpError(400, "bad_request", f"{name} must be an integer")


ApiHandler.ROUTES = [
    ("GET", re.compile(r"/api/pipelines"), ApiHandler._pipelines),
    ("GET", re.compile(r"/api/pipelines/([^/]+)/runs"), ApiHandler._pipeline_runs),
    ("POST", re.compile(r"/api/pipelines/([^/]+)/runs"), ApiHandler._trigger_run),
    ("POST", re.compile(r"/api/webhooks/([^/]+)"), ApiHandler._webhook),
    ("GET", re.compile(r"/api/runs/([^/]+)/log"), ApiHandler._run_log),
    ("POST", re.compile(r"/api/runs/([^/]+)/approval"), ApiHandler._approval),
    ("GET", re.compile(r"/api/runs/([^/]+)"), ApiHandler._run),
    ("GET", re.compile(r"/api/infra/state"), ApiHandler._infra_state),
    ("GET", re.compile(r"/api/metrics/runs"), ApiHandler._metrics),
]


class _Server(http.server.ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class Service:
    """A running flowline service: engine + pollers + HTTP listener."""

    def __init__(self, config: ApiConfig, static_dir=STATIC_DIR):
        self.config = config
        self.static_dir = Path(static_dir) if static_dir else None
        pipelines, targets = load_config_dir(config.config_dir)
        webhook_pipelines = [
            name for name, spec in pipelines.items() if spec.trigger.webhook
        ]
        if webhook_pipelines and not config.webhook_token:
            raise ConfigInvalid(
                [
                    f"pipeline '{name}' enables a webhook trigger but no "
                    "webhook token is configured"
                    for name in webhook_pipelines
                ]
            )
        self.engine = executor.PipelineEngine(
            Path(config.data_dir),
            pipelines,
            targets,
            state_path=Path(config.data_dir) / "state.json",
        )
        self.pollers = []
        self._httpd = None
        self._thread = None
        self._stopped = threading.Event()

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def enqueue(self, name, revision, cause):
        return self.engine.enqueue_run(name, revision, cause)

    def start(self):
        try:
            self._httpd = _Server((self.config.host, self.config.port), ApiHandler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"address already in use: {self.config.listen}")
            raise
        self._httpd.service = self
        self.engine.start()
        for name, spec in self.engine.pipelines.items():
            if spec.trigger.poll and spec.trigger.repo is not None:
                poller_config = scm.PollerConfig(
                    spec.trigger.repo, spec.trigger.interval_s, name
                )
                poller = scm.Poller(
                    poller_config,
                    lambda revision, name=name: self.engine.enqueue(
                        name, revision, "poll"
                    ),
                )
                poller.start()
                self.pollers.append(poller)
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="flowline-http", daemon=True
        )
        self._thread.start()
        log.info("serving on %s", self.url)
        return self

    def stop(self):
        for poller in self.pollers:
            poller.stop(wait=False)
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.engine.stop()
        self._stopped.set()

    def wait(self):
        self._stopped.wait()


def serve(config: ApiConfig) -> Service:
    """Validate config, start pollers and the HTTP listener."""
    return Service(config).start()
