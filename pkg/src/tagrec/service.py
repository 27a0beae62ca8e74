"""HTTP service: judge annotation API, agreement metrics, pipeline
runs, and static console assets.

Plain stdlib threading server; the judge buffer's single-writer lock
serializes verdict writes while reads stay concurrent.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .config import PipelineConfig
from .errors import TagrecError, ValidationError
from .gateway import Task
from .judge import (DEFAULT_SCHEMAS, AgreementMetrics, JudgeBuffer,
                    buffer_agreement, drift_check, make_verdict)
from .pipeline import Pipeline

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json; charset=utf-8",
    ".map": "application/json; charset=utf-8",
    ".svg": "image/svg+xml",
}


class JudgeService:
    def __init__(self, cfg: PipelineConfig, buffer: JudgeBuffer,
                 pipeline: Pipeline | None = None,
                 baseline: AgreementMetrics | None = None):
        self.cfg = cfg
        self.buffer = buffer
        self.pipeline = pipeline
        self.baseline = baseline
        self.schemas = DEFAULT_SCHEMAS
        self.console_dir = Path(cfg.console_dir) if cfg.console_dir else None

    # -- API payloads --------------------------------------------------------

    def queue_payload(self, task: str | None, limit: int | None) -> dict:
        task_filter = Task(task) if task else None
        samples = self.buffer.pending_human(task_filter, limit)
        out = []
        for sample in samples:
            schemas = self.schemas[sample.task]
            out.append({
                "sample_id": sample.sample_id,
                "task": sample.task.value,
                "payload": sample.payload,
                "round": sample.round,
                "created_at": sample.created_at,
                "criteria": [
                    {"name": schema.name,
                     "labels": list(schema.labels),
                     "passing": sorted(schema.passing),
                     "help": schema.help_text}
                    for schema in schemas
                ],
            })
        return {"samples": out}

    def submit_verdict(self, body: dict) -> dict:
        sample_id = body.get("sample_id")
        if not isinstance(sample_id, str) or not sample_id:
            raise FieldError("sample_id", "sample_id is required")
        criteria = body.get("criteria")
        if not isinstance(criteria, dict) or not criteria:
            raise FieldError("criteria", "criteria object is required")
        try:
            sample = self.buffer.get(sample_id)
        except ValidationError:
            raise FieldError("sample_id", f"unknown sample {sample_id!r}",
                             status=404) from None
        schemas = self.schemas[sample.task]
        by_name = {schema.name: schema for schema in schemas}
        for name in by_name:
            if name not in criteria:
                raise FieldError(name, f"criterion {name!r} missing a label")
        for name, label in criteria.items():
            if name not in by_name:
                raise FieldError(name, f"unknown criterion {name!r}")
            if label not in by_name[name].labels:
                raise FieldError(name, f"label {label!r} not in scheme "
                                       f"{list(by_name[name].labels)}")
        verdict = make_verdict(schemas, {str(k): str(v) for k, v in criteria.items()})
        self.buffer.record_human_verdict(sample_id, verdict)
        return {"ok": True, "sample_id": sample_id, "pass": verdict.passed}

    def metrics_payload(self) -> dict:
        tasks = {}
        for task in Task:
            metrics = buffer_agreement(self.buffer, task)
            tasks[task.value] = metrics.to_wire() if metrics else None
        drift = None
        if self.baseline is not None:
            window = None
            for task in Task:
                window = buffer_agreement(self.buffer, task)
                if window is not None:
                    break
            if window is not None:
                drift = drift_check(window, self.baseline,
                                    delta=self.cfg.judge_delta).to_wire()
        return {"tasks": tasks, "drift": drift, "delta": self.cfg.judge_delta,
                "gate": self.cfg.judge_gate}

    def run_payload(self, user_id: str) -> dict:
        if self.pipeline is None:
            raise FieldError("pipeline", "pipeline is not configured", status=503)
        return self.pipeline.run(user_id).to_wire()

    # -- static assets ---------------------------------------------------------

    def asset(self, path: str) -> tuple[bytes, str] | None:
        name = path.lstrip("/") or "index.html"
        if self.console_dir is not None:
            candidate = (self.console_dir / name).resolve()
            if candidate.is_file() and \
                    str(candidate).startswith(str(self.console_dir.resolve())):
                content_type = _CONTENT_TYPES.get(candidate.suffix,
                                                  "application/octet-stream")
                return candidate.read_bytes(), content_type
            return None
        try:
            packaged = resources.files("tagrec") / "static" / name
            data = packaged.read_bytes()
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            return None
        return data, _CONTENT_TYPES.get(Path(name).suffix, "application/octet-stream")


class FieldError(TagrecError):
    """Request rejection with a field-level message."""

    def __init__(self, field: str, message: str, status: int = 400):
        super().__init__(message)
        self.field = field
        self.status = status


def make_handler(service: JudgeService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet test output
            pass

        def _send(self, status: int, payload: dict | bytes,
                  content_type: str = "application/json; charset=utf-8") -> None:
            body = payload if isinstance(payload, bytes) else \
                json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, message: str, field: str | None = None) -> None:
            payload = {"error": message}
            if field:
                payload["field"] = field
            self._send(status, payload)

        def do_GET(self) -> None:
            parsed = urlparse(self.path)
            try:
                if parsed.path == "/api/queue":
                    params = parse_qs(parsed.query)
                    task = params.get("task", [None])[0]
                    limit_raw = params.get("limit", [None])[0]
                    limit = int(limit_raw) if limit_raw else None
                    self._send(200, service.queue_payload(task, limit))
                elif parsed.path == "/api/metrics":
                    self._send(200, service.metrics_payload())
                else:
                    asset = service.asset(parsed.path)
                    if asset is None:
                        self._error(404, f"no such path {parsed.path}")
                    else:
                        data, content_type = asset
                        self._send(200, data, content_type)
            except ValueError as err:
                self._error(400, str(err))
            except TagrecError as err:
                self._error(500, str(err))

        def do_POST(self) -> None:
            parsed = urlparse(self.path)
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8")) if raw.strip() else {}
            except json.JSONDecodeError:
                self._error(400, "request body is not valid JSON", field="body")
                return
            try:
                if parsed.path == "/api/verdict":
                    self._send(200, service.submit_verdict(body))
                elif parsed.path.startswith("/api/run/"):
                    user_id = parsed.path[len("/api/run/"):]
                    self._send(200, service.run_payload(user_id))
                else:
                    self._error(404, f"no such path {parsed.path}")
            except FieldError as err:
                self._error(err.status, str(err), field=err.field)
            except TagrecError as err:
                self._error(500, str(err))

    return Handler


def make_server(service: JudgeService, host: str | None = None,
                port: int | None = None) -> ThreadingHTTPServer:
    """Bind the service; a busy port raises OSError at startup."""
    host = host if host is not None else service.cfg.bind_host
    port = port if port is not None else service.cfg.bind_port
    return ThreadingHTTPServer((host, port), make_handler(service))


def serve_forever(service: JudgeService) -> None:
    """Blocking serve with graceful shutdown on SIGINT/SIGTERM."""
    import signal

    server = make_server(service)

    def shutdown(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)
    try:
        server.serve_forever()
    finally:
        server.server_close()
