"""In-process mock servers implementing the backend wire protocols bit-exactly.

Every mock binds 127.0.0.1 (port 0 picks a free one), serves on daemon
threads, and keeps a request log so tests can assert the exact number and
shape of requests an adapter issued.
"""

from __future__ import annotations

import errno
import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from . import errors
from .backends import TRANSFORMS, FileStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RequestRecord:
    method: str
    path: str
    body_len: int
    status: int
    response_len: int


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _dispatch(self, method: str) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            status, payload, content_type = self.server.owner.handle(
                method, self.path, body
            )
        except Exception:
            log.exception("mock handler error for %s %s", method, self.path)
            status, payload, content_type = 500, b"internal mock error", "text/plain"
        self.server.owner._record(
            RequestRecord(method, self.path, len(body), status, len(payload))
        )
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if payload:
            self.wfile.write(payload)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s %s", self.address_string(), fmt % args)


class MockServer:
    """Base class: lifecycle, request log, and URL helpers for one mock."""

    name = "mock"

    def __init__(self, port: int = 0):
        try:
            self._httpd = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise errors.PortInUse(f"port {port} is already in use") from exc
            raise
        self._httpd.owner = self
        self._httpd.daemon_threads = True
        self._log_lock = threading.Lock()
        self.requests: list[RequestRecord] = []
        self._thread = threading.Thread(
            target=self._httpd.serve_forever,
            name=f"gateway-mock-{self.name}",
            daemon=True,
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def close(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def _record(self, record: RequestRecord) -> None:
        with self._log_lock:
            self.requests.append(record)
        log.info("%s: %s %s -> %d", self.name, record.method, record.path, record.status)

    def request_count(self, method: Optional[str] = None, prefix: str = "") -> int:
        with self._log_lock:
            return sum(
                1
                for r in self.requests
                if (method is None or r.method == method) and r.path.startswith(prefix)
            )

    def handle(self, method: str, path: str, body: bytes):
        raise NotImplementedError


class FogBusMock(MockServer):
    """POST /analyze -> 200 result | 400 on empty body."""

    name = "fogbus"

    def __init__(self, port: int = 0, transform: str = "hypopnea-count"):
        self._transform = TRANSFORMS[transform]
        super().__init__(port)

    def handle(self, method, path, body):
        if method == "POST" and path == "/analyze":
            if not body:
                return 400, b"empty batch", "text/plain"
            return 200, self._transform(body), "application/octet-stream"
        return 404, b"not found", "text/plain"


class EdgeLensMasterMock(MockServer):
    """GET /worker -> 200 worker base URL | 204 when none is registered."""

    name = "edgelens-master"

    def __init__(self, worker_url: Optional[str] = None, port: int = 0):
        self.worker_url = worker_url
        super().__init__(port)

    def handle(self, method, path, body):
        if method == "GET" and path == "/worker":
            if not self.worker_url:
                return 204, b"", "text/plain"
            return 200, self.worker_url.encode("ascii"), "text/plain"
        return 404, b"not found", "text/plain"


class EdgeLensWorkerMock(MockServer):
    """upload/execute/result endpoints; 404 on /result until the job is ready.

    ``polls_until_ready`` counts the result requests answered 404 before
    the payload is served; None means the job never completes.
    """

    name = "edgelens-worker"

    def __init__(
        self,
        transform: str = "complement",
        polls_until_ready: Optional[int] = 0,
        port: int = 0,
    ):
        self._transform = TRANSFORMS[transform]
        self.polls_until_ready = polls_until_ready
        self._jobs_lock = threading.Lock()
        self._uploads: dict[str, bytes] = {}
        self._results: dict[str, bytes] = {}
        self._polls_seen: dict[str, int] = {}
        self._job_seq = 0
        super().__init__(port)

    def handle(self, method, path, body):
        if method == "POST" and path == "/upload":
            with self._jobs_lock:
                self._job_seq += 1
                job_id = f"job-{self._job_seq}"
                self._uploads[job_id] = body
            return 200, job_id.encode("ascii"), "text/plain"

        if method == "POST" and path.startswith("/execute/"):
            job_id = path[len("/execute/") :]
            with self._jobs_lock:
                payload = self._uploads.get(job_id)
                if payload is None:
                    return 404, b"no such job", "text/plain"
                self._results[job_id] = self._transform(payload)
                self._polls_seen[job_id] = 0
            return 202, b"", "text/plain"

        if method == "GET" and path.startswith("/result/"):
            job_id = path[len("/result/") :]
            with self._jobs_lock:
                if job_id not in self._results:
                    return 404, b"no such job", "text/plain"
                self._polls_seen[job_id] += 1
                ready = (
                    self.polls_until_ready is not None
                    and self._polls_seen[job_id] > self.polls_until_ready
                )
                if ready:
                    return 200, self._results[job_id], "application/octet-stream"
            return 404, b"pending", "text/plain"

        return 404, b"not found", "text/plain"


class AnekaMock(MockServer):
    """Task submission plus status polling over a shared file store.

    The task walks through ``poll_states`` one status request at a time,
    holding the last state forever; on Completed the transformed result is
    written to out/{task_id} in the file store.
    """

    name = "aneka"

    def __init__(
        self,
        file_store: FileStore,
        poll_states: tuple[str, ...] = ("Completed",),
        port: int = 0,
    ):
        if not poll_states:
            raise ValueError("poll_states must not be empty")
        self._file_store = file_store
        self._poll_states = poll_states
        self._tasks_lock = threading.Lock()
        self._tasks: dict[str, dict] = {}
        self._task_seq = 0
        super().__init__(port)

    def handle(self, method, path, body):
        if method == "POST" and path == "/tasks":
            try:
                req = json.loads(body)
                in_path = req["input"]
                transform = req["transform"]
            except (ValueError, KeyError):
                return 400, b"malformed task submission", "text/plain"
            if transform not in TRANSFORMS:
                return 400, f"unknown transform {transform}".encode(), "text/plain"
            with self._tasks_lock:
                self._task_seq += 1
                task_id = f"task-{self._task_seq}"
                self._tasks[task_id] = {
                    "input": in_path,
                    "transform": transform,
                    "polls": 0,
                    "done": False,
                }
            resp = json.dumps({"task_id": task_id}).encode("ascii")
            return 200, resp, "application/json"

        if method == "GET" and path.startswith("/tasks/"):
            task_id = path[len("/tasks/") :]
            with self._tasks_lock:
                task = self._tasks.get(task_id)
                if task is None:
                    return 404, b"no such task", "text/plain"
                idx = min(task["polls"], len(self._poll_states) - 1)
                state = self._poll_states[idx]
                task["polls"] += 1
                reply = {"state": state}
                if state == "Completed":
                    if not task["done"]:
                        data = self._file_store.get(task["input"])
                        result = TRANSFORMS[task["transform"]](data)
                        self._file_store.put(f"out/{task_id}", result)
                        task["done"] = True
                    reply["result_ref"] = f"out/{task_id}"
            return 200, json.dumps(reply).encode("ascii"), "application/json"

        return 404, b"not found", "text/plain"


class BlobStoreMock(MockServer):
    """In-memory blob server: PUT /blob/{path}, GET /blob/{path}."""

    name = "blob"

    def __init__(self, port: int = 0):
        self._blob_lock = threading.Lock()
        self.blobs: dict[str, bytes] = {}
        super().__init__(port)

    def handle(self, method, path, body):
        if not path.startswith("/blob/"):
            return 404, b"not found", "text/plain"
        key = path[len("/blob/") :]
        if method == "PUT":
            with self._blob_lock:
                self.blobs[key] = body
            return 200, b"", "text/plain"
        if method == "GET":
            with self._blob_lock:
                data = self.blobs.get(key)
            if data is None:
                return 404, b"no such blob", "text/plain"
            return 200, data, "application/octet-stream"
        return 404, b"not found", "text/plain"
