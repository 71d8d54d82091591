"""Offloading adapters for the three fog/cloud workflows, plus local execution.

Each adapter is a plain function from an input envelope to result bytes, and a
matching ``*_body`` factory wraps it as an engine provider. The deterministic
byte transforms stand in for real analysis so that a local run and a mock
backend produce byte-identical results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import requests

from . import errors
from .core import DataEnvelope, OCTET_STREAM
from .sources import FRAME_LEN, parse_ppm

log = logging.getLogger(__name__)

HYPOPNEA_SPO2_THRESHOLD = 92
DETECTION_MARKER = b"DETECTED"
REQUEST_ID_HEADER = "X-Request-Id"


# --- deterministic transforms ----------------------------------------------

def transform_complement(data: bytes) -> bytes:
    """Bytewise complement; for P6 images the header is preserved."""
    try:
        _, _, offset = parse_ppm(data)
    except errors.MalformedImage:
        offset = 0
    return data[:offset] + bytes(b ^ 0xFF for b in data[offset:])


def transform_append_marker(data: bytes) -> bytes:
    return data + DETECTION_MARKER


def transform_hypopnea_count(data: bytes) -> bytes:
    """Count sub-threshold SpO2 readings across the complete frames in a batch."""
    count = 0
    for off in range(0, len(data) - FRAME_LEN + 1, FRAME_LEN):
        if data[off] < HYPOPNEA_SPO2_THRESHOLD:
            count += 1
    return f"HYPOPNEA:{count}".encode("ascii")


TRANSFORMS = {
    "complement": transform_complement,
    "append-marker": transform_append_marker,
    "hypopnea-count": transform_hypopnea_count,
}


def local_execute(input: Any, transform_id: str) -> bytes:
    """Apply a named transform in-process; byte-equal to the mock backends."""
    fn = TRANSFORMS.get(transform_id)
    if fn is None:
        raise errors.UnknownTransform(
            f"no transform {transform_id!r}; known: {sorted(TRANSFORMS)}"
        )
    payload, _ = _payload_and_rid(input)
    return fn(payload)


# --- file transfer stores --------------------------------------------------

@dataclass(frozen=True)
class FileStoreConfig:
    kind: str  # "local-directory" | "http-blob"
    root: str  # directory path or base URL


@dataclass(frozen=True)
class TransferRecord:
    op: str  # "put" | "get"
    path: str
    size: int


class LocalDirectoryStore:
    """put/get of byte blobs under one directory; records every transfer."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.log: list[TransferRecord] = []

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or ".." in p.parts:
            raise errors.TransferFailed(f"illegal blob path {rel!r}")
        return self.root / p

    def put(self, rel: str, data: bytes) -> None:
        target = self._resolve(rel)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        except OSError as exc:
            raise errors.TransferFailed(f"put {rel!r} failed: {exc}") from exc
        self.log.append(TransferRecord("put", rel, len(data)))

    def get(self, rel: str) -> bytes:
        target = self._resolve(rel)
        try:
            data = target.read_bytes()
        except OSError as exc:
            raise errors.TransferFailed(f"get {rel!r} failed: {exc}") from exc
        self.log.append(TransferRecord("get", rel, len(data)))
        return data


class HttpBlobStore:
    """Blob transfer over PUT/GET {base}/blob/{path}."""

    def __init__(self, base_url: str, connect_timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.connect_timeout = connect_timeout
        self.log: list[TransferRecord] = []

    def _url(self, rel: str) -> str:
        return f"{self.base_url}/blob/{rel.lstrip('/')}"

    def put(self, rel: str, data: bytes) -> None:
        try:
            resp = requests.put(self._url(rel), data=data, timeout=self.connect_timeout)
        except requests.RequestException as exc:
            raise errors.TransferFailed(f"put {rel!r} failed: {exc}") from exc
        if resp.status_code not in (200, 201, 204):
            raise errors.TransferFailed(f"put {rel!r} returned {resp.status_code}")
        self.log.append(TransferRecord("put", rel, len(data)))

    def get(self, rel: str) -> bytes:
        try:
            resp = requests.get(self._url(rel), timeout=self.connect_timeout)
        except requests.RequestException as exc:
            raise errors.TransferFailed(f"get {rel!r} failed: {exc}") from exc
        if resp.status_code != 200:
            raise errors.TransferFailed(f"get {rel!r} returned {resp.status_code}")
        self.log.append(TransferRecord("get", rel, len(resp.content)))
        return resp.content


FileStore = Union[LocalDirectoryStore, HttpBlobStore]


def make_file_store(cfg: FileStoreConfig, connect_timeout: float = 5.0) -> FileStore:
    if cfg.kind == "local-directory":
        return LocalDirectoryStore(cfg.root)
    if cfg.kind == "http-blob":
        return HttpBlobStore(cfg.root, connect_timeout)
    raise ValueError(f"unknown file store kind {cfg.kind!r}")


# --- endpoint configuration ---------------------------------------------------

@dataclass
class BackendEndpointConfig:
    """Addresses and timing knobs for one fog/cloud endpoint."""

    master_url: str
    poll_interval: float = 0.25
    poll_limit: int = 120
    transfer: Optional[FileStoreConfig] = None
    connect_timeout: float = 5.0


@dataclass
class TaskReceipt:
    task_id: str
    state: str  # Submitted | Running | Completed | Failed
    result_ref: Optional[str] = None


# --- shared HTTP plumbing --------------------------------------------------

def _payload_and_rid(input: Any) -> tuple[bytes, int]:
    """Flatten an envelope, an envelope batch, or raw bytes into one payload."""
    if isinstance(input, DataEnvelope):
        return input.payload, input.request_id
    if isinstance(input, (bytes, bytearray, memoryview)):
        return bytes(input), 0
    if isinstance(input, Sequence):
        parts = []
        rid = 0
        for env in input:
            if not isinstance(env, DataEnvelope):
                raise TypeError(f"batch element is {type(env).__name__}, not an envelope")
            parts.append(env.payload)
            rid = rid or env.request_id
        return b"".join(parts), rid
    if input is None:
        raise TypeError("backend adapter needs an input envelope or batch")
    raise TypeError(f"unsupported adapter input: {type(input).__name__}")


def _http(method: str, url: str, *, timeout: float, data: bytes = None,
          json_body: dict = None, headers: dict = None) -> requests.Response:
    try:
        return requests.request(
            method, url, data=data, json=json_body, headers=headers, timeout=timeout
        )
    except requests.Timeout as exc:
        raise errors.Timeout(f"{method} {url} timed out after {timeout}s") from exc
    except requests.ConnectionError as exc:
        raise errors.BackendUnreachable(f"cannot reach {url}: {exc}") from exc
    except requests.RequestException as exc:
        raise errors.BackendUnreachable(f"{method} {url} failed: {exc}") from exc


# --- FogBus: one proxied HTTP request ---------------------------------------

def fogbus_analyze(
    input: Any, cfg: BackendEndpointConfig, request_id: Optional[int] = None
) -> bytes:
    """Send the payload to the master in a single POST and return its answer.

    The master proxies to its workers opaquely; the client never contacts a
    worker directly.
    """
    payload, rid = _payload_and_rid(input)
    if request_id is not None:
        rid = request_id
    resp = _http(
        "POST",
        f"{cfg.master_url.rstrip('/')}/analyze",
        data=payload,
        headers={REQUEST_ID_HEADER: str(rid)},
        timeout=cfg.connect_timeout,
    )
    if resp.status_code >= 400:
        raise errors.BackendError(resp.status_code, f"analyze failed: {resp.status_code}")
    return resp.content


# --- EdgeLens: direct-to-worker four-step workflow ---------------------------

def edgelens_detect(
    input: Any, cfg: BackendEndpointConfig, request_id: Optional[int] = None
) -> bytes:
    """Query master for a worker, upload, execute, poll for the result."""
    payload, rid = _payload_and_rid(input)
    if request_id is not None:
        rid = request_id
    headers = {REQUEST_ID_HEADER: str(rid)}
    master = cfg.master_url.rstrip("/")

    resp = _http("GET", f"{master}/worker", headers=headers, timeout=cfg.connect_timeout)
    if resp.status_code == 204 or not resp.text.strip():
        raise errors.NoWorkerAssigned(f"master {master} has no worker available")
    if resp.status_code >= 400:
        raise errors.BackendError(resp.status_code, "worker query failed")
    worker = resp.text.strip().rstrip("/")

    resp = _http("POST", f"{worker}/upload", data=payload, headers=headers,
                 timeout=cfg.connect_timeout)
    if resp.status_code >= 400:
        raise errors.BackendError(resp.status_code, "upload failed")
    job_id = resp.text.strip()

    resp = _http("POST", f"{worker}/execute/{job_id}", headers=headers,
                 timeout=cfg.connect_timeout)
    if resp.status_code not in (200, 202):
        raise errors.BackendError(resp.status_code, "execute failed")

    # 404 means not ready yet; anything else ends the poll loop.
    for poll in range(1, cfg.poll_limit + 1):
        resp = _http("GET", f"{worker}/result/{job_id}", headers=headers,
                     timeout=cfg.connect_timeout)
        if resp.status_code == 200:
            return resp.content
        if resp.status_code != 404:
            raise errors.BackendError(resp.status_code, "result query failed")
        if poll < cfg.poll_limit:
            time.sleep(cfg.poll_interval)
    raise errors.PollExhausted(cfg.poll_limit)


# --- Aneka: file transfer plus task submission with polling -----------------

def aneka_detect(
    input: Any,
    cfg: BackendEndpointConfig,
    transform: str = "append-marker",
    file_store: Optional[FileStore] = None,
    request_id: Optional[int] = None,
) -> bytes:
    """Upload the input blob, submit a task, poll until Completed, download."""
    payload, rid = _payload_and_rid(input)
    if request_id is not None:
        rid = request_id
    if file_store is None:
        if cfg.transfer is None:
            raise ValueError("aneka adapter needs a transfer file store")
        file_store = make_file_store(cfg.transfer, cfg.connect_timeout)
    headers = {REQUEST_ID_HEADER: str(rid)}
    master = cfg.master_url.rstrip("/")

    in_path = f"in/{rid}"
    file_store.put(in_path, payload)  # TransferFailed propagates before any HTTP

    resp = _http("POST", f"{master}/tasks",
                 json_body={"input": in_path, "transform": transform},
                 headers=headers, timeout=cfg.connect_timeout)
    if resp.status_code >= 400:
        raise errors.BackendError(resp.status_code, "task submission failed")
    task_id = resp.json()["task_id"]

    receipt = TaskReceipt(task_id=task_id, state="Submitted")
    for poll in range(1, cfg.poll_limit + 1):
        resp = _http("GET", f"{master}/tasks/{task_id}", headers=headers,
                     timeout=cfg.connect_timeout)
        if resp.status_code >= 400:
            raise errors.BackendError(resp.status_code, "task status query failed")
        body = resp.json()
        receipt = TaskReceipt(
            task_id=task_id,
            state=body.get("state", "Submitted"),
            result_ref=body.get("result_ref"),
        )
        if receipt.state == "Completed":
            break
        if receipt.state == "Failed":
            raise errors.TaskFailed(f"task {task_id} failed on the backend")
        if poll < cfg.poll_limit:
            time.sleep(cfg.poll_interval)
    else:
        raise errors.PollExhausted(cfg.poll_limit)

    if not receipt.result_ref:
        raise errors.BackendError(500, f"task {task_id} completed without result_ref")
    return file_store.get(receipt.result_ref)


# --- provider body factories ---------------------------------------------------

def _result_media(call) -> str:
    env = call.input
    if isinstance(env, DataEnvelope):
        return env.media_type
    if isinstance(env, Sequence) and env and isinstance(env[0], DataEnvelope):
        return env[0].media_type
    return OCTET_STREAM


def fogbus_body(cfg: BackendEndpointConfig):
    def body(call):
        result = fogbus_analyze(call.input, cfg, request_id=call.request_id)
        return result, "text/plain"

    return body


def edgelens_body(cfg: BackendEndpointConfig):
    def body(call):
        result = edgelens_detect(call.input, cfg, request_id=call.request_id)
        return result, _result_media(call)

    return body


def aneka_body(cfg: BackendEndpointConfig, transform: str = "append-marker",
               file_store: Optional[FileStore] = None):
    store = file_store
    if store is None and cfg.transfer is not None:
        store = make_file_store(cfg.transfer, cfg.connect_timeout)

    def body(call):
        result = aneka_detect(
            call.input, cfg, transform, store, request_id=call.request_id
        )
        return result, _result_media(call)

    return body


def local_body(transform: str):
    def body(call):
        return local_execute(call.input, transform), _result_media(call)

    return body
