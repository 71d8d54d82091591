"""Long-running daemon hosting one pipeline, controlled over a local socket.

The control channel is a unix domain socket speaking newline-delimited JSON:
one ``{"op": ..., "args": {...}}`` request per line, one ``{"ok": ...}`` reply
per line. The daemon owns the engine; nothing is persisted across restarts.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import socket
import tempfile
import threading
import time
from pathlib import Path
from typing import Callable, Optional

from . import errors
from .config import PipelineConfig, Pipeline, build
from .core import DataEnvelope

log = logging.getLogger(__name__)

DEFAULT_SOCKET = os.path.join(tempfile.gettempdir(), "gateway-control.sock")
_PREVIEW_BYTES = 16


class ControlServer:
    """Accepts control connections and dispatches line-JSON ops to a handler."""

    def __init__(self, socket_path: str, handler: Callable[[str, dict], dict]):
        self.socket_path = socket_path
        self._handler = handler
        path = Path(socket_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            path.unlink()
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(socket_path)
        self._sock.listen(8)
        self._closing = False
        self._thread = threading.Thread(
            target=self._accept_loop, name="gateway-control", daemon=True
        )
        self._thread.start()

    def close(self) -> None:
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass
        try:
            os.unlink(self.socket_path)
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_connection, args=(conn,), daemon=True
            ).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rwb") as stream:
            for line in stream:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                    op = msg["op"]
                    args = msg.get("args", {})
                except (ValueError, KeyError, TypeError) as exc:
                    reply = {"ok": False, "error": "ParseError", "message": str(exc)}
                else:
                    reply = self._dispatch(op, args)
                stream.write(json.dumps(reply).encode("utf-8") + b"\n")
                stream.flush()

    def _dispatch(self, op: str, args: dict) -> dict:
        try:
            result = self._handler(op, args)
        except errors.GatewayError as exc:
            return {"ok": False, "error": type(exc).__name__, "message": str(exc)}
        except Exception as exc:  # never let a bad request kill the daemon
            log.exception("control op %r failed", op)
            return {"ok": False, "error": type(exc).__name__, "message": str(exc)}
        result.setdefault("ok", True)
        return result


class GatewayDaemon:
    """Owns the pipeline, the stream sources, and the control server."""

    def __init__(self, config: PipelineConfig, socket_path: Optional[str] = None):
        self.config = config
        self.socket_path = socket_path or config.control_socket or DEFAULT_SOCKET
        self.pipeline: Optional[Pipeline] = None
        self._control: Optional[ControlServer] = None
        self._stopped = threading.Event()

    def start(self) -> None:
        self.pipeline = build(self.config)
        self.pipeline.start_streams()
        self._control = ControlServer(self.socket_path, self._handle)
        log.info("daemon up; control socket at %s", self.socket_path)

    def stop(self) -> None:
        if self._control is not None:
            self._control.close()
            self._control = None
        if self.pipeline is not None:
            self.pipeline.stop()
            self.pipeline = None
        self._stopped.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until stop() is called (by a signal handler or a control op)."""
        return self._stopped.wait(timeout)

    # -- control ops ---------------------------------------------------------

    def _handle(self, op: str, args: dict) -> dict:
        engine = self.pipeline.engine if self.pipeline else None
        if engine is None:
            raise errors.NotRunning("daemon pipeline is not running")

        if op == "ping":
            return {}

        if op == "produce":
            store = args["store"]
            payload = None
            if args.get("input_b64"):
                raw = base64.b64decode(args["input_b64"])
                payload = DataEnvelope(
                    data_id=0,
                    request_id=0,
                    created_at=time.monotonic_ns(),
                    payload=raw,
                    media_type=args.get("media_type", "application/octet-stream"),
                    producer_key="external",
                )
            request_id = engine.produce_data(store, input=payload)
            return {"request_id": request_id}

        if op == "tail":
            store = args["store"]
            n = int(args.get("n", 10))
            envelopes = engine.retrieve_latest(store, n)
            return {
                "envelopes": [
                    {
                        "data_id": env.data_id,
                        "request_id": env.request_id,
                        "media_type": env.media_type,
                        "size": len(env.payload),
                        "preview": env.payload[:_PREVIEW_BYTES].hex(),
                        "producer": env.producer_key,
                    }
                    for env in envelopes
                ]
            }

        if op == "status":
            return {
                "providers": {
                    key: state.value for key, state in engine.provider_states().items()
                },
                "stores": {
                    key: len(engine.store_handle(key)) for key in engine.store_keys()
                },
                "streams": [s.store_key for s in self.pipeline.streams],
            }

        if op == "stop":
            # Reply is written before the connection unwinds; stop on a helper
            # thread so the socket is not yanked under this response.
            threading.Thread(target=self.stop, daemon=True).start()
            return {"stopping": True}

        raise errors.GatewayError(f"unknown control op {op!r}")


def control_request(
    socket_path: str, op: str, args: Optional[dict] = None, timeout: float = 5.0
) -> dict:
    """Send one control op to a running daemon and return the decoded reply."""
    try:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        sock.connect(socket_path)
    except OSError as exc:
        raise errors.DaemonUnreachable(
            f"no daemon on control socket {socket_path}: {exc}"
        ) from exc
    with sock, sock.makefile("rwb") as stream:
        request = {"op": op, "args": args or {}}
        stream.write(json.dumps(request).encode("utf-8") + b"\n")
        stream.flush()
        line = stream.readline()
    if not line:
        raise errors.DaemonUnreachable(f"daemon on {socket_path} closed the connection")
    return json.loads(line)
