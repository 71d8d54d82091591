"""Command-line entry points: the gateway manager and the mock-server launcher.

Exit codes: 0 success, 1 config/usage error, 2 daemon unreachable,
3 produce (or other control op) failed.
"""

from __future__ import annotations

import argparse
import base64
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path

from . import errors, mocks
from .config import load_config
from .daemon import DEFAULT_SOCKET, GatewayDaemon, control_request
from .scenarios import SCENARIO_IDS, run_scenario

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNREACHABLE = 2
EXIT_OP_FAILED = 3


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _guess_media_type(path: Path) -> str:
    return {
        ".ppm": "image/x-portable-pixmap",
        ".txt": "text/plain",
    }.get(path.suffix.lower(), "application/octet-stream")


# --- gateway ----------------------------------------------------------------

def gateway_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gateway", description="IoT gateway pipeline daemon and control client"
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="start the daemon from a config file")
    p_run.add_argument("--config", required=True, help="pipeline config (JSON)")
    p_run.add_argument("--socket", default=None, help="control socket path")

    p_trigger = sub.add_parser("trigger", help="ask the daemon to produce data")
    p_trigger.add_argument("--produce", required=True, metavar="STORE",
                           help="store key to produce into")
    p_trigger.add_argument("--input", default=None, help="file whose bytes are the input")
    p_trigger.add_argument("--socket", default=DEFAULT_SOCKET)

    p_tail = sub.add_parser("tail", help="print the newest envelopes of a store")
    p_tail.add_argument("--store", required=True)
    p_tail.add_argument("--n", type=int, default=10)
    p_tail.add_argument("--socket", default=DEFAULT_SOCKET)

    p_status = sub.add_parser("status", help="print provider states")
    p_status.add_argument("--socket", default=DEFAULT_SOCKET)

    p_scenario = sub.add_parser("scenario", help="run a built-in end-to-end scenario")
    p_scenario.add_argument("id", help=f"one of: {', '.join(SCENARIO_IDS)}")

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    if args.command == "run":
        return _cmd_run(args)
    if args.command == "trigger":
        return _cmd_trigger(args)
    if args.command == "tail":
        return _cmd_tail(args)
    if args.command == "status":
        return _cmd_status(args)
    if args.command == "scenario":
        return _cmd_scenario(args)
    parser.error("unknown command")  # pragma: no cover
    return EXIT_CONFIG


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except errors.GatewayError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    daemon = GatewayDaemon(config, socket_path=args.socket)
    try:
        daemon.start()
    except errors.GatewayError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def _shutdown(signum, frame):
        log.info("signal %d: stopping daemon", signum)
        threading.Thread(target=daemon.stop, daemon=True).start()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    print(f"gateway daemon running; control socket {daemon.socket_path}")
    daemon.wait()
    return EXIT_OK


def _control(args, op: str, op_args: dict) -> tuple[int, dict]:
    try:
        reply = control_request(args.socket, op, op_args)
    except errors.DaemonUnreachable as exc:
        print(f"daemon unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE, {}
    if not reply.get("ok"):
        print(
            f"{op} failed: {reply.get('error', '?')}: {reply.get('message', '')}",
            file=sys.stderr,
        )
        return EXIT_OP_FAILED, reply
    return EXIT_OK, reply


def _cmd_trigger(args) -> int:
    op_args = {"store": args.produce}
    if args.input:
        path = Path(args.input)
        try:
            payload = path.read_bytes()
        except OSError as exc:
            print(f"cannot read input file: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        op_args["input_b64"] = base64.b64encode(payload).decode("ascii")
        op_args["media_type"] = _guess_media_type(path)
    code, reply = _control(args, "produce", op_args)
    if code == EXIT_OK:
        print(reply["request_id"])
    return code


def _cmd_tail(args) -> int:
    code, reply = _control(args, "tail", {"store": args.store, "n": args.n})
    if code == EXIT_OK:
        for env in reply["envelopes"]:
            print(
                f"{env['data_id']}\t{env['request_id']}\t{env['media_type']}"
                f"\t{env['size']}B\t{env['preview']}"
            )
    return code


def _cmd_status(args) -> int:
    code, reply = _control(args, "status", {})
    if code == EXIT_OK:
        for key, state in sorted(reply["providers"].items()):
            print(f"provider {key}: {state}")
        for key, count in sorted(reply["stores"].items()):
            print(f"store {key}: {count} envelope(s)")
        for key in reply.get("streams", []):
            print(f"stream -> {key}")
    return code


def _cmd_scenario(args) -> int:
    try:
        report = run_scenario(args.id)
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for step in report.steps:
        mark = "PASS" if step.passed else "FAIL"
        detail = f"  ({step.detail})" if step.detail else ""
        print(f"[{mark}] {step.description}{detail}")
    print(
        f"scenario {report.scenario_id}: "
        f"{'pass' if report.passed else 'FAIL'} in {report.elapsed:.2f}s"
    )
    return EXIT_OK if report.passed else EXIT_CONFIG


# --- mock ---------------------------------------------------------------------

def mock_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mock", description="host the backend mock servers"
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="serve selected mocks until interrupted")
    p_serve.add_argument("--fogbus", type=int, metavar="PORT")
    p_serve.add_argument("--edgelens-master", type=int, metavar="PORT")
    p_serve.add_argument("--edgelens-worker", type=int, metavar="PORT")
    p_serve.add_argument("--aneka", type=int, metavar="PORT")
    p_serve.add_argument("--blob", type=int, metavar="PORT")
    p_serve.add_argument("--aneka-root", default=None,
                         help="directory backing the aneka mock's file store")
    p_serve.add_argument("--edgelens-worker-url", default=None,
                         help="worker URL the master hands out (defaults to the"
                              " worker mock started here)")

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "serve":
        return _cmd_serve(args)
    return EXIT_CONFIG  # pragma: no cover


def _cmd_serve(args) -> int:
    requested = [args.fogbus, args.edgelens_master, args.edgelens_worker,
                 args.aneka, args.blob]
    if all(port is None for port in requested):
        print("nothing to serve: pass at least one mock port", file=sys.stderr)
        return EXIT_CONFIG

    servers = []
    try:
        if args.fogbus is not None:
            servers.append(mocks.FogBusMock(port=args.fogbus))
        worker = None
        if args.edgelens_worker is not None:
            worker = mocks.EdgeLensWorkerMock(port=args.edgelens_worker)
            servers.append(worker)
        if args.edgelens_master is not None:
            worker_url = args.edgelens_worker_url or (worker.url if worker else None)
            servers.append(
                mocks.EdgeLensMasterMock(worker_url=worker_url, port=args.edgelens_master)
            )
        if args.aneka is not None:
            root = args.aneka_root or tempfile.mkdtemp(prefix="gateway-aneka-")
            from .backends import LocalDirectoryStore

            servers.append(mocks.AnekaMock(LocalDirectoryStore(root), port=args.aneka))
            print(f"aneka file store root: {root}")
        if args.blob is not None:
            servers.append(mocks.BlobStoreMock(port=args.blob))
    except errors.PortInUse as exc:
        for server in servers:
            server.close()
        print(f"cannot serve: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    for server in servers:
        print(f"{server.name}: {server.url}")

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    stop.wait()
    for server in servers:
        server.close()
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(gateway_main())
