"""Background execution runtime: worker pool, execution tickets, hooks, timeouts.

Provider bodies run on a fixed pool of worker threads. Pre/post hooks and all
status transitions are serialized through one coordination lock, which the
engine shares so hook code may touch engine bookkeeping without extra locking.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Optional

from . import errors

log = logging.getLogger(__name__)


class TicketStatus(Enum):
    QUEUED = "Queued"
    PRE_HOOK = "PreHook"
    RUNNING = "Running"
    POST_HOOK = "PostHook"
    DONE = "Done"
    FAILED = "Failed"
    TIMED_OUT = "TimedOut"


TERMINAL_STATUSES = frozenset(
    {TicketStatus.DONE, TicketStatus.FAILED, TicketStatus.TIMED_OUT}
)

WORKERS_ENV = "GATEWAY_WORKERS"
TIMEOUT_MS_ENV = "GATEWAY_TIMEOUT_MS"


@dataclass
class RuntimeConfig:
    """Tunables for the worker pool."""

    worker_count: int = 4
    default_timeout: float = 30.0
    pending_queue_depth: int = 64
    shutdown_grace: float = 5.0

    def validate(self) -> None:
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.default_timeout <= 0:
            raise ValueError("default_timeout must be positive")
        if self.pending_queue_depth < 1:
            raise ValueError("pending_queue_depth must be >= 1")
        if self.shutdown_grace < 0:
            raise ValueError("shutdown_grace must be >= 0")


def apply_env_overrides(config: RuntimeConfig) -> RuntimeConfig:
    """Return a copy of ``config`` with GATEWAY_WORKERS / GATEWAY_TIMEOUT_MS applied."""
    workers = os.environ.get(WORKERS_ENV)
    timeout_ms = os.environ.get(TIMEOUT_MS_ENV)
    if workers is not None:
        config = replace(config, worker_count=int(workers))
    if timeout_ms is not None:
        config = replace(config, default_timeout=float(timeout_ms) / 1000.0)
    return config


class ProviderCall:
    """What a provider body receives: its input, request context, cancel signal."""

    __slots__ = ("input", "ctx", "cancelled")

    def __init__(self, input: Any, ctx: Any, cancelled: threading.Event):
        self.input = input
        self.ctx = ctx
        self.cancelled = cancelled

    @property
    def request_id(self) -> int:
        return self.ctx.request_id

    def is_cancelled(self) -> bool:
        return self.cancelled.is_set()

    def wait_cancelled(self, timeout: float) -> bool:
        """Sleep up to ``timeout`` seconds, returning early (True) on cancellation."""
        return self.cancelled.wait(timeout)


class ExecutionTicket:
    """One scheduled provider execution and its status trail."""

    def __init__(self, provider_key: str, ctx: Any, timeout: float):
        self.provider_key = provider_key
        self.ctx = ctx
        self.request_id: int = ctx.request_id
        self.submitted_at: int = time.monotonic_ns()
        self.timeout: float = timeout
        self.status: TicketStatus = TicketStatus.QUEUED
        self.error: Optional[str] = None
        self.began: bool = False  # pre-hook reached; a body was started for it
        self.cancel = threading.Event()
        self._done = threading.Event()

    @property
    def is_terminal(self) -> bool:
        return self.status in TERMINAL_STATUSES

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until the ticket reaches a terminal status. True if it did."""
        return self._done.wait(timeout)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"ExecutionTicket({self.provider_key!r}, request_id={self.request_id},"
            f" status={self.status.value})"
        )


# Body signature: body(call) -> bytes | (bytes, media_type)
Body = Callable[[ProviderCall], Any]
PreHook = Callable[[ExecutionTicket], None]
# Post hooks return the final error (None means success); raising is equivalent.
PostHook = Callable[[ExecutionTicket, Any, Optional[BaseException]], Optional[BaseException]]


class _WorkItem:
    __slots__ = ("ticket", "body", "call", "pre_hook", "post_hook", "timer")

    def __init__(self, ticket, body, call, pre_hook, post_hook):
        self.ticket = ticket
        self.body = body
        self.call = call
        self.pre_hook = pre_hook
        self.post_hook = post_hook
        self.timer: Optional[threading.Timer] = None


class _Worker(threading.Thread):
    _seq = 0

    def __init__(self, runtime: "Runtime"):
        _Worker._seq += 1
        super().__init__(name=f"gateway-worker-{_Worker._seq}", daemon=True)
        self._runtime = runtime
        self.retired = False

    def run(self) -> None:
        while True:
            item = self._runtime._next_item()
            if item is None:
                return
            self._runtime._run_item(item, self)
            if self.retired:
                return


class Runtime:
    """Fixed worker pool executing provider bodies with hooks and timeouts."""

    def __init__(
        self,
        config: Optional[RuntimeConfig] = None,
        coordination_lock=None,
    ):
        self.config = config or RuntimeConfig()
        self.config.validate()
        # Shared with the engine: hooks and bookkeeping serialize on it.
        self._coord = coordination_lock if coordination_lock is not None else threading.RLock()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queue: deque[_WorkItem] = deque()
        self._workers: list[_Worker] = []
        self._active: dict[ExecutionTicket, _WorkItem] = {}
        self._running_worker: dict[ExecutionTicket, _Worker] = {}
        self._running = False
        self._stopping = False

    # -- lifecycle -----------------------------------------------------------

    @property
    def is_running(self) -> bool:
        return self._running

    def start(self) -> None:
        with self._lock:
            if self._running:
                raise errors.AlreadyRunning("runtime already started")
            self._running = True
            self._stopping = False
            self._workers = [_Worker(self) for _ in range(self.config.worker_count)]
        for w in self._workers:
            w.start()
        log.debug("runtime started with %d workers", self.config.worker_count)

    def stop(self, drain: bool = True) -> None:
        """Stop the pool. drain=True lets queued and running work finish within
        shutdown_grace; drain=False fails queued tickets immediately."""
        with self._lock:
            if not self._running:
                raise errors.NotRunning("runtime is not running")
            self._running = False
            self._stopping = True
            dropped = []
            if not drain:
                dropped = list(self._queue)
                self._queue.clear()
            self._cond.notify_all()

        if not drain:
            for item in dropped:
                self._fail_item(item, "shutdown")
            for item in self._snapshot_active():
                item.ticket.cancel.set()

        deadline = time.monotonic() + self.config.shutdown_grace
        with self._cond:
            while self._active and time.monotonic() < deadline:
                self._cond.wait(0.05)

        # Whatever did not finish inside the grace window is failed so no
        # ticket is ever left without a terminal status.
        leftovers = self._snapshot_active()
        for item in leftovers:
            item.ticket.cancel.set()
            self._fail_item(item, "shutdown")

        for w in self._workers:
            w.join(timeout=0.5)
        self._workers = []
        log.debug("runtime stopped (drain=%s, leftovers=%d)", drain, len(leftovers))

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        """Block until no ticket is queued or running. True once idle."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._active or self._queue:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(0.05)
        return True

    def active_count(self) -> int:
        with self._lock:
            return len(self._active)

    # -- submission ----------------------------------------------------------

    def submit(
        self,
        provider_key: str,
        body: Body,
        input: Any = None,
        ctx: Any = None,
        timeout: Optional[float] = None,
        pre_hook: Optional[PreHook] = None,
        post_hook: Optional[PostHook] = None,
    ) -> ExecutionTicket:
        """Queue one body execution and return its ticket immediately."""
        if ctx is None:
            raise ValueError("submit requires a request context")
        ticket = ExecutionTicket(provider_key, ctx, timeout or self.config.default_timeout)
        call = ProviderCall(input, ctx, ticket.cancel)
        item = _WorkItem(ticket, body, call, pre_hook, post_hook)
        with self._lock:
            if not self._running:
                raise errors.RuntimeStopped("runtime is not accepting submissions")
            if len(self._queue) >= self.config.pending_queue_depth:
                raise errors.QueueFull(
                    f"runtime backlog at depth {self.config.pending_queue_depth}"
                )
            self._queue.append(item)
            self._active[ticket] = item
            self._cond.notify()
        item.timer = threading.Timer(ticket.timeout, self._on_timeout, args=(item,))
        item.timer.daemon = True
        item.timer.start()
        return ticket

    # -- worker internals ------------------------------------------------------

    def _next_item(self) -> Optional[_WorkItem]:
        with self._cond:
            while True:
                if self._queue:
                    return self._queue.popleft()
                if self._stopping:
                    return None
                self._cond.wait()

    def _run_item(self, item: _WorkItem, worker: _Worker) -> None:
        ticket = item.ticket
        with self._coord:
            if ticket.status is not TicketStatus.QUEUED:
                return  # timed out or failed while waiting in the queue
            ticket.status = TicketStatus.PRE_HOOK
            ticket.began = True
            if item.pre_hook is not None:
                try:
                    item.pre_hook(ticket)
                except Exception as exc:  # pre-hook failure skips the body
                    self._finish(item, TicketStatus.FAILED, None, exc)
                    return
            ticket.status = TicketStatus.RUNNING
            with self._lock:
                self._running_worker[ticket] = worker

        result = None
        error: Optional[BaseException] = None
        try:
            result = item.body(item.call)
        except Exception as exc:
            error = exc
        finally:
            with self._lock:
                self._running_worker.pop(ticket, None)

        with self._coord:
            if ticket.status is not TicketStatus.RUNNING:
                return  # abandoned: timed out (or force-failed) while executing
            ticket.status = TicketStatus.POST_HOOK
            if error is None and result is None:
                error = errors.GatewayError("provider body returned no data")
            status = TicketStatus.DONE if error is None else TicketStatus.FAILED
            self._finish(item, status, result, error)

    def _finish(
        self,
        item: _WorkItem,
        status: TicketStatus,
        result: Any,
        error: Optional[BaseException],
    ) -> None:
        """Run the post hook and move the ticket to a terminal status.

        Caller holds the coordination lock; the status guards in each caller
        guarantee this runs at most once per ticket.
        """
        ticket = item.ticket
        if item.post_hook is not None:
            try:
                error = item.post_hook(ticket, result, error)
            except Exception as exc:
                error = exc
        if status is not TicketStatus.TIMED_OUT:
            status = TicketStatus.DONE if error is None else TicketStatus.FAILED
        ticket.status = status
        if error is not None and ticket.error is None:
            ticket.error = str(error) or type(error).__name__
        if item.timer is not None:
            item.timer.cancel()
        ticket._done.set()
        with self._cond:
            self._active.pop(ticket, None)
            self._cond.notify_all()

    def _on_timeout(self, item: _WorkItem) -> None:
        ticket = item.ticket
        with self._coord:
            if ticket.is_terminal:
                return
            ticket.cancel.set()
            was_running = ticket.status is TicketStatus.RUNNING
            ticket.error = f"timed out after {ticket.timeout:.3f}s"
            self._finish(
                item,
                TicketStatus.TIMED_OUT,
                None,
                errors.GatewayError(ticket.error),
            )
            if was_running:
                self._recycle_worker(ticket)

    def _recycle_worker(self, ticket: ExecutionTicket) -> None:
        """Replace the worker stuck on an abandoned body to keep pool capacity."""
        with self._lock:
            worker = self._running_worker.pop(ticket, None)
            if worker is None or not self._running:
                return
            worker.retired = True
            replacement = _Worker(self)
            self._workers.append(replacement)
        replacement.start()
        log.warning(
            "worker %s abandoned on provider %r; recycled", worker.name, ticket.provider_key
        )

    def _fail_item(self, item: _WorkItem, reason: str) -> None:
        with self._coord:
            if item.ticket.is_terminal:
                return
            item.ticket.error = reason
            self._finish(item, TicketStatus.FAILED, None, errors.GatewayError(reason))

    def _snapshot_active(self) -> list[_WorkItem]:
        with self._lock:
            return list(self._active.values())
