"""Pipeline engine: stores, providers, triggers, choosers, request tracking.

Data flows through keyed stores. Providers publish into exactly one store;
triggers subscribe to a store and typically start another provider, so a
single external event can fan out through a whole pipeline while keeping one
request id end to end.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from . import errors
from .runtime import (
    Body,
    ExecutionTicket,
    Runtime,
    RuntimeConfig,
    apply_env_overrides,
)

log = logging.getLogger(__name__)

OCTET_STREAM = "application/octet-stream"
DEFAULT_STORE_CAPACITY = 256
_RID_MASK = (1 << 64) - 1
_RID_SPREAD = 0x9E3779B97F4A7C15  # odd, so counter -> id stays bijective mod 2^64


class ProviderState(Enum):
    IDLE = "Idle"
    RUNNING = "Running"
    FAILED = "Failed"


class InputSpec(Enum):
    NONE = "none"
    SINGLE = "single-envelope"
    BATCH = "envelope-batch"


@dataclass(frozen=True)
class DataEnvelope:
    """One unit of published data."""

    data_id: int
    request_id: int
    created_at: int  # monotonic nanoseconds
    payload: bytes
    media_type: str = OCTET_STREAM
    producer_key: str = "external"


@dataclass(frozen=True)
class RequestContext:
    """Identity of one request chain, minted once per initiating event."""

    request_id: int
    origin: str = "external"
    deadline: Optional[float] = None


@dataclass(frozen=True)
class StartProvider:
    provider_key: str


@dataclass(frozen=True)
class Notify:
    sink_id: str


TriggerAction = Union[StartProvider, Notify]


@dataclass
class TriggerRegistration:
    id: int
    store_key: str
    action: TriggerAction
    enabled: bool = True


@dataclass(frozen=True)
class ProviderDescriptor:
    """Read-only snapshot of one registered provider."""

    key: str
    output_store: str
    input_spec: InputSpec
    state: ProviderState
    last_error: Optional[str]


@dataclass(frozen=True)
class EventRecord:
    """Engine event-log entry (notify sinks, failed trigger deliveries)."""

    at: float
    kind: str
    store_key: str
    detail: dict


class ChooserMode(Enum):
    PRIORITY = "PriorityWithBusySkip"
    ROUND_ROBIN = "RoundRobin"


@dataclass
class ChooserPolicy:
    """Arbitration rule over equivalent providers publishing to one store."""

    store_key: str
    candidates: list[str]
    mode: ChooserMode = ChooserMode.PRIORITY
    fallback_on_failure: bool = False
    _cursor: int = field(default=-1, repr=False, compare=False)


def choose(policy: ChooserPolicy, states: dict[str, ProviderState]) -> str:
    """Pick one candidate given a state snapshot.

    Priority mode returns the first Idle candidate, then (with
    fallback_on_failure) the first Failed one for a retry. Round-robin scans
    from the candidate after the internal cursor. Never returns a Running
    candidate.
    """
    if not policy.candidates:
        raise ValueError("chooser policy has no candidates")
    missing = [k for k in policy.candidates if k not in states]
    if missing:
        raise ValueError(f"state snapshot missing candidates: {missing}")

    if policy.mode is ChooserMode.PRIORITY:
        order = list(policy.candidates)
        advance = False
    else:
        n = len(policy.candidates)
        start = (policy._cursor + 1) % n
        order = [policy.candidates[(start + i) % n] for i in range(n)]
        advance = True

    for wanted in (ProviderState.IDLE, ProviderState.FAILED):
        if wanted is ProviderState.FAILED and not policy.fallback_on_failure:
            break
        for key in order:
            if states[key] is wanted:
                if advance:
                    policy._cursor = policy.candidates.index(key)
                return key
    raise errors.AllCandidatesUnavailable(
        f"no selectable provider for store {policy.store_key!r}"
    )


class Store:
    """Keyed, capacity-bounded, ordered log of envelopes with attached triggers."""

    def __init__(self, key: str, capacity: int):
        self.key = key
        self.capacity = capacity
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._records: OrderedDict[int, DataEnvelope] = OrderedDict()
        self._next_id = 1
        self._triggers: list[TriggerRegistration] = []

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    @property
    def high_water(self) -> int:
        """Highest data_id ever assigned (0 for a fresh store)."""
        with self._lock:
            return self._next_id - 1

    def retrieve(self, data_id: int) -> DataEnvelope:
        with self._lock:
            env = self._records.get(data_id)
        if env is None:
            raise errors.NotFound(
                f"store {self.key!r} has no data_id {data_id} (absent or evicted)"
            )
        return env

    def latest(self, n: int) -> list[DataEnvelope]:
        if n < 1:
            raise ValueError("n must be positive")
        with self._lock:
            items = list(self._records.values())
        return items[-n:]

    def wait_for_request(self, request_id: int, timeout: float = 5.0) -> DataEnvelope:
        """Block until an envelope with the given request id is retained."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                for env in reversed(self._records.values()):
                    if env.request_id == request_id:
                        return env
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(
                        f"no envelope for request {request_id} in store {self.key!r}"
                        f" within {timeout}s"
                    )
                self._cond.wait(remaining)

    def _append(self, env_fields: dict) -> tuple[DataEnvelope, list[TriggerRegistration]]:
        """Append under the store lock; returns the envelope and the enabled
        trigger snapshot taken at event time."""
        with self._lock:
            env = DataEnvelope(data_id=self._next_id, **env_fields)
            self._next_id += 1
            self._records[env.data_id] = env
            while len(self._records) > self.capacity:
                self._records.popitem(last=False)
            fired = [t for t in self._triggers if t.enabled]
            self._cond.notify_all()
        return env, fired


class _Provider:
    """Internal registration record; public view is ProviderDescriptor."""

    def __init__(self, key: str, output_store: str, body: Body, input_spec: InputSpec):
        self.key = key
        self.output_store = output_store
        self.body = body
        self.input_spec = input_spec
        self.state = ProviderState.IDLE
        self.last_error: Optional[str] = None
        self.inflight = False  # a ticket exists between submit and terminal
        self.pending: deque[tuple[Any, RequestContext]] = deque()
        self.last_ticket: Optional[ExecutionTicket] = None


def _normalize_output(result: Any) -> tuple[bytes, str]:
    if isinstance(result, tuple):
        payload, media_type = result
    else:
        payload, media_type = result, OCTET_STREAM
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        raise TypeError(
            f"provider body must return bytes, got {type(payload).__name__}"
        )
    return bytes(payload), str(media_type)


class Engine:
    """Coordinates stores, providers, triggers and choosers over one runtime."""

    def __init__(
        self,
        runtime_config: Optional[RuntimeConfig] = None,
        apply_env: bool = True,
    ):
        cfg = runtime_config or RuntimeConfig()
        if apply_env:
            cfg = apply_env_overrides(cfg)
        # Single coordination context: engine bookkeeping and runtime hooks
        # all serialize on this lock.
        self._lock = threading.RLock()
        self.runtime = Runtime(cfg, coordination_lock=self._lock)
        self._stores: dict[str, Store] = {}
        self._providers: dict[str, _Provider] = {}
        self._choosers: dict[str, ChooserPolicy] = {}
        self._triggers: dict[int, TriggerRegistration] = {}
        self._trigger_seq = 0
        self._events: list[EventRecord] = []
        self._rid_salt = random.getrandbits(64)
        self._rid_counter = 0

    # -- lifecycle ----------------------------------------------------------

    @property
    def is_running(self) -> bool:
        return self.runtime.is_running

    def start(self) -> None:
        self.runtime.start()

    def stop(self, drain: bool = True) -> None:
        self.runtime.stop(drain=drain)
        with self._lock:
            # Tickets are all terminal now; clear leftover dispatch state so a
            # restarted engine is not wedged by a stale inflight flag.
            for rec in self._providers.values():
                rec.inflight = False
                rec.pending.clear()

    def __enter__(self) -> "Engine":
        if not self.is_running:
            self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        if self.is_running:
            self.stop(drain=True)

    def quiesce(self, timeout: float = 10.0) -> bool:
        """Wait until no provider work is queued or running."""
        return self.runtime.wait_idle(timeout)

    # -- request tracking ------------------------------------------------------

    def new_request(self, origin: str = "external", deadline: Optional[float] = None) -> RequestContext:
        """Mint a fresh request context with an engine-unique request id."""
        with self._lock:
            self._rid_counter += 1
            rid = (self._rid_salt ^ (self._rid_counter * _RID_SPREAD)) & _RID_MASK
        return RequestContext(request_id=rid, origin=origin, deadline=deadline)

    # -- registration ------------------------------------------------------

    def register_store(self, key: str, capacity: int = DEFAULT_STORE_CAPACITY) -> Store:
        if not key:
            raise ValueError("store key must be nonempty")
        if not isinstance(capacity, int) or capacity < 1:
            raise errors.InvalidCapacity(f"capacity must be >= 1, got {capacity!r}")
        with self._lock:
            if key in self._stores:
                raise errors.DuplicateKey(f"store {key!r} already registered")
            store = Store(key, capacity)
            self._stores[key] = store
        return store

    def register_provider(
        self,
        key: str,
        output_store: str,
        body: Body,
        input_spec: InputSpec = InputSpec.SINGLE,
    ) -> None:
        if not key:
            raise ValueError("provider key must be nonempty")
        with self._lock:
            if key in self._providers:
                raise errors.DuplicateKey(f"provider {key!r} already registered")
            if output_store not in self._stores:
                raise errors.UnknownStore(
                    f"provider {key!r} names unregistered store {output_store!r}"
                )
            self._providers[key] = _Provider(key, output_store, body, input_spec)

    def attach_trigger(self, store_key: str, action: TriggerAction) -> int:
        with self._lock:
            store = self._store(store_key)
            if isinstance(action, StartProvider):
                if action.provider_key not in self._providers:
                    raise errors.UnknownProvider(
                        f"trigger names unregistered provider {action.provider_key!r}"
                    )
            elif not isinstance(action, Notify):
                raise TypeError(f"unsupported trigger action: {action!r}")
            self._trigger_seq += 1
            reg = TriggerRegistration(self._trigger_seq, store_key, action)
            self._triggers[reg.id] = reg
            with store._lock:
                store._triggers.append(reg)
        return reg.id

    def set_trigger_enabled(self, trigger_id: int, enabled: bool) -> None:
        with self._lock:
            reg = self._triggers.get(trigger_id)
            if reg is None:
                raise errors.NotFound(f"no trigger registration {trigger_id}")
            reg.enabled = enabled

    def set_chooser(self, policy: ChooserPolicy) -> None:
        """Install (or replace) the arbitration policy for one store."""
        with self._lock:
            self._store(policy.store_key)
            if not policy.candidates:
                raise ValueError("chooser policy needs at least one candidate")
            for key in policy.candidates:
                rec = self._providers.get(key)
                if rec is None:
                    raise errors.UnknownProvider(f"chooser names unknown provider {key!r}")
                if rec.output_store != policy.store_key:
                    raise errors.OutputMismatch(
                        f"provider {key!r} publishes to {rec.output_store!r},"
                        f" not {policy.store_key!r}"
                    )
            self._choosers[policy.store_key] = policy

    # -- store access ---------------------------------------------------------

    def store_handle(self, key: str) -> Store:
        with self._lock:
            return self._store(key)

    def store_keys(self) -> list[str]:
        with self._lock:
            return list(self._stores)

    def provider_keys(self) -> list[str]:
        with self._lock:
            return list(self._providers)

    def store(
        self,
        store_key: str,
        payload: bytes,
        media_type: str = OCTET_STREAM,
        ctx: Optional[RequestContext] = None,
        producer_key: str = "external",
    ) -> int:
        """Append an envelope and fire the store's enabled triggers once each.

        Triggers run after the append, outside the store lock, in registration
        order, carrying the new envelope and the same request context.
        """
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise TypeError(f"payload must be bytes, got {type(payload).__name__}")
        with self._lock:
            store = self._store(store_key)
        if ctx is None:
            ctx = self.new_request(origin=f"store:{store_key}")
        env, fired = store._append(
            dict(
                request_id=ctx.request_id,
                created_at=time.monotonic_ns(),
                payload=bytes(payload),
                media_type=media_type,
                producer_key=producer_key,
            )
        )
        for reg in fired:
            self._fire_trigger(reg, env, ctx)
        return env.data_id

    def retrieve(self, store_key: str, data_id: int) -> DataEnvelope:
        with self._lock:
            store = self._store(store_key)
        return store.retrieve(data_id)

    def retrieve_latest(self, store_key: str, n: int) -> list[DataEnvelope]:
        with self._lock:
            store = self._store(store_key)
        return store.latest(n)

    def wait_for_request(
        self, store_key: str, request_id: int, timeout: float = 5.0
    ) -> DataEnvelope:
        with self._lock:
            store = self._store(store_key)
        return store.wait_for_request(request_id, timeout)

    # -- execution -----------------------------------------------------------

    def run_provider(
        self,
        provider_key: str,
        input: Any = None,
        ctx: Optional[RequestContext] = None,
    ) -> int:
        """Schedule one provider execution; returns the chain's request id.

        Non-blocking: completion is observed through the output store. If the
        provider already has work in flight the input joins its pending queue
        and is delivered after the current run completes.
        """
        with self._lock:
            rec = self._providers.get(provider_key)
            if rec is None:
                raise errors.UnknownProvider(f"no provider {provider_key!r}")
            if ctx is None:
                ctx = self.new_request(origin=f"run:{provider_key}")
            work = self._coerce_input(rec, input, ctx)
            if rec.inflight:
                depth = self.runtime.config.pending_queue_depth
                if len(rec.pending) >= depth:
                    raise errors.QueueFull(
                        f"pending queue for provider {provider_key!r} at depth {depth}"
                    )
                rec.pending.append((work, ctx))
            else:
                self._launch(rec, work, ctx)
            return ctx.request_id

    def produce_data(
        self,
        store_key: str,
        input: Any = None,
        ctx: Optional[RequestContext] = None,
    ) -> int:
        """Ask for data in a store, letting the engine pick the provider."""
        with self._lock:
            self._store(store_key)
            cands = [r for r in self._providers.values() if r.output_store == store_key]
            if not cands:
                raise errors.NoProvider(f"no provider publishes to store {store_key!r}")
            if len(cands) == 1:
                chosen = cands[0].key
            else:
                policy = self._choosers.get(store_key)
                if policy is None:
                    raise errors.ChooserRequired(
                        f"{len(cands)} providers publish to {store_key!r};"
                        " a chooser policy is required"
                    )
                states = {r.key: r.state for r in cands}
                chosen = choose(policy, states)
            return self.run_provider(chosen, input=input, ctx=ctx)

    def provider_state(self, provider_key: str) -> ProviderState:
        with self._lock:
            rec = self._providers.get(provider_key)
            if rec is None:
                raise errors.UnknownProvider(f"no provider {provider_key!r}")
            return rec.state

    def provider_states(self) -> dict[str, ProviderState]:
        with self._lock:
            return {k: r.state for k, r in self._providers.items()}

    def describe_provider(self, provider_key: str) -> ProviderDescriptor:
        with self._lock:
            rec = self._providers.get(provider_key)
            if rec is None:
                raise errors.UnknownProvider(f"no provider {provider_key!r}")
            return ProviderDescriptor(
                key=rec.key,
                output_store=rec.output_store,
                input_spec=rec.input_spec,
                state=rec.state,
                last_error=rec.last_error,
            )

    # -- event log -----------------------------------------------------------

    def events(
        self, store_key: Optional[str] = None, kind: Optional[str] = None
    ) -> list[EventRecord]:
        with self._lock:
            out = list(self._events)
        if store_key is not None:
            out = [e for e in out if e.store_key == store_key]
        if kind is not None:
            out = [e for e in out if e.kind == kind]
        return out

    # -- internals ----------------------------------------------------------

    def _store(self, key: str) -> Store:
        store = self._stores.get(key)
        if store is None:
            raise errors.UnknownStore(f"no store {key!r}")
        return store

    def _log_event(self, kind: str, store_key: str, detail: dict) -> None:
        with self._lock:
            self._events.append(EventRecord(time.time(), kind, store_key, detail))

    def _fire_trigger(
        self, reg: TriggerRegistration, env: DataEnvelope, ctx: RequestContext
    ) -> None:
        action = reg.action
        if isinstance(action, Notify):
            self._log_event(
                "notify",
                reg.store_key,
                {
                    "sink_id": action.sink_id,
                    "data_id": env.data_id,
                    "request_id": env.request_id,
                },
            )
            return
        try:
            self.run_provider(action.provider_key, input=env, ctx=ctx)
        except (errors.QueueFull, errors.RuntimeStopped) as exc:
            self._log_event(
                "delivery-failed",
                reg.store_key,
                {
                    "provider_key": action.provider_key,
                    "data_id": env.data_id,
                    "request_id": env.request_id,
                    "reason": str(exc),
                },
            )
            log.warning(
                "trigger %d could not start provider %r: %s",
                reg.id,
                action.provider_key,
                exc,
            )

    def _coerce_input(self, rec: _Provider, input: Any, ctx: RequestContext) -> Any:
        if isinstance(input, (bytes, bytearray, memoryview)):
            input = DataEnvelope(
                data_id=0,
                request_id=ctx.request_id,
                created_at=time.monotonic_ns(),
                payload=bytes(input),
                media_type=OCTET_STREAM,
                producer_key="external",
            )
        if rec.input_spec is InputSpec.NONE:
            return None
        if input is None:
            return None
        if rec.input_spec is InputSpec.SINGLE:
            if isinstance(input, DataEnvelope):
                return input
            raise TypeError(
                f"provider {rec.key!r} expects a single envelope,"
                f" got {type(input).__name__}"
            )
        # BATCH
        if isinstance(input, DataEnvelope):
            return [input]
        if isinstance(input, Sequence) and all(
            isinstance(e, DataEnvelope) for e in input
        ):
            return list(input)
        raise TypeError(
            f"provider {rec.key!r} expects envelopes, got {type(input).__name__}"
        )

    def _launch(self, rec: _Provider, work: Any, ctx: RequestContext) -> None:
        """Submit one run to the runtime. Caller holds the engine lock."""
        rec.inflight = True
        try:
            rec.last_ticket = self.runtime.submit(
                rec.key,
                rec.body,
                input=work,
                ctx=ctx,
                pre_hook=self._pre_hook,
                post_hook=self._post_hook,
            )
        except Exception:
            rec.inflight = False
            raise

    def _pre_hook(self, ticket: ExecutionTicket) -> None:
        with self._lock:
            rec = self._providers[ticket.provider_key]
            rec.state = ProviderState.RUNNING

    def _post_hook(
        self,
        ticket: ExecutionTicket,
        result: Any,
        error: Optional[BaseException],
    ) -> Optional[BaseException]:
        """Store the output, settle provider state, release pending work."""
        with self._lock:
            rec = self._providers[ticket.provider_key]
            if error is None:
                try:
                    payload, media_type = _normalize_output(result)
                    self.store(
                        rec.output_store,
                        payload,
                        media_type,
                        ctx=ticket.ctx,
                        producer_key=rec.key,
                    )
                except Exception as exc:
                    error = exc
            if error is None:
                rec.state = ProviderState.IDLE
                rec.last_error = None
            elif ticket.began:
                rec.state = ProviderState.FAILED
                rec.last_error = f"{type(error).__name__}: {error}"
            rec.inflight = False
            while rec.pending and not rec.inflight:
                work, nctx = rec.pending.popleft()
                try:
                    self._launch(rec, work, nctx)
                except (errors.RuntimeStopped, errors.QueueFull) as exc:
                    self._log_event(
                        "delivery-failed",
                        rec.output_store,
                        {
                            "provider_key": rec.key,
                            "request_id": nctx.request_id,
                            "reason": str(exc),
                        },
                    )
            return error
