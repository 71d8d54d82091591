"""Declarative pipeline configuration: JSON schema, validation, engine wiring.

A config names stores, providers (by kind), triggers, choosers, and runtime
knobs. ``load_config`` validates structure and cross-references; ``build``
turns a validated config into a live engine plus unstarted stream sources.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from . import backends, errors, sources
from .core import ChooserMode, ChooserPolicy, Engine, InputSpec, StartProvider
from .runtime import RuntimeConfig

log = logging.getLogger(__name__)

RUNNABLE_KINDS = {"camera", "fogbus", "edgelens", "aneka", "local", "bitmap-convert"}
STREAM_KINDS = {"oximeter-stream"}
PROVIDER_KINDS = RUNNABLE_KINDS | STREAM_KINDS

_CHOOSER_MODES = {
    "priority": ChooserMode.PRIORITY,
    "round-robin": ChooserMode.ROUND_ROBIN,
}


@dataclass
class StoreSpec:
    key: str
    capacity: int = 256


@dataclass
class ProviderSpec:
    key: str
    kind: str
    output_store: str
    settings: dict = field(default_factory=dict)


@dataclass
class TriggerSpec:
    store: str
    start_provider: str


@dataclass
class PipelineConfig:
    stores: list[StoreSpec]
    providers: list[ProviderSpec]
    triggers: list[TriggerSpec]
    choosers: list[ChooserPolicy]
    runtime: RuntimeConfig
    allow_cycle: bool = False
    control_socket: Optional[str] = None

    def provider(self, key: str) -> ProviderSpec:
        for spec in self.providers:
            if spec.key == key:
                return spec
        raise KeyError(key)


def load_config(path: Union[str, Path]) -> PipelineConfig:
    """Read, parse and fully validate a pipeline config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise errors.ParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    try:
        raw = json.loads(text)
    except ValueError as exc:
        raise errors.ParseError(f"invalid JSON in {source}: {exc}") from exc
    return config_from_dict(raw, source=source)


def _require(raw: dict, key: str, typ, source: str):
    if key not in raw:
        raise errors.ParseError(f"{source}: missing required field {key!r}")
    value = raw[key]
    if not isinstance(value, typ):
        raise errors.ParseError(
            f"{source}: field {key!r} must be {typ.__name__}, got {type(value).__name__}"
        )
    return value


def config_from_dict(raw: Any, source: str = "<dict>") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise errors.ParseError(f"{source}: top level must be an object")

    stores = []
    for i, item in enumerate(raw.get("stores", [])):
        where = f"{source}: stores[{i}]"
        key = _require(item, "key", str, where)
        capacity = item.get("capacity", 256)
        if not isinstance(capacity, int) or capacity < 1:
            raise errors.ParseError(f"{where}: capacity must be a positive integer")
        stores.append(StoreSpec(key=key, capacity=capacity))

    providers = []
    for i, item in enumerate(raw.get("providers", [])):
        where = f"{source}: providers[{i}]"
        kind = _require(item, "kind", str, where)
        if kind not in PROVIDER_KINDS:
            raise errors.ParseError(
                f"{where}: unknown kind {kind!r}; known: {sorted(PROVIDER_KINDS)}"
            )
        providers.append(
            ProviderSpec(
                key=_require(item, "key", str, where),
                kind=kind,
                output_store=_require(item, "output_store", str, where),
                settings=dict(item.get("settings", {})),
            )
        )

    triggers = []
    for i, item in enumerate(raw.get("triggers", [])):
        where = f"{source}: triggers[{i}]"
        triggers.append(
            TriggerSpec(
                store=_require(item, "store", str, where),
                start_provider=_require(item, "start_provider", str, where),
            )
        )

    choosers = []
    for i, item in enumerate(raw.get("choosers", [])):
        where = f"{source}: choosers[{i}]"
        mode_name = item.get("mode", "priority")
        mode = _CHOOSER_MODES.get(mode_name)
        if mode is None:
            raise errors.ParseError(
                f"{where}: mode must be one of {sorted(_CHOOSER_MODES)}"
            )
        candidates = _require(item, "candidates", list, where)
        if not candidates or not all(isinstance(c, str) for c in candidates):
            raise errors.ParseError(f"{where}: candidates must be nonempty strings")
        choosers.append(
            ChooserPolicy(
                store_key=_require(item, "store", str, where),
                candidates=list(candidates),
                mode=mode,
                fallback_on_failure=bool(item.get("fallback_on_failure", False)),
            )
        )

    runtime_raw = raw.get("runtime", {})
    if not isinstance(runtime_raw, dict):
        raise errors.ParseError(f"{source}: runtime must be an object")
    try:
        runtime = RuntimeConfig(
            worker_count=int(runtime_raw.get("worker_count", 4)),
            default_timeout=float(runtime_raw.get("default_timeout", 30.0)),
            pending_queue_depth=int(runtime_raw.get("pending_queue_depth", 64)),
            shutdown_grace=float(runtime_raw.get("shutdown_grace", 5.0)),
        )
        runtime.validate()
    except (TypeError, ValueError) as exc:
        raise errors.ParseError(f"{source}: bad runtime config: {exc}") from exc

    config = PipelineConfig(
        stores=stores,
        providers=providers,
        triggers=triggers,
        choosers=choosers,
        runtime=runtime,
        allow_cycle=bool(raw.get("allow_cycle", False)),
        control_socket=raw.get("control_socket"),
    )
    validate_config(config, source=source)
    return config


def validate_config(config: PipelineConfig, source: str = "<config>") -> None:
    """Check key uniqueness, cross-references, and trigger-graph acyclicity."""
    store_keys = set()
    for spec in config.stores:
        if spec.key in store_keys:
            raise errors.ParseError(f"{source}: duplicate store key {spec.key!r}")
        store_keys.add(spec.key)

    provider_keys = {}
    for spec in config.providers:
        if spec.key in provider_keys or spec.key in store_keys:
            raise errors.ParseError(f"{source}: duplicate key {spec.key!r}")
        provider_keys[spec.key] = spec
        if spec.output_store not in store_keys:
            raise errors.UnknownReference(
                f"{source}: provider {spec.key!r} outputs to unknown store"
                f" {spec.output_store!r}"
            )
        if spec.kind == "aneka" and "transfer" not in spec.settings:
            raise errors.ParseError(
                f"{source}: aneka provider {spec.key!r} needs a transfer file store"
            )
        if spec.kind in ("fogbus", "edgelens", "aneka") and "master_url" not in spec.settings:
            raise errors.ParseError(
                f"{source}: provider {spec.key!r} needs settings.master_url"
            )

    for trig in config.triggers:
        if trig.store not in store_keys:
            raise errors.UnknownReference(
                f"{source}: trigger on unknown store {trig.store!r}"
            )
        target = provider_keys.get(trig.start_provider)
        if target is None:
            raise errors.UnknownReference(
                f"{source}: trigger starts unknown provider {trig.start_provider!r}"
            )
        if target.kind in STREAM_KINDS:
            raise errors.UnknownReference(
                f"{source}: trigger target {trig.start_provider!r} is a push source"
                " and cannot be started by a trigger"
            )

    for policy in config.choosers:
        if policy.store_key not in store_keys:
            raise errors.UnknownReference(
                f"{source}: chooser for unknown store {policy.store_key!r}"
            )
        for cand in policy.candidates:
            spec = provider_keys.get(cand)
            if spec is None:
                raise errors.UnknownReference(
                    f"{source}: chooser candidate {cand!r} is not a provider"
                )
            if spec.kind in STREAM_KINDS:
                raise errors.UnknownReference(
                    f"{source}: chooser candidate {cand!r} is a push source"
                )
            if spec.output_store != policy.store_key:
                raise errors.OutputMismatch(
                    f"{source}: candidate {cand!r} outputs to {spec.output_store!r},"
                    f" not {policy.store_key!r}"
                )

    if not config.allow_cycle:
        _check_cycles(config, source)


def _check_cycles(config: PipelineConfig, source: str) -> None:
    """Reject cycles in the store -> trigger -> provider -> store graph."""
    edges: dict[str, list[str]] = {}
    for spec in config.providers:
        edges.setdefault(f"p:{spec.key}", []).append(f"s:{spec.output_store}")
    for trig in config.triggers:
        edges.setdefault(f"s:{trig.store}", []).append(f"p:{trig.start_provider}")

    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[str, int] = {}

    def visit(node: str, trail: list[str]) -> None:
        color[node] = GRAY
        trail.append(node)
        for nxt in edges.get(node, []):
            state = color.get(nxt, WHITE)
            if state == GRAY:
                cycle = " -> ".join(trail[trail.index(nxt):] + [nxt])
                raise errors.CycleDetected(f"{source}: trigger cycle: {cycle}")
            if state == WHITE:
                visit(nxt, trail)
        trail.pop()
        color[node] = BLACK

    for node in list(edges):
        if color.get(node, WHITE) == WHITE:
            visit(node, [])


def serialize_config(config: PipelineConfig) -> dict:
    """Inverse of config_from_dict, modulo field ordering."""
    return {
        "stores": [{"key": s.key, "capacity": s.capacity} for s in config.stores],
        "providers": [
            {
                "key": p.key,
                "kind": p.kind,
                "output_store": p.output_store,
                "settings": p.settings,
            }
            for p in config.providers
        ],
        "triggers": [
            {"store": t.store, "start_provider": t.start_provider}
            for t in config.triggers
        ],
        "choosers": [
            {
                "store": c.store_key,
                "candidates": list(c.candidates),
                "mode": "priority" if c.mode is ChooserMode.PRIORITY else "round-robin",
                "fallback_on_failure": c.fallback_on_failure,
            }
            for c in config.choosers
        ],
        "runtime": {
            "worker_count": config.runtime.worker_count,
            "default_timeout": config.runtime.default_timeout,
            "pending_queue_depth": config.runtime.pending_queue_depth,
            "shutdown_grace": config.runtime.shutdown_grace,
        },
        "allow_cycle": config.allow_cycle,
        **({"control_socket": config.control_socket} if config.control_socket else {}),
    }


def dump_config(config: PipelineConfig) -> str:
    return json.dumps(serialize_config(config), indent=2)


# --- building a live pipeline ------------------------------------------------

def _endpoint_config(settings: dict) -> backends.BackendEndpointConfig:
    transfer = None
    if "transfer" in settings:
        t = settings["transfer"]
        transfer = backends.FileStoreConfig(kind=t["kind"], root=t["root"])
    return backends.BackendEndpointConfig(
        master_url=settings["master_url"],
        poll_interval=float(settings.get("poll_interval", 0.25)),
        poll_limit=int(settings.get("poll_limit", 120)),
        transfer=transfer,
        connect_timeout=float(settings.get("connect_timeout", 5.0)),
    )


def _stream_profile(settings: dict) -> sources.StreamProfile:
    wf_raw = settings.get("waveform", {})
    kind = wf_raw.get("kind")
    if kind == "constant":
        waveform = sources.Constant(
            spo2=int(wf_raw["spo2"]), pulse_bpm=int(wf_raw["pulse_bpm"])
        )
    elif kind == "scripted":
        waveform = sources.Scripted(
            frames=tuple(
                sources.OximeterFrame(spo2=f[0], pulse_bpm=f[1], seq=f[2])
                for f in wf_raw["frames"]
            )
        )
    elif kind == "hypopnea":
        waveform = sources.Hypopnea(
            baseline=int(wf_raw["baseline"]),
            dip_depth=int(wf_raw["dip_depth"]),
            dip_len=int(wf_raw["dip_len"]),
        )
    else:
        raise errors.ProfileInvalid(f"unknown waveform kind {kind!r}")
    return sources.StreamProfile(
        waveform=waveform,
        rate_hz=float(settings.get("rate_hz", 1.0)),
        jitter_ms=int(settings.get("jitter_ms", 0)),
    )


def _provider_body(spec: ProviderSpec):
    """Return (body, input_spec) for a runnable provider kind."""
    s = spec.settings
    if spec.kind == "camera":
        body = sources.camera_body(
            int(s.get("width", 64)), int(s.get("height", 64)), s.get("pattern", "checker")
        )
        return body, InputSpec.NONE
    if spec.kind == "bitmap-convert":
        return sources.bitmap_convert_body(), InputSpec.SINGLE
    if spec.kind == "local":
        return backends.local_body(s.get("transform", "complement")), InputSpec.SINGLE
    if spec.kind == "fogbus":
        return backends.fogbus_body(_endpoint_config(s)), InputSpec.BATCH
    if spec.kind == "edgelens":
        return backends.edgelens_body(_endpoint_config(s)), InputSpec.SINGLE
    if spec.kind == "aneka":
        cfg = _endpoint_config(s)
        body = backends.aneka_body(cfg, s.get("transform", "append-marker"))
        return body, InputSpec.SINGLE
    raise ValueError(f"not a runnable provider kind: {spec.kind!r}")


class Pipeline:
    """A built pipeline: live engine plus the stream sources defined for it."""

    def __init__(self, config: PipelineConfig, engine: Engine):
        self.config = config
        self.engine = engine
        self.streams: list[sources.SensorStream] = []

    def start_streams(self) -> None:
        for spec in self.config.providers:
            if spec.kind in STREAM_KINDS:
                profile = _stream_profile(spec.settings)
                self.streams.append(
                    sources.start_stream(self.engine, profile, spec.output_store)
                )
        if self.streams:
            log.info("started %d stream source(s)", len(self.streams))

    def stop(self) -> None:
        for stream in self.streams:
            try:
                stream.stop()
            except errors.AlreadyStopped:
                pass
        self.streams = []
        if self.engine.is_running:
            self.engine.stop(drain=True)


def build(config: PipelineConfig, engine: Optional[Engine] = None) -> Pipeline:
    """Wire a validated config into an engine; streams stay unstarted."""
    if engine is None:
        engine = Engine(config.runtime)
    if not engine.is_running:
        engine.start()
    for spec in config.stores:
        engine.register_store(spec.key, spec.capacity)
    for spec in config.providers:
        if spec.kind in STREAM_KINDS:
            # Push sources store directly into their target store; they are
            # validated here but not registered as runnable providers.
            _stream_profile(spec.settings).validate()
            continue
        body, input_spec = _provider_body(spec)
        engine.register_provider(spec.key, spec.output_store, body, input_spec)
    for trig in config.triggers:
        engine.attach_trigger(trig.store, StartProvider(trig.start_provider))
    for policy in config.choosers:
        engine.set_chooser(policy)
    return Pipeline(config, engine)
