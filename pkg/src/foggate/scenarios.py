"""Scripted end-to-end scenarios reproducing both case studies at desk scale.

Every scenario is hermetic: it builds its own engine, hosts its own mocks on
OS-assigned ports, runs the pipeline, and checks byte-exact results plus
request-id continuity. The report carries one pass/fail entry per step.
"""

from __future__ import annotations

import logging
import tempfile
import threading
import time
from dataclasses import dataclass, field

from . import errors
from .backends import (
    BackendEndpointConfig,
    DETECTION_MARKER,
    HYPOPNEA_SPO2_THRESHOLD,
    LocalDirectoryStore,
    aneka_body,
    edgelens_body,
    fogbus_body,
)
from .core import (
    ChooserMode,
    ChooserPolicy,
    Engine,
    InputSpec,
    ProviderState,
    StartProvider,
)
from .mocks import AnekaMock, EdgeLensMasterMock, EdgeLensWorkerMock, FogBusMock
from .runtime import RuntimeConfig
from .sources import (
    Hypopnea,
    StreamProfile,
    bitmap_convert_body,
    camera_body,
    capture,
    decode_frame,
    start_stream,
)

log = logging.getLogger(__name__)


@dataclass
class ScenarioStep:
    description: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    scenario_id: str
    steps: list[ScenarioStep] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(step.passed for step in self.steps)

    def check(self, description: str, ok: bool, detail: str = "") -> None:
        self.steps.append(ScenarioStep(description, bool(ok), detail))

    def raise_if_failed(self) -> None:
        for step in self.steps:
            if not step.passed:
                raise errors.ScenarioFailed(f"{self.scenario_id}: {step.description}"
                                            f" ({step.detail})")


def _engine(worker_count: int = 4) -> Engine:
    eng = Engine(RuntimeConfig(worker_count=worker_count, default_timeout=15.0))
    eng.start()
    return eng


def _scenario_oximeter_fogbus(report: ScenarioReport) -> None:
    dip_len = 5
    profile = StreamProfile(
        waveform=Hypopnea(baseline=97, dip_depth=10, dip_len=dip_len),
        rate_hz=50.0,
    )
    with FogBusMock() as mock:
        eng = _engine()
        try:
            eng.register_store("oximeter-raw", 256)
            eng.register_store("analysis-out", 16)
            eng.register_provider(
                "fogbus",
                "analysis-out",
                fogbus_body(BackendEndpointConfig(master_url=mock.url)),
                InputSpec.BATCH,
            )

            stream = start_stream(eng, profile, "oximeter-raw")
            finished = stream.join(timeout=5.0)
            emitted = stream.stop()
            report.check("episode stream self-stops", finished)
            report.check(
                "episode emits pad + dip + pad frames",
                emitted == dip_len + 10,
                f"emitted={emitted}",
            )

            batch = eng.retrieve_latest("oximeter-raw", emitted)
            dips = sum(
                1
                for env in batch
                if decode_frame(env.payload).spo2 < HYPOPNEA_SPO2_THRESHOLD
            )
            report.check(
                "independent frame scan finds the scripted dips",
                dips == dip_len,
                f"dips={dips}",
            )

            rid = eng.run_provider("fogbus", input=batch)
            result = eng.wait_for_request("analysis-out", rid, timeout=5.0)
            expected = f"HYPOPNEA:{dip_len}".encode()
            report.check(
                "analysis result equals the scripted dip length",
                result.payload == expected,
                f"payload={result.payload!r}",
            )
            report.check(
                "single proxied request reached the master",
                mock.request_count() == 1,
                f"requests={len(mock.requests)}",
            )
        finally:
            eng.stop()


def _camera_pipeline(eng: Engine, detect_key: str, detect_body, input_spec=InputSpec.SINGLE):
    """photo-raw --trigger--> detect --trigger--> display, plus a preview bitmap."""
    eng.register_store("photo-raw", 8)
    eng.register_store("photo-display", 8)
    eng.register_store("detect-out", 8)
    eng.register_store("display", 8)
    eng.register_provider("camera", "photo-raw", camera_body(8, 8, "checker"), InputSpec.NONE)
    eng.register_provider("preview", "photo-display", bitmap_convert_body())
    eng.register_provider(detect_key, "detect-out", detect_body, input_spec)
    eng.register_provider("render", "display", bitmap_convert_body())
    eng.attach_trigger("photo-raw", StartProvider("preview"))
    eng.attach_trigger("photo-raw", StartProvider(detect_key))
    eng.attach_trigger("detect-out", StartProvider("render"))


def _scenario_camera_edgelens(report: ScenarioReport) -> None:
    image = capture(8, 8, "checker")
    # Independent oracle: complement the pattern bytes directly, keep header.
    header_len = len(b"P6\n8 8\n255\n")
    expected = image.data[:header_len] + bytes(
        b ^ 0xFF for b in image.data[header_len:]
    )

    with EdgeLensWorkerMock(transform="complement", polls_until_ready=1) as worker:
        with EdgeLensMasterMock(worker_url=worker.url) as master:
            eng = _engine()
            try:
                cfg = BackendEndpointConfig(master_url=master.url, poll_interval=0.05)
                _camera_pipeline(eng, "edgelens", edgelens_body(cfg))

                rid = eng.run_provider("camera")
                shown = eng.wait_for_request("display", rid, timeout=8.0)
                report.check(
                    "display holds the complemented image, header preserved",
                    shown.payload == expected,
                    f"payload[:16]={shown.payload[:16].hex()}",
                )

                photo = eng.wait_for_request("photo-raw", rid, timeout=1.0)
                detected = eng.wait_for_request("detect-out", rid, timeout=1.0)
                report.check(
                    "one request id flows camera -> detect -> display",
                    photo.request_id == detected.request_id == shown.request_id == rid,
                )
                polls = worker.request_count("GET", "/result/")
                report.check(
                    "worker saw upload, execute, and the polls",
                    worker.request_count() == 2 + polls and polls == 2,
                    f"worker_requests={len(worker.requests)} polls={polls}",
                )
                report.check(
                    "master answered exactly one worker query",
                    master.request_count() == 1,
                )
            finally:
                eng.stop()


def _scenario_camera_aneka(report: ScenarioReport) -> None:
    image = capture(8, 8, "checker")
    expected = image.data + DETECTION_MARKER  # byte concatenation oracle

    with tempfile.TemporaryDirectory(prefix="gateway-aneka-") as root:
        client_fs = LocalDirectoryStore(root)
        mock_fs = LocalDirectoryStore(root)
        with AnekaMock(mock_fs, poll_states=("Submitted", "Running", "Completed")) as master:
            eng = _engine()
            try:
                cfg = BackendEndpointConfig(master_url=master.url, poll_interval=0.05)
                body = aneka_body(cfg, "append-marker", file_store=client_fs)
                _camera_pipeline(eng, "aneka", body)

                rid = eng.run_provider("camera")
                shown = eng.wait_for_request("display", rid, timeout=8.0)
                report.check(
                    "display holds image bytes plus the detection marker",
                    shown.payload == expected,
                    f"size={len(shown.payload)}",
                )
                detected = eng.wait_for_request("detect-out", rid, timeout=1.0)
                report.check(
                    "one request id flows camera -> detect -> display",
                    detected.request_id == shown.request_id == rid,
                )
                report.check(
                    "client issued exactly one put and one get",
                    [r.op for r in client_fs.log] == ["put", "get"],
                    f"log={[r.op for r in client_fs.log]}",
                )
                polls = master.request_count("GET", "/tasks/")
                report.check(
                    "task polled through Submitted, Running, Completed",
                    polls == 3 and master.request_count("POST", "/tasks") == 1,
                    f"polls={polls}",
                )
            finally:
                eng.stop()


def _scenario_chooser_fallback(report: ScenarioReport) -> None:
    eng = _engine(worker_count=2)
    try:
        eng.register_store("detect-out", 16)
        gate = threading.Event()
        aneka_gate = threading.Event()
        aneka_gate.set()
        edgelens_mode = {"fail": False}
        edgelens_runs = []

        def edgelens_sim(call):
            edgelens_runs.append(time.monotonic())
            if edgelens_mode["fail"]:
                raise RuntimeError("simulated permanent backend failure")
            gate.wait(5.0)
            return b"from-edgelens"

        def aneka_sim(call):
            aneka_gate.wait(5.0)
            return b"from-aneka"

        eng.register_provider("edgelens", "detect-out", edgelens_sim, InputSpec.NONE)
        eng.register_provider("aneka", "detect-out", aneka_sim, InputSpec.NONE)
        eng.set_chooser(
            ChooserPolicy(
                store_key="detect-out",
                candidates=["edgelens", "aneka"],
                mode=ChooserMode.PRIORITY,
                fallback_on_failure=True,
            )
        )

        # Jam the preferred provider, then ask for data: the busy-skip must
        # route the request to the second candidate.
        eng.run_provider("edgelens")
        deadline = time.monotonic() + 2.0
        while eng.provider_state("edgelens") is not ProviderState.RUNNING:
            if time.monotonic() > deadline:
                break
            time.sleep(0.005)
        busy_state = eng.provider_state("edgelens")
        rid = eng.produce_data("detect-out")
        served = eng.wait_for_request("detect-out", rid, timeout=5.0)
        report.check(
            "aneka selected while edgelens Running",
            busy_state is ProviderState.RUNNING and served.producer_key == "aneka",
            f"edgelens={busy_state.value} producer={served.producer_key}",
        )

        gate.set()
        eng.quiesce(5.0)

        # Fail the preferred provider permanently; an Idle candidate must
        # still win over a Failed one.
        edgelens_mode["fail"] = True
        eng.run_provider("edgelens")
        eng.quiesce(5.0)
        report.check(
            "edgelens Failed after its body raised",
            eng.provider_state("edgelens") is ProviderState.FAILED,
            eng.describe_provider("edgelens").last_error or "",
        )
        rid2 = eng.produce_data("detect-out")
        served2 = eng.wait_for_request("detect-out", rid2, timeout=5.0)
        report.check(
            "idle aneka preferred over failed edgelens",
            served2.producer_key == "aneka",
        )

        # With aneka busy too, fallback_on_failure retries the failed one.
        runs_before = len(edgelens_runs)
        aneka_gate.clear()
        eng.run_provider("aneka")
        deadline = time.monotonic() + 2.0
        while eng.provider_state("aneka") is not ProviderState.RUNNING:
            if time.monotonic() > deadline:
                break
            time.sleep(0.005)
        eng.produce_data("detect-out")
        deadline = time.monotonic() + 2.0
        while len(edgelens_runs) == runs_before and time.monotonic() < deadline:
            time.sleep(0.005)
        report.check(
            "failed edgelens retried when every other candidate is busy",
            len(edgelens_runs) == runs_before + 1,
            f"runs={len(edgelens_runs)}",
        )
        aneka_gate.set()
        eng.quiesce(5.0)
    finally:
        eng.stop()


_SCENARIOS = {
    "oximeter-fogbus": _scenario_oximeter_fogbus,
    "camera-edgelens": _scenario_camera_edgelens,
    "camera-aneka": _scenario_camera_aneka,
    "chooser-fallback": _scenario_chooser_fallback,
}

SCENARIO_IDS = tuple(_SCENARIOS)


def run_scenario(scenario_id: str) -> ScenarioReport:
    """Run one built-in scenario and return its step-by-step report."""
    runner = _SCENARIOS.get(scenario_id)
    if runner is None:
        raise ValueError(
            f"unknown scenario {scenario_id!r}; known: {', '.join(SCENARIO_IDS)}"
        )
    report = ScenarioReport(scenario_id)
    started = time.monotonic()
    try:
        runner(report)
    except Exception as exc:  # an unexpected crash is itself a failing step
        log.exception("scenario %s crashed", scenario_id)
        report.check("scenario completed without errors", False, repr(exc))
    report.elapsed = time.monotonic() - started
    return report
