"""Simulated device sources: a push-based oximeter stream and an on-demand camera.

The oximeter stream models characteristic notifications from a pulse oximeter:
4-byte frames pushed at a configurable rate, each stored under a fresh request
context. The camera renders deterministic P6 (binary PPM) test patterns.
"""

from __future__ import annotations

import logging
import random
import struct
import threading
import time
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from . import errors
from .core import Engine

log = logging.getLogger(__name__)

OXIMETER_MEDIA_TYPE = "application/x-oximeter-frame"
PPM_MEDIA_TYPE = "image/x-portable-pixmap"

FRAME_LEN = 4
SEQ_MOD = 1 << 16
MAX_RATE_HZ = 100.0
MAX_DIMENSION = 4096
# Baseline frames padded around a hypopnea dip (before and after).
EPISODE_PAD = 5


# --- oximeter frames -------------------------------------------------------

@dataclass(frozen=True)
class OximeterFrame:
    """One notification: SpO2 percent, pulse rate, 16-bit sequence number."""

    spo2: int
    pulse_bpm: int
    seq: int

    def encode(self) -> bytes:
        """Wire layout: byte0 spo2, byte1 pulse, bytes 2-3 seq big-endian."""
        if not 0 <= self.spo2 <= 100:
            raise errors.MalformedFrame(f"spo2 {self.spo2} outside [0, 100]")
        if not 0 <= self.pulse_bpm <= 255:
            raise errors.MalformedFrame(f"pulse {self.pulse_bpm} outside [0, 255]")
        if not 0 <= self.seq < SEQ_MOD:
            raise errors.MalformedFrame(f"seq {self.seq} outside [0, 65535]")
        return struct.pack(">BBH", self.spo2, self.pulse_bpm, self.seq)


def decode_frame(payload: bytes) -> OximeterFrame:
    """Decode a 4-byte frame; rejects wrong lengths and impossible SpO2."""
    if len(payload) != FRAME_LEN:
        raise errors.MalformedFrame(
            f"frame must be {FRAME_LEN} bytes, got {len(payload)}"
        )
    spo2, pulse, seq = struct.unpack(">BBH", payload)
    if spo2 > 100:
        raise errors.MalformedFrame(f"spo2 {spo2} > 100")
    return OximeterFrame(spo2=spo2, pulse_bpm=pulse, seq=seq)


# --- waveforms and stream profiles ----------------------------------------

@dataclass(frozen=True)
class Constant:
    """Endless steady readings."""

    spo2: int
    pulse_bpm: int


@dataclass(frozen=True)
class Scripted:
    """Exactly these frames, then the stream self-stops."""

    frames: tuple[OximeterFrame, ...]


@dataclass(frozen=True)
class Hypopnea:
    """A finite episode: baseline, a contiguous SpO2 dip, baseline again."""

    baseline: int
    dip_depth: int
    dip_len: int


Waveform = Union[Constant, Scripted, Hypopnea]

DEFAULT_PULSE_BPM = 72


def _waveform_frames(waveform: Waveform) -> Iterator[OximeterFrame]:
    if isinstance(waveform, Constant):
        seq = 0
        while True:
            yield OximeterFrame(waveform.spo2, waveform.pulse_bpm, seq)
            seq = (seq + 1) % SEQ_MOD
    elif isinstance(waveform, Scripted):
        yield from waveform.frames
    else:
        dipped = waveform.baseline - waveform.dip_depth
        levels = (
            [waveform.baseline] * EPISODE_PAD
            + [dipped] * waveform.dip_len
            + [waveform.baseline] * EPISODE_PAD
        )
        for seq, spo2 in enumerate(levels):
            yield OximeterFrame(spo2, DEFAULT_PULSE_BPM, seq % SEQ_MOD)


@dataclass
class StreamProfile:
    """How the simulated sensor behaves: waveform, rate, timing jitter."""

    waveform: Waveform
    rate_hz: float = 1.0
    jitter_ms: int = 0

    def validate(self) -> None:
        if not 0 < self.rate_hz <= MAX_RATE_HZ:
            raise errors.ProfileInvalid(
                f"rate_hz must be in (0, {MAX_RATE_HZ:g}], got {self.rate_hz!r}"
            )
        if self.jitter_ms < 0:
            raise errors.ProfileInvalid("jitter_ms must be >= 0")
        wf = self.waveform
        if isinstance(wf, Constant):
            if not 0 <= wf.spo2 <= 100 or not 0 <= wf.pulse_bpm <= 255:
                raise errors.ProfileInvalid(f"constant waveform out of range: {wf}")
        elif isinstance(wf, Scripted):
            for frame in wf.frames:
                frame.encode()  # raises MalformedFrame on bad fields
        elif isinstance(wf, Hypopnea):
            if wf.dip_len < 1:
                raise errors.ProfileInvalid("dip_len must be >= 1")
            if not 0 <= wf.baseline <= 100:
                raise errors.ProfileInvalid(f"baseline {wf.baseline} outside [0, 100]")
            if not 0 <= wf.baseline - wf.dip_depth:
                raise errors.ProfileInvalid("dip_depth exceeds baseline")
        else:
            raise errors.ProfileInvalid(f"unknown waveform: {wf!r}")


class SensorStream:
    """Live handle for one running stream; stop() returns the emitted count."""

    def __init__(self, engine: Engine, profile: StreamProfile, store_key: str):
        self._engine = engine
        self._profile = profile
        self._store_key = store_key
        self._stop = threading.Event()
        self._finished = threading.Event()
        self._stopped_by_caller = False
        self._emitted = 0
        self._thread = threading.Thread(
            target=self._run, name=f"gateway-stream-{store_key}", daemon=True
        )

    @property
    def emitted(self) -> int:
        return self._emitted

    @property
    def store_key(self) -> str:
        return self._store_key

    def join(self, timeout: Optional[float] = None) -> bool:
        """Wait for the stream to finish on its own (scripted/episode profiles)."""
        return self._finished.wait(timeout)

    def stop(self) -> int:
        """Stop the stream and return the total number of frames emitted."""
        if self._stopped_by_caller:
            raise errors.AlreadyStopped(f"stream into {self._store_key!r} already stopped")
        self._stopped_by_caller = True
        self._stop.set()
        self._thread.join(timeout=5.0)
        return self._emitted

    def _run(self) -> None:
        interval = 1.0 / self._profile.rate_hz
        jitter_s = self._profile.jitter_ms / 1000.0
        try:
            for frame in _waveform_frames(self._profile.waveform):
                if self._stop.is_set():
                    break
                ctx = self._engine.new_request(origin=f"stream:{self._store_key}")
                self._engine.store(
                    self._store_key,
                    frame.encode(),
                    OXIMETER_MEDIA_TYPE,
                    ctx=ctx,
                )
                self._emitted += 1
                delay = interval
                if jitter_s:
                    delay += random.uniform(0.0, jitter_s)
                if self._stop.wait(delay):
                    break
        except errors.GatewayError as exc:
            log.error("stream into %r aborted: %s", self._store_key, exc)
        finally:
            self._finished.set()


def start_stream(engine: Engine, profile: StreamProfile, target_store: str) -> SensorStream:
    """Validate the profile and start pushing frames into the target store."""
    profile.validate()
    engine.store_handle(target_store)  # raises UnknownStore
    stream = SensorStream(engine, profile, target_store)
    stream._thread.start()
    return stream


def stop_stream(handle: SensorStream) -> int:
    return handle.stop()


# --- deterministic camera ---------------------------------------------------

@dataclass(frozen=True)
class CapturedImage:
    """A rendered P6 test pattern; ``data`` is the complete PPM byte stream."""

    width: int
    height: int
    pattern_id: str
    data: bytes


def ppm_header(width: int, height: int) -> bytes:
    return f"P6\n{width} {height}\n255\n".encode("ascii")


def parse_ppm(data: bytes) -> tuple[int, int, int]:
    """Return (width, height, pixel_offset) of a binary PPM payload."""
    if not data.startswith(b"P6"):
        raise errors.MalformedImage("missing P6 magic")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment line
            end = data.find(b"\n", pos)
            if end == -1:
                raise errors.MalformedImage("unterminated header comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise errors.MalformedImage(f"bad header token {token!r}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise errors.MalformedImage("header not terminated")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise errors.MalformedImage(f"unsupported maxval {maxval}")
    if width < 1 or height < 1:
        raise errors.MalformedImage("degenerate dimensions")
    if len(data) - pos < 3 * width * height:
        raise errors.MalformedImage("truncated pixel data")
    return width, height, pos


def _pattern_pixel(pattern_id: str, x: int, y: int, width: int, height: int) -> bytes:
    if pattern_id == "checker":
        v = 0x00 if (x + y) % 2 == 0 else 0xFF
        return bytes((v, v, v))
    if pattern_id == "gradient":
        r = x * 255 // max(width - 1, 1)
        g = y * 255 // max(height - 1, 1)
        b = (x + y) * 255 // max(width + height - 2, 1)
        return bytes((r, g, b))
    raise errors.UnknownPattern(f"no pattern {pattern_id!r}")


def capture(width: int, height: int, pattern_id: str) -> CapturedImage:
    """Render a deterministic P6 test image; pure function of its arguments."""
    if not (1 <= width <= MAX_DIMENSION and 1 <= height <= MAX_DIMENSION):
        raise errors.BadDimensions(
            f"dimensions must be in [1, {MAX_DIMENSION}], got {width}x{height}"
        )
    if pattern_id.startswith("solid:"):
        hexcode = pattern_id[len("solid:") :]
        if len(hexcode) != 6:
            raise errors.UnknownPattern(f"solid pattern needs RRGGBB, got {hexcode!r}")
        try:
            rgb = bytes.fromhex(hexcode)
        except ValueError:
            raise errors.UnknownPattern(f"bad solid color {hexcode!r}") from None
        pixels = rgb * (width * height)
    else:
        buf = bytearray()
        for y in range(height):
            for x in range(width):
                buf += _pattern_pixel(pattern_id, x, y, width, height)
        pixels = bytes(buf)
    return CapturedImage(width, height, pattern_id, ppm_header(width, height) + pixels)


def camera_body(width: int, height: int, pattern_id: str):
    """Provider body producing the configured test image on every run."""
    def body(call):
        image = capture(width, height, pattern_id)
        return image.data, PPM_MEDIA_TYPE

    return body


def bitmap_convert_body():
    """Provider body standing in for byte-array to displayable-image conversion.

    Validates that the input parses as P6 and republishes the bytes under the
    image media type, the way the original pipeline rewraps raw photo bytes
    into a drawable object.
    """
    def body(call):
        env = call.input
        if env is None:
            raise errors.MalformedImage("bitmap conversion needs an input envelope")
        parse_ppm(env.payload)
        return env.payload, PPM_MEDIA_TYPE

    return body
