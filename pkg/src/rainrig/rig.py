"""Two-pass capture orchestration against an abstract device set.

The capture loop is a single sequential control flow: display, settle,
trigger. Devices are anything satisfying the small display/camera/sprayer
protocols — the simulated backend in :mod:`rainrig.droplet_sim` or real
hardware drivers supplied by the caller. A clock is injected so tests and
the simulated backend never sleep.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .calibration import Homography, warp_image
from .errors import CaptureAborted, ConfigurationError
from .imgio import save_png


class Display(Protocol):
    def show(self, image: np.ndarray) -> None: ...


class Camera(Protocol):
    def trigger(self) -> np.ndarray: ...


class Sprayer(Protocol):
    def set_pressure(self, pressure: float) -> None: ...

    def off(self) -> None: ...


@dataclass
class DeviceSet:
    display: Display
    camera: Camera
    sprayer: Sprayer


@dataclass(frozen=True)
class RigConfig:
    """Physical layout and capture cadence of the rig."""

    screen_distance_mm: float = 320.0
    pane_offset_mm: float = 170.0
    pane_tilt_deg: float = 20.0
    capture_rate_hz: float = 1.0
    lights_off: bool = True
    settle_delay_s: float = 0.2

    def __post_init__(self):
        if not self.pane_offset_mm < self.screen_distance_mm:
            raise ConfigurationError("pane_offset_mm must be less than screen_distance_mm")
        if not 0 <= self.pane_tilt_deg < 90:
            raise ConfigurationError("pane_tilt_deg must be in [0, 90)")
        if self.capture_rate_hz <= 0:
            raise ConfigurationError("capture_rate_hz must be positive")
        if self.settle_delay_s < 0:
            raise ConfigurationError("settle_delay_s must be non-negative")

    def to_dict(self) -> dict:
        return {
            "screen_distance_mm": self.screen_distance_mm,
            "pane_offset_mm": self.pane_offset_mm,
            "pane_tilt_deg": self.pane_tilt_deg,
            "capture_rate_hz": self.capture_rate_hz,
            "lights_off": self.lights_off,
            "settle_delay_s": self.settle_delay_s,
        }


@dataclass(frozen=True)
class CaptureRecord:
    """One raw frame. ``timestamp`` is the frame's capture slot on the pass clock."""

    source_id: str
    pass_kind: str  # "clear" | "rainy"
    raw_image: np.ndarray
    timestamp: float
    pressure_at_capture: float = 0.0

    def __post_init__(self):
        if self.pass_kind not in ("clear", "rainy"):
            raise ConfigurationError(f"unknown pass_kind {self.pass_kind!r}")
        if self.pass_kind == "clear" and self.pressure_at_capture != 0.0:
            raise ConfigurationError("clear-pass records must have zero pressure")
        if not 0 <= self.pressure_at_capture <= 1:
            raise ConfigurationError("pressure_at_capture must be in [0, 1]")


@dataclass(frozen=True)
class PressureSchedule:
    """Piecewise-constant pump pressure over time, reproducible from its seed."""

    samples: tuple[tuple[float, float], ...]  # (time_s, pressure)
    seed: int
    duration_s: float

    def __post_init__(self):
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError("schedule times must be strictly increasing")
        if any(not 0 <= p <= 1 for _, p in self.samples):
            raise ConfigurationError("schedule pressures must be in [0, 1]")

    def pressure_at(self, t: float) -> float:
        if not self.samples:
            return 0.0
        current = self.samples[0][1]
        for ts, p in self.samples:
            if ts <= t:
                current = p
            else:
                break
        return current


def randomized_pressure_regimen(
    seed: int,
    duration: float,
    bounds: tuple[float, float] = (0.3, 0.9),
) -> PressureSchedule:
    """Random piecewise-constant schedule: dwell times uniform in [2 s, 10 s],
    pressures uniform in ``bounds``. Identical seeds give identical schedules."""
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    lo, hi = bounds
    if not 0 <= lo <= hi <= 1:
        raise ConfigurationError(f"invalid pressure bounds {bounds}")
    rng = np.random.default_rng(seed)
    samples = []
    t = 0.0
    while t < duration:
        samples.append((t, float(rng.uniform(lo, hi))))
        t += float(rng.uniform(2.0, 10.0))
    return PressureSchedule(samples=tuple(samples), seed=seed, duration_s=duration)


class SimulatedClock:
    """Monotonic virtual clock; sleeping just advances it."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._t += seconds

    def wait_until(self, t: float) -> None:
        if t > self._t:
            self._t = t


class WallClock:
    def __init__(self):
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def wait_until(self, t: float) -> None:
        self.sleep(t - self.now())


SourceImages = Sequence[tuple[str, np.ndarray]]


def _run_pass(
    sources: SourceImages,
    devices: DeviceSet,
    config: RigConfig,
    pass_kind: str,
    schedule: PressureSchedule | None,
    clock,
) -> list[CaptureRecord]:
    records: list[CaptureRecord] = []
    period = 1.0 / config.capture_rate_hz
    try:
        for k, (source_id, image) in enumerate(sources):
            slot = k * period  # one multiply, so inter-frame gaps stay exact
            clock.wait_until(slot)
            pressure = 0.0
            if pass_kind == "rainy":
                pressure = schedule.pressure_at(clock.now())
                devices.sprayer.set_pressure(pressure)
            devices.display.show(image)
            clock.sleep(config.settle_delay_s)
            raw = devices.camera.trigger()
            records.append(
                CaptureRecord(
                    source_id=source_id,
                    pass_kind=pass_kind,
                    raw_image=raw,
                    timestamp=slot,
                    pressure_at_capture=pressure,
                )
            )
    except Exception as exc:  # device fault: abort, keep what we have
        raise CaptureAborted(
            f"{pass_kind} pass aborted after {len(records)} of {len(sources)} frames: {exc}",
            partial_records=records,
            cause=exc,
        ) from exc
    finally:
        if pass_kind == "rainy":
            devices.sprayer.off()
    return records


def run_clear_pass(
    sources: SourceImages,
    devices: DeviceSet,
    config: RigConfig,
    clock=None,
) -> list[CaptureRecord]:
    """First pass: photograph every source through the dry pane, sprayer off."""
    if not config.lights_off:
        raise ConfigurationError("refusing to capture with room lights on")
    clock = clock if clock is not None else WallClock()
    devices.sprayer.off()
    return _run_pass(sources, devices, config, "clear", None, clock)


def run_rainy_pass(
    sources: SourceImages,
    devices: DeviceSet,
    config: RigConfig,
    schedule: PressureSchedule,
    clock=None,
) -> list[CaptureRecord]:
    """Second pass: drive the sprayer from ``schedule`` and reshoot every source."""
    if not config.lights_off:
        raise ConfigurationError("refusing to capture with room lights on")
    expected = len(sources) / config.capture_rate_hz
    if schedule.duration_s < expected:
        raise ConfigurationError(
            f"pressure schedule covers {schedule.duration_s:.1f}s but the pass needs {expected:.1f}s"
        )
    clock = clock if clock is not None else WallClock()
    return _run_pass(sources, devices, config, "rainy", schedule, clock)


def align_capture(record: CaptureRecord, h: Homography, out_size: tuple[int, int]) -> np.ndarray:
    """Warp a raw capture into monitor pixel coordinates, cropped to ``out_size``."""
    return warp_image(record.raw_image, h.inverse(), out_size)


def save_session(
    session_dir: str | Path,
    records: Sequence[CaptureRecord],
    homography: Homography | None = None,
) -> Path:
    """Write raw captures and the JSONL session log under ``session_dir``.

    Layout: ``<session_dir>/<pass>/<source_id>.png`` plus ``session.jsonl``
    whose header row carries the session homography.
    """
    session_dir = Path(session_dir)
    session_dir.mkdir(parents=True, exist_ok=True)
    log_path = session_dir / "session.jsonl"
    exists = log_path.exists()
    with open(log_path, "a", encoding="utf-8") as f:
        if not exists:
            header = {
                "type": "session",
                "homography": homography.to_flat() if homography else None,
            }
            f.write(json.dumps(header, sort_keys=True) + "\n")
        for i, rec in enumerate(records):
            save_png(session_dir / rec.pass_kind / f"{rec.source_id}.png", rec.raw_image)
            row = {
                "type": "frame",
                "frame": i,
                "source_id": rec.source_id,
                "pass": rec.pass_kind,
                "timestamp": rec.timestamp,
                "pressure": rec.pressure_at_capture,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return log_path
