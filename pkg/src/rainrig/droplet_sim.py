"""Simulated rig backend: adherent droplets and streaks on a virtual glass pane.

A droplet behaves as a small wide-angle lens: pixels inside it sample the
displayed scene from a larger footprint (scale factor > 1), inverted for
strong droplets, blurred, hazy, with a darkened rim band, and washed toward
gray when the sampled footprint spans most of the frame. The virtual camera
adds the pane's fixed refraction shift, a small projective misalignment, and
sensor noise — so the whole two-pass capture protocol runs hardware-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import cv2
import numpy as np

from .calibration import Homography, warp_image
from .errors import ConfigurationError, SamplingError
from .imgio import luminance

# Lens strength per unit height_ratio. Chosen so the signed sampling scale
# s = 1/(1 - LENS_GAIN*h) keeps |s| > 1 on all h in (0, 1]: weak caps magnify
# upright, caps past h = 1/LENS_GAIN image inverted like a strong convex lens.
LENS_GAIN = 1.9
_MAX_LENS_SCALE = 25.0

GRAYOUT_AREA_FRACTION = 0.6  # sampled-footprint fraction of frame that starts the gray wash
RIM_BAND_FRACTION = 0.18  # rim band width, relative to droplet radius
RIM_MAX_DARKENING = 0.65
EDGE_SOFT_PX = 1.0

# Lateral shift (px) of the whole image caused by the tilted pane, per unit
# tan(tilt). The exact value is irrelevant to the pipeline: the clear pass
# exists to bake the same shift into both images.
PANE_SHIFT_PX_PER_TAN = 6.0

_SAMPLE_MAX_ATTEMPTS = 20000
_COVERAGE_OVERSHOOT = 1.1


def lens_scale(height_ratio: float) -> float:
    """Signed scene-sampling scale for a spherical-cap droplet.

    Magnitude is the per-axis source footprint factor (k), sign is the image
    orientation (negative = inverted). |k| > 1 for every height_ratio > 0.
    """
    if height_ratio < 0:
        raise ConfigurationError("height_ratio must be non-negative")
    denom = 1.0 - LENS_GAIN * height_ratio
    if abs(denom) < 1.0 / _MAX_LENS_SCALE:
        return math.copysign(_MAX_LENS_SCALE, denom)
    return 1.0 / denom


@dataclass(frozen=True)
class Droplet:
    """One adherent droplet (or streak, when elongated) on the glass plane."""

    center: tuple[float, float]
    radius: float
    height_ratio: float = 0.8
    blur_sigma: float = 0.0
    opacity: float = 0.0
    elongation: float = 1.0
    orientation_deg: float = 90.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError("droplet radius must be positive")
        if not 0 < self.height_ratio <= 1:
            raise ConfigurationError("height_ratio must be in (0, 1]")
        if self.blur_sigma < 0:
            raise ConfigurationError("blur_sigma must be non-negative")
        if not 0 <= self.opacity <= 1:
            raise ConfigurationError("opacity must be in [0, 1]")
        if self.elongation < 1:
            raise ConfigurationError("elongation must be >= 1")

    @property
    def semi_axes(self) -> tuple[float, float]:
        """(major, minor) semi-axes in px; major lies along orientation_deg."""
        return self.radius * self.elongation, self.radius

    def footprint_area(self) -> float:
        a, b = self.semi_axes
        return math.pi * a * b

    def to_dict(self) -> dict:
        return {
            "center": [self.center[0], self.center[1]],
            "radius": self.radius,
            "height_ratio": self.height_ratio,
            "blur_sigma": self.blur_sigma,
            "opacity": self.opacity,
            "elongation": self.elongation,
            "orientation_deg": self.orientation_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Droplet":
        return cls(
            center=(d["center"][0], d["center"][1]),
            radius=d["radius"],
            height_ratio=d["height_ratio"],
            blur_sigma=d["blur_sigma"],
            opacity=d["opacity"],
            elongation=d["elongation"],
            orientation_deg=d["orientation_deg"],
        )


@dataclass(frozen=True)
class DropletField:
    """Deterministic set of droplets for one virtual pane of ``plane_size``."""

    droplets: tuple[Droplet, ...]
    seed: int
    density: float
    plane_size: tuple[int, int]  # (width, height)

    def coverage_mask(self) -> np.ndarray:
        w, h = self.plane_size
        mask = np.zeros((h, w), dtype=bool)
        for d in self.droplets:
            y0, y1, x0, x1, rho = _droplet_local_rho(d, (h, w), pad=0.0)
            if rho is None:
                continue
            mask[y0:y1, x0:x1] |= rho <= 1.0
        return mask

    def coverage(self) -> float:
        w, h = self.plane_size
        return float(self.coverage_mask().sum()) / float(w * h)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "density": self.density,
            "plane_size": [self.plane_size[0], self.plane_size[1]],
            "droplets": [d.to_dict() for d in self.droplets],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DropletField":
        d = json.loads(text)
        return cls(
            droplets=tuple(Droplet.from_dict(x) for x in d["droplets"]),
            seed=d["seed"],
            density=d["density"],
            plane_size=(d["plane_size"][0], d["plane_size"][1]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DropletField":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def empty_field(plane_size: tuple[int, int], seed: int = 0) -> DropletField:
    return DropletField(droplets=(), seed=seed, density=0.0, plane_size=plane_size)


@dataclass(frozen=True)
class SceneGeometry:
    """Virtual rig geometry plus the camera's projective misalignment."""

    screen_distance_mm: float = 320.0
    pane_offset_mm: float = 170.0
    pane_tilt_deg: float = 20.0
    capture_perturbation: Homography = dc_field(default_factory=Homography.identity)

    def __post_init__(self):
        if not self.pane_offset_mm < self.screen_distance_mm:
            raise ConfigurationError("pane must sit between screen and camera")
        if not 0 <= self.pane_tilt_deg < 90:
            raise ConfigurationError("pane_tilt_deg must be in [0, 90)")

    def refraction_shift(self) -> tuple[float, float]:
        """Constant (dx, dy) image shift from the tilted flat pane, in px."""
        dy = PANE_SHIFT_PX_PER_TAN * math.tan(math.radians(self.pane_tilt_deg))
        return 0.0, dy


def _droplet_local_rho(d: Droplet, shape_hw: tuple[int, int], pad: float):
    """Bounding box and normalized elliptical radius grid for a droplet.

    Returns (y0, y1, x0, x1, rho) with rho = 1 on the droplet boundary, or
    (..., None) when the footprint misses the image entirely.
    """
    h, w = shape_hw
    a, b = d.semi_axes
    phi = math.radians(d.orientation_deg)
    cos_p, sin_p = math.cos(phi), math.sin(phi)
    ext_x = math.hypot(a * cos_p, b * sin_p) + pad
    ext_y = math.hypot(a * sin_p, b * cos_p) + pad
    cx, cy = d.center
    x0 = max(0, int(math.floor(cx - ext_x)))
    x1 = min(w, int(math.ceil(cx + ext_x)) + 1)
    y0 = max(0, int(math.floor(cy - ext_y)))
    y1 = min(h, int(math.ceil(cy + ext_y)) + 1)
    if x0 >= x1 or y0 >= y1:
        return 0, 0, 0, 0, None
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    u_along = dx * cos_p + dy * sin_p
    u_perp = -dx * sin_p + dy * cos_p
    rho = np.sqrt((u_along / a) ** 2 + (u_perp / b) ** 2)
    return y0, y1, x0, x1, rho


@dataclass(frozen=True)
class RenderedDroplet:
    """Patch of one rendered droplet: ``patch``/``alpha`` cover image[y0:y1, x0:x1]."""

    patch: np.ndarray
    alpha: np.ndarray
    y0: int
    y1: int
    x0: int
    x1: int


def render_droplet(scene: np.ndarray, d: Droplet, geom: SceneGeometry) -> RenderedDroplet | None:
    """Render one droplet against ``scene``; returns None if it misses the frame."""
    h, w = scene.shape[:2]
    pad = 3.0 * d.blur_sigma + 2.0
    y0, y1, x0, x1, rho = _droplet_local_rho(d, (h, w), pad=pad)
    if rho is None:
        return None

    s = lens_scale(d.height_ratio)
    cx, cy = d.center
    ys, xs = np.mgrid[y0:y1, x0:x1]
    map_x = (cx + s * (xs - cx)).astype(np.float32)
    map_y = (cy + s * (ys - cy)).astype(np.float32)
    src = np.ascontiguousarray(scene, dtype=np.float32)
    patch = cv2.remap(src, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)

    if d.blur_sigma > 0:
        patch = cv2.GaussianBlur(patch, (0, 0), d.blur_sigma)

    gray = float(luminance(scene).mean())
    if d.opacity > 0:
        patch = (1.0 - d.opacity) * patch + d.opacity * gray

    # Total-internal-reflection dark band at the boundary; vanishes for flat films.
    k = abs(s)
    rim_strength = RIM_MAX_DARKENING * (1.0 - 1.0 / (k * k))
    if rim_strength > 0:
        band = np.clip((rho - (1.0 - RIM_BAND_FRACTION)) / RIM_BAND_FRACTION, 0.0, 1.0)
        factor = 1.0 - rim_strength * band
        patch = patch * (factor if patch.ndim == 2 else factor[..., None])

    # Droplets that gather light from most of the frame wash out to gray.
    frac = (k * k * d.footprint_area()) / float(w * h)
    if frac > GRAYOUT_AREA_FRACTION:
        wash = min(1.0, (frac - GRAYOUT_AREA_FRACTION) / (1.0 - GRAYOUT_AREA_FRACTION))
        patch = (1.0 - wash) * patch + wash * gray

    edge_px = max(min(d.semi_axes), 1.0)
    alpha = np.clip((1.0 - rho) * edge_px / EDGE_SOFT_PX, 0.0, 1.0).astype(np.float32)
    return RenderedDroplet(patch=patch.astype(np.float32), alpha=alpha, y0=y0, y1=y1, x0=x0, x1=x1)


def composite_rainy(scene: np.ndarray, field: DropletField, geom: SceneGeometry) -> np.ndarray:
    """Paste the field's droplets over ``scene``, larger (farther) droplets first.

    Every droplet refracts the original scene; pixels outside the union of
    droplet supports are returned bit-exact.
    """
    if scene.size == 0:
        raise ConfigurationError("scene is empty")
    if not field.droplets:
        return scene.copy()
    out = scene.astype(np.float32).copy()
    for d in sorted(field.droplets, key=lambda x: x.radius, reverse=True):
        r = render_droplet(scene, d, geom)
        if r is None:
            continue
        alpha = r.alpha if out.ndim == 2 else r.alpha[..., None]
        region = out[r.y0 : r.y1, r.x0 : r.x1]
        touched = r.alpha > 0
        blended = (1.0 - alpha) * region + alpha * r.patch
        region[touched] = blended[touched]
    return np.clip(out, 0.0, 1.0)


def sample_droplet_field(
    seed: int,
    density: float,
    radius_range: tuple[float, float],
    streak_fraction: float = 0.15,
    plane_size: tuple[int, int] = (640, 360),
) -> DropletField:
    """Draw droplets until their union covers ``density`` of the plane.

    Radii are log-uniform in ``radius_range``; a ``streak_fraction`` share of
    droplets become gravity-biased elongated streaks. Deterministic per seed;
    realized coverage lands in [density, 1.1 * density].
    """
    if not 0 <= density <= 0.5:
        raise ConfigurationError("density must be in [0, 0.5]")
    r_min, r_max = radius_range
    if not 0 < r_min <= r_max:
        raise ConfigurationError("invalid radius_range")
    if not 0 <= streak_fraction <= 1:
        raise ConfigurationError("streak_fraction must be in [0, 1]")
    w, h = plane_size
    if density == 0:
        return empty_field(plane_size, seed=seed)

    rng = np.random.default_rng(seed)
    target_px = density * w * h
    cap_px = target_px * _COVERAGE_OVERSHOOT
    covered = np.zeros((h, w), dtype=bool)
    covered_px = 0
    droplets: list[Droplet] = []
    attempts = 0
    while covered_px < target_px:
        attempts += 1
        if attempts > _SAMPLE_MAX_ATTEMPTS:
            raise SamplingError(
                f"coverage {covered_px / (w * h):.4f} of target {density:.4f} "
                f"not reachable with radii in {radius_range} after {attempts - 1} attempts"
            )
        radius = float(r_min * (r_max / r_min) ** rng.random())
        center = (float(rng.uniform(0, w)), float(rng.uniform(0, h)))
        if rng.random() < streak_fraction:
            elongation = float(rng.uniform(2.0, 5.0))
            orientation = float(90.0 + rng.normal(0.0, 12.0))  # streaks run downward
        else:
            elongation = float(rng.uniform(1.0, 1.3))
            orientation = float(rng.uniform(0.0, 180.0))
        d = Droplet(
            center=center,
            radius=radius,
            height_ratio=float(rng.uniform(0.55, 0.95)),
            blur_sigma=float(rng.uniform(0.3, 2.5)),
            opacity=float(rng.uniform(0.02, 0.2)),
            elongation=elongation,
            orientation_deg=orientation,
        )
        y0, y1, x0, x1, rho = _droplet_local_rho(d, (h, w), pad=0.0)
        if rho is None:
            continue
        support = rho <= 1.0
        added = int((support & ~covered[y0:y1, x0:x1]).sum())
        if covered_px + added > cap_px:
            continue  # would overshoot the coverage budget; redraw
        covered[y0:y1, x0:x1] |= support
        covered_px += added
        droplets.append(d)
    return DropletField(droplets=tuple(droplets), seed=seed, density=density, plane_size=plane_size)


def simulate_capture(
    displayed: np.ndarray,
    pass_kind: str,
    field: DropletField | None,
    geom: SceneGeometry,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Virtual camera frame of the displayed image.

    Stages, in order: rainy compositing (rainy pass only), the pane's fixed
    refraction shift (both passes), the capture perturbation homography, and
    additive Gaussian sensor noise clipped to [0, 1].
    """
    if pass_kind not in ("clear", "rainy"):
        raise ConfigurationError(f"unknown pass_kind {pass_kind!r}")
    h, w = displayed.shape[:2]
    img = displayed.astype(np.float32)
    if pass_kind == "rainy" and field is not None and field.droplets:
        if field.plane_size != (w, h):
            raise ConfigurationError(
                f"droplet field plane {field.plane_size} does not match displayed image {(w, h)}"
            )
        img = composite_rainy(img, field, geom)
    shift = Homography.translation(*geom.refraction_shift())
    cam = geom.capture_perturbation.compose(shift)
    img = warp_image(img, cam, (w, h))
    if noise_sigma > 0:
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(0 if rng is None else int(rng))
        img = img + rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


class SimulatedRig:
    """Hardware-free DeviceSet backend driving the droplet compositor.

    The sprayer spawns droplets proportionally to its pressure: each trigger
    under pressure p renders a fresh field of density ``max_density * p``
    whose seed derives from (droplet_seed, frame index), so a rig with fixed
    seeds is bit-reproducible.
    """

    def __init__(
        self,
        geometry: SceneGeometry | None = None,
        monitor_size: tuple[int, int] = (640, 360),
        droplet_seed: int = 0,
        max_density: float = 0.15,
        radius_range: tuple[float, float] = (6.0, 28.0),
        streak_fraction: float = 0.15,
        noise_sigma: float = 0.0,
    ):
        self.geometry = geometry or SceneGeometry()
        self.monitor_size = monitor_size
        self.droplet_seed = droplet_seed
        self.max_density = max_density
        self.radius_range = radius_range
        self.streak_fraction = streak_fraction
        self.noise_sigma = noise_sigma
        self._canvas: np.ndarray | None = None
        self._pressure = 0.0
        self._frame = 0
        self.fields_used: list[DropletField] = []

    # -- device interface ---------------------------------------------------
    def show(self, image: np.ndarray) -> None:
        w, h = self.monitor_size
        ih, iw = image.shape[:2]
        if iw > w or ih > h:
            raise ConfigurationError(
                f"source image {iw}x{ih} exceeds monitor resolution {w}x{h}"
            )
        if (ih, iw) == (h, w):
            self._canvas = image.astype(np.float32)
        else:
            shape = (h, w) if image.ndim == 2 else (h, w, image.shape[2])
            canvas = np.zeros(shape, dtype=np.float32)
            canvas[:ih, :iw] = image
            self._canvas = canvas

    def set_pressure(self, pressure: float) -> None:
        if not 0 <= pressure <= 1:
            raise ConfigurationError("pressure must be in [0, 1]")
        self._pressure = float(pressure)

    def off(self) -> None:
        self._pressure = 0.0

    def trigger(self) -> np.ndarray:
        if self._canvas is None:
            raise ConfigurationError("camera triggered before anything was displayed")
        frame = self._frame
        self._frame += 1
        density = self.max_density * self._pressure
        if density > 0:
            field = sample_droplet_field(
                seed=_derived_seed(self.droplet_seed, frame),
                density=density,
                radius_range=self.radius_range,
                streak_fraction=self.streak_fraction,
                plane_size=self.monitor_size,
            )
            self.fields_used.append(field)
            pass_kind = "rainy"
        else:
            field = None
            pass_kind = "clear"
        noise_rng = np.random.default_rng(_derived_seed(self.droplet_seed, frame, 7))
        return simulate_capture(
            self._canvas, pass_kind, field, self.geometry, self.noise_sigma, noise_rng
        )

    # -- orchestration helpers ----------------------------------------------
    def reset(self) -> None:
        self._canvas = None
        self._pressure = 0.0
        self._frame = 0
        self.fields_used = []

    def device_set(self):
        from .rig import DeviceSet

        return DeviceSet(display=self, camera=self, sprayer=self)

    def with_seed(self, droplet_seed: int) -> "SimulatedRig":
        clone = SimulatedRig(
            geometry=self.geometry,
            monitor_size=self.monitor_size,
            droplet_seed=droplet_seed,
            max_density=self.max_density,
            radius_range=self.radius_range,
            streak_fraction=self.streak_fraction,
            noise_sigma=self.noise_sigma,
        )
        return clone
