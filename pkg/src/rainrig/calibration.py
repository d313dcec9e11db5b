"""Monitor/camera plane calibration.

Renders a known test pattern for the monitor, finds its markers in a captured
frame, estimates the monitor-to-camera homography with a normalized DLT
(optionally made robust by inlier consensus), and warps captures back into
monitor pixel coordinates.

Coordinate convention: points are (x, y) in pixel units. A Homography ``H``
maps screen points to camera-image points, ``image_pt ~ H @ (x, y, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DetectionError,
    InsufficientDataError,
    ShapeError,
    SingularMatrixError,
)

# Reprojection threshold (px) and confidence for the consensus loop. Glass-pane
# reflections can inject spurious detections, hence the robust path.
RANSAC_THRESHOLD_PX = 1.5
RANSAC_CONFIDENCE = 0.999
_RANSAC_MAX_ITERS = 2000


@dataclass(frozen=True)
class TestPatternSpec:
    """Layout of the on-screen calibration pattern.

    ``grid_rows`` x ``grid_cols`` counts markers: inner checkerboard corners
    for ``checkerboard`` style, circle centers for ``circles``. At least 3x3
    so the estimate is overdetermined well past the 4-point minimum.
    """

    __test__ = False  # not a pytest class

    grid_rows: int = 7
    grid_cols: int = 10
    cell_px: int = 80
    margin_px: int = 40
    marker_style: str = "checkerboard"

    def __post_init__(self):
        if self.grid_rows < 3 or self.grid_cols < 3:
            raise ConfigurationError("pattern grid must be at least 3x3 markers")
        if self.cell_px < 8:
            raise ConfigurationError("cell_px must be at least 8")
        if self.margin_px < 0:
            raise ConfigurationError("margin_px must be non-negative")
        if self.marker_style not in ("checkerboard", "circles"):
            raise ConfigurationError(f"unknown marker_style {self.marker_style!r}")

    @property
    def marker_count(self) -> int:
        return self.grid_rows * self.grid_cols

    def board_size(self) -> tuple[int, int]:
        """(width, height) of the board footprint including margins."""
        if self.marker_style == "checkerboard":
            # N inner corners per axis require N+1 cells.
            w = (self.grid_cols + 1) * self.cell_px
            h = (self.grid_rows + 1) * self.cell_px
        else:
            w = self.grid_cols * self.cell_px
            h = self.grid_rows * self.cell_px
        return w + 2 * self.margin_px, h + 2 * self.margin_px

    def marker_centers(self) -> np.ndarray:
        """Analytic marker positions, row-major, shape (N, 2) float64."""
        m, c = self.margin_px, self.cell_px
        if self.marker_style == "checkerboard":
            xs = m + c * (np.arange(self.grid_cols) + 1)
            ys = m + c * (np.arange(self.grid_rows) + 1)
        else:
            xs = m + c * (np.arange(self.grid_cols) + 0.5)
            ys = m + c * (np.arange(self.grid_rows) + 0.5)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True)
class Correspondence:
    """One screen-point / image-point match."""

    screen_pt: tuple[float, float]
    image_pt: tuple[float, float]

    def __post_init__(self):
        for p in (self.screen_pt, self.image_pt):
            if not all(np.isfinite(v) for v in p):
                raise ConfigurationError(f"non-finite correspondence point {p}")


@dataclass(frozen=True)
class Homography:
    """A 3x3 projective map in canonical form (h[2][2] == 1)."""

    h: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SingularMatrixError("homography contains non-finite entries")
        if abs(m[2, 2]) < 1e-12:
            raise SingularMatrixError("homography cannot be normalized: h[2][2] ~ 0")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise SingularMatrixError("homography is singular")
        m.flags.writeable = False
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = dx
        m[1, 2] = dy
        return cls(m)

    @classmethod
    def from_flat(cls, values) -> "Homography":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (9,):
            raise ShapeError(f"expected 9 row-major values, got shape {v.shape}")
        return cls(v.reshape(3, 3))

    def to_flat(self) -> list[float]:
        """Row-major 9-number serialization used in the dataset manifest."""
        return [float(v) for v in self.h.ravel()]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: "Homography") -> "Homography":
        """Map applying ``other`` first, then ``self``."""
        return Homography(self.h @ other.h)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to (N, 2) points; returns (N, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ones = np.ones((pts.shape[0], 1))
        proj = np.hstack([pts, ones]) @ self.h.T
        w = proj[:, 2:3]
        if np.any(np.abs(w) < 1e-15):
            raise DegenerateInputError("point maps to infinity under homography")
        return proj[:, :2] / w


def generate_test_pattern(spec: TestPatternSpec, size: tuple[int, int]) -> np.ndarray:
    """Render the pattern as a grayscale float image of ``size`` (width, height).

    The board is anchored at the top-left margin so marker centers depend on
    the spec only. Cell edges are drawn through pixel centers (half-pixel
    anti-aliasing via 2x supersampling), putting checkerboard corners exactly
    at the integer coordinates reported by :meth:`TestPatternSpec.marker_centers`.
    Deterministic: same spec and size give bit-identical images.
    """
    width, height = size
    bw, bh = spec.board_size()
    if width < bw or height < bh:
        raise ConfigurationError(
            f"size {width}x{height} too small for pattern footprint {bw}x{bh}"
        )
    m, c = spec.margin_px, spec.cell_px
    if spec.marker_style == "checkerboard":
        # Supersampled grid with a +1 offset so each cell edge at x = m + j*c
        # lands inside pixel x, which averages to mid-gray.
        canvas2 = np.full((2 * height, 2 * width), 255, dtype=np.float32)
        for r in range(spec.grid_rows + 1):
            for col in range(spec.grid_cols + 1):
                if (r + col) % 2 == 0:
                    y0 = 2 * (m + r * c) + 1
                    x0 = 2 * (m + col * c) + 1
                    canvas2[y0 : y0 + 2 * c, x0 : x0 + 2 * c] = 0
        canvas = canvas2.reshape(height, 2, width, 2).mean(axis=(1, 3))
    else:
        canvas = np.full((height, width), 255, dtype=np.uint8)
        shift = 4
        radius = 0.3 * c
        for cx, cy in spec.marker_centers():
            center = (int(round(cx * (1 << shift))), int(round(cy * (1 << shift))))
            cv2.circle(canvas, center, int(round(radius * (1 << shift))), 0, -1, cv2.LINE_AA, shift)
        canvas = canvas.astype(np.float32)
    return canvas / 255.0


def _order_grid_points(points: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Order detected grid points row-major, matching the analytic layout.

    Picks the four extreme points as grid corners, fits a coarse homography to
    the unit grid, and snaps every point to its (row, col) slot. Valid for
    warps that keep the grid roughly upright (no quarter-turn rotations).
    """
    n = rows * cols
    s = points @ np.array([1.0, 1.0])
    d = points @ np.array([1.0, -1.0])
    corner_idx = [int(np.argmin(s)), int(np.argmax(d)), int(np.argmax(s)), int(np.argmin(d))]
    if len(set(corner_idx)) != 4:
        raise DetectionError("grid corners are ambiguous", found=len(points), expected=n)
    src = points[corner_idx]
    dst = np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], dtype=np.float64)
    corrs = [Correspondence(tuple(a), tuple(b)) for a, b in zip(src, dst)]
    coarse = estimate_homography(corrs, robust=False)
    grid = coarse.apply(points)
    slots = np.rint(grid).astype(int)
    order = np.full(n, -1, dtype=int)
    for i, (gx, gy) in enumerate(slots):
        if not (0 <= gx < cols and 0 <= gy < rows):
            raise DetectionError(
                "detected point falls outside the expected grid", found=len(points), expected=n
            )
        slot = gy * cols + gx
        if order[slot] != -1:
            raise DetectionError("two points snapped to one grid slot", found=len(points), expected=n)
        order[slot] = i
    return points[order]


def detect_pattern_points(image: np.ndarray, spec: TestPatternSpec) -> np.ndarray:
    """Find marker positions in a (possibly warped) capture of the pattern.

    Returns (N, 2) sub-pixel points in the canonical row-major order of
    :meth:`TestPatternSpec.marker_centers`.
    """
    if image.ndim == 3:
        gray8 = cv2.cvtColor((np.clip(image, 0, 1) * 255).astype(np.uint8), cv2.COLOR_RGB2GRAY)
    else:
        gray8 = (np.clip(image, 0, 1) * 255).astype(np.uint8)
    n = spec.marker_count

    if spec.marker_style == "checkerboard":
        found, corners = cv2.findChessboardCornersSB(
            gray8, (spec.grid_cols, spec.grid_rows), flags=cv2.CALIB_CB_EXHAUSTIVE | cv2.CALIB_CB_ACCURACY
        )
        if not found:
            found, corners = cv2.findChessboardCorners(gray8, (spec.grid_cols, spec.grid_rows))
            if found:
                term = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_MAX_ITER, 40, 1e-3)
                corners = cv2.cornerSubPix(gray8, corners, (5, 5), (-1, -1), term)
        if not found:
            raise DetectionError(
                f"checkerboard not found ({0} of {n} corners)", found=0, expected=n
            )
        pts = corners.reshape(-1, 2).astype(np.float64)
    else:
        # Dark blobs on white: threshold, then intensity-weighted centroids.
        _, binary = cv2.threshold(gray8, 0, 255, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
        count, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
        min_area = max(9, int(0.05 * np.pi * (0.3 * spec.cell_px) ** 2))
        pts = []
        weight = 255.0 - gray8.astype(np.float64)
        for i in range(1, count):
            if stats[i, cv2.CC_STAT_AREA] < min_area:
                continue
            ys, xs = np.nonzero(labels == i)
            w = weight[ys, xs]
            pts.append([np.average(xs, weights=w), np.average(ys, weights=w)])
        if len(pts) != n:
            raise DetectionError(
                f"expected {n} circle markers, found {len(pts)}", found=len(pts), expected=n
            )
        pts = np.asarray(pts, dtype=np.float64)

    if len(pts) < n:
        raise DetectionError(f"expected {n} markers, found {len(pts)}", found=len(pts), expected=n)
    return _order_grid_points(pts, spec.grid_rows, spec.grid_cols)


def _normalization_transform(points: np.ndarray) -> np.ndarray:
    """Hartley isotropic normalization: centroid at origin, mean radius sqrt(2)."""
    centroid = points.mean(axis=0)
    dists = np.linalg.norm(points - centroid, axis=1)
    mean_dist = dists.mean()
    if mean_dist < 1e-12:
        raise DegenerateInputError("all points coincide; cannot normalize")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])


def _apply_3x3(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    proj = np.hstack([points, np.ones((points.shape[0], 1))]) @ t.T
    return proj[:, :2] / proj[:, 2:3]


def _dlt(screen: np.ndarray, image: np.ndarray) -> Homography:
    """Normalized direct linear transform on exact/noisy correspondences."""
    t_s = _normalization_transform(screen)
    t_i = _normalization_transform(image)
    s = _apply_3x3(t_s, screen)
    m = _apply_3x3(t_i, image)
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -m[:, 0:1] * s
    a[0::2, 8] = -m[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -m[:, 1:2] * s
    a[1::2, 8] = -m[:, 1]
    _, sv, vt = np.linalg.svd(a)
    if sv[7] / sv[0] < 1e-10:
        raise DegenerateInputError("correspondences are rank-deficient (collinear configuration?)")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_i) @ h_norm @ t_s
    return Homography(h)


def reprojection_errors(corrs: list[Correspondence], h: Homography) -> np.ndarray:
    """Per-correspondence distance (px) between mapped screen and image points."""
    screen = np.array([c.screen_pt for c in corrs], dtype=np.float64)
    image = np.array([c.image_pt for c in corrs], dtype=np.float64)
    return np.linalg.norm(h.apply(screen) - image, axis=1)


def inlier_mask(corrs: list[Correspondence], h: Homography, threshold: float = RANSAC_THRESHOLD_PX) -> np.ndarray:
    """Boolean mask of correspondences within ``threshold`` px reprojection."""
    return reprojection_errors(corrs, h) <= threshold


def _minimal_set_degenerate(points: np.ndarray) -> bool:
    """True when any 3 of the 4 screen points are (near) collinear."""
    idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    for i, j, k in idx:
        v1 = points[j] - points[i]
        v2 = points[k] - points[i]
        area = abs(v1[0] * v2[1] - v1[1] * v2[0])
        scale = max(np.linalg.norm(v1), np.linalg.norm(v2), 1e-9)
        if area < 1e-6 * scale * scale:
            return True
    return False


def estimate_homography(
    correspondences: list[Correspondence],
    robust: bool = False,
    threshold: float = RANSAC_THRESHOLD_PX,
    confidence: float = RANSAC_CONFIDENCE,
    seed: int = 0,
) -> Homography:
    """Least-squares homography from screen->image correspondences.

    Plain mode runs a Hartley-normalized DLT over all points. Robust mode runs
    an inlier-consensus search first (reprojection ``threshold`` px), then
    refits the DLT on the consensus set.
    """
    if len(correspondences) < 4:
        raise InsufficientDataError(
            f"homography needs at least 4 correspondences, got {len(correspondences)}"
        )
    screen = np.array([c.screen_pt for c in correspondences], dtype=np.float64)
    image = np.array([c.image_pt for c in correspondences], dtype=np.float64)
    if len(correspondences) == 4 and _minimal_set_degenerate(screen):
        raise DegenerateInputError("3 of the 4 screen points are collinear")

    if not robust:
        return _dlt(screen, image)

    n = len(correspondences)
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    max_iters = _RANSAC_MAX_ITERS
    it = 0
    while it < max_iters:
        it += 1
        pick = rng.choice(n, size=4, replace=False)
        if _minimal_set_degenerate(screen[pick]):
            continue
        try:
            cand = _dlt(screen[pick], image[pick])
        except (DegenerateInputError, SingularMatrixError):
            continue
        errs = np.linalg.norm(cand.apply(screen) - image, axis=1)
        mask = errs <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            # Standard adaptive iteration bound from the current inlier ratio.
            ratio = count / n
            if ratio >= 1.0 - 1e-12:
                break
            denom = np.log(max(1.0 - ratio**4, 1e-12))
            needed = int(np.ceil(np.log(1.0 - confidence) / denom))
            max_iters = min(_RANSAC_MAX_ITERS, max(needed, 1))
    if best_mask is None or best_count < 4:
        raise DegenerateInputError("consensus search failed to find a valid 4-point model")
    return _dlt(screen[best_mask], image[best_mask])


def warp_image(
    image: np.ndarray,
    h: Homography,
    out_size: tuple[int, int],
    fill: float = 0.0,
) -> np.ndarray:
    """Warp ``image`` by ``h`` into an output of ``out_size`` (width, height).

    Output pixel p takes the bilinear sample of the input at ``h^-1(p)``
    (content moves forward under ``h``). Samples falling outside the source
    are set to ``fill`` — black by default, matching dark-room captures.
    """
    width, height = out_size
    if width <= 0 or height <= 0:
        raise ConfigurationError(f"invalid output size {out_size}")
    src = np.ascontiguousarray(image, dtype=np.float32)
    border = fill if src.ndim == 2 else (fill, fill, fill)
    return cv2.warpPerspective(
        src,
        h.h,
        (width, height),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=border,
    )
