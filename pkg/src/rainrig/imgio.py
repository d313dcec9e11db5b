"""Image array conventions and 8-bit PNG I/O.

Images are numpy float32 arrays in [0, 1], shaped (H, W) for grayscale or
(H, W, 3) for RGB. Files on disk are 8-bit PNG.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def to_float(image: np.ndarray) -> np.ndarray:
    """Convert a uint8 or float image to float32 in [0, 1]."""
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.clip(image.astype(np.float32), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 with rounding."""
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def luminance(image: np.ndarray) -> np.ndarray:
    """Collapse an RGB image to its BT.601 luma channel; pass gray through."""
    if image.ndim == 2:
        return image.astype(np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        return (image.astype(np.float64) @ _LUMA).astype(np.float32)
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")


def save_png(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def load_png(path: str | Path) -> np.ndarray:
    """Load a PNG as float32 in [0, 1]; RGB stays 3-channel, gray stays 2-D."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    return to_float(arr)
