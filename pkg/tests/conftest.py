import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def smooth_image(height, width, seed=0, channels=3, smoothness=6.0):
    """Natural-looking test image: band-limited noise stretched to [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    if channels == 1:
        img = gaussian_filter(rng.random((height, width)), smoothness)
        lo, hi = img.min(), img.max()
        return (0.05 + 0.9 * (img - lo) / (hi - lo)).astype(np.float32)
    chans = []
    for _ in range(channels):
        c = gaussian_filter(rng.random((height, width)), smoothness)
        lo, hi = c.min(), c.max()
        chans.append(0.05 + 0.9 * (c - lo) / (hi - lo))
    return np.stack(chans, axis=-1).astype(np.float32)


def small_projective_matrix(seed=0, scale=1.0):
    """Random near-identity 3x3 projective map, deterministic per seed."""
    rng = np.random.default_rng(seed)
    m = np.eye(3)
    m[0, 0] += scale * rng.uniform(-0.03, 0.03)
    m[1, 1] += scale * rng.uniform(-0.03, 0.03)
    m[0, 1] = scale * rng.uniform(-0.02, 0.02)
    m[1, 0] = scale * rng.uniform(-0.02, 0.02)
    m[0, 2] = scale * rng.uniform(-8.0, 8.0)
    m[1, 2] = scale * rng.uniform(-8.0, 8.0)
    m[2, 0] = scale * rng.uniform(-4e-5, 4e-5)
    m[2, 1] = scale * rng.uniform(-4e-5, 4e-5)
    return m


def toy_pair_manifest(
    root,
    n=8,
    size=(64, 64),
    density=0.3,
    scene_seed=100,
    rain_seed=500,
    tint=(1.0, 1.0, 1.0),
    split="train",
):
    """Tiny rainy/clear paired dataset written straight to disk (no rig pass)."""
    from rainrig.calibration import Homography
    from rainrig.dataset_builder import DatasetManifest, PairRecord
    from rainrig.droplet_sim import SceneGeometry, composite_rainy, sample_droplet_field
    from rainrig.imgio import save_png

    w, h = size
    records = []
    for i in range(n):
        clear = smooth_image(h, w, seed=scene_seed + i, smoothness=4.0)
        clear = np.clip(clear * np.asarray(tint, dtype=np.float32), 0.0, 1.0)
        field = sample_droplet_field(
            seed=rain_seed + i, density=density, radius_range=(4, 12), plane_size=(w, h)
        )
        rainy = composite_rainy(clear, field, SceneGeometry())
        cp = save_png(root / f"clear_{i:03d}.png", clear)
        rp = save_png(root / f"rainy_{i:03d}.png", rainy)
        records.append(
            PairRecord(
                source_id=f"s{i:03d}",
                rainy_path=str(rp),
                clear_path=str(cp),
                original_clear_path=str(cp),
                label_paths={},
                homography=Homography.identity().to_flat(),
                alignment_residual=0.0,
                split=split,
            )
        )
    return DatasetManifest(records=records)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
