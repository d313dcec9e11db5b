"""Pair aligned clear/rainy captures with source images and auxiliary labels.

Produces a JSONL manifest: one metadata header line, then one record per
source, ordered by source_id. Labels ride along untouched — the whole point
of photographing existing datasets is that their ground truth transfers for
free.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .calibration import Homography
from .errors import ConfigurationError, PairingError, RainrigError
from .imgio import load_png, luminance, save_png
from .rig import CaptureRecord, align_capture

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test", "none")


@dataclass(frozen=True)
class SourceItem:
    source_id: str
    image_path: Path
    label_paths: dict[str, Path] = field(default_factory=dict)


class SourceAdapter(Protocol):
    def __iter__(self) -> Iterable[SourceItem]: ...


class ListSourceAdapter:
    def __init__(self, items: Sequence[SourceItem]):
        ids = [it.source_id for it in items]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("source_ids must be unique")
        self._items = list(items)

    def __iter__(self):
        return iter(self._items)


class DirectorySourceAdapter:
    """Images in one directory; per-task label directories matched by stem."""

    def __init__(self, images_dir: str | Path, label_dirs: dict[str, str | Path] | None = None,
                 suffix: str = ".png"):
        self.images_dir = Path(images_dir)
        self.label_dirs = {k: Path(v) for k, v in (label_dirs or {}).items()}
        self.suffix = suffix

    def __iter__(self):
        for p in sorted(self.images_dir.glob(f"*{self.suffix}")):
            labels = {}
            for task, d in self.label_dirs.items():
                matches = sorted(d.glob(p.stem + ".*"))
                if matches:
                    labels[task] = matches[0]
            yield SourceItem(source_id=p.stem, image_path=p, label_paths=labels)


@dataclass
class PairRecord:
    """One aligned rainy/clear pair plus its provenance and split membership."""

    source_id: str
    rainy_path: str
    clear_path: str  # photographed clear, aligned
    original_clear_path: str  # untouched source image
    label_paths: dict[str, str]
    homography: list[float]
    alignment_residual: float
    alignment_ok: bool = True
    split: str = "none"
    finetune_sample: bool = False

    def __post_init__(self):
        if self.alignment_residual < 0:
            raise ConfigurationError("alignment_residual must be non-negative")
        if self.split not in SPLIT_NAMES:
            raise ConfigurationError(f"split must be one of {SPLIT_NAMES}")
        if self.finetune_sample and self.split != "train":
            raise ConfigurationError("finetune_sample records must belong to the train split")

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "rainy_path": self.rainy_path,
            "clear_path": self.clear_path,
            "original_clear_path": self.original_clear_path,
            "label_paths": dict(sorted(self.label_paths.items())),
            "homography": self.homography,
            "alignment_residual": self.alignment_residual,
            "alignment_ok": self.alignment_ok,
            "split": self.split,
            "finetune_sample": self.finetune_sample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(**d)


@dataclass
class DatasetManifest:
    records: list[PairRecord]
    rig_config: dict = field(default_factory=dict)
    seed: int = 0
    created_at: str = ""
    version: int = 1

    def header(self) -> dict:
        return {
            "type": "manifest",
            "version": self.version,
            "seed": self.seed,
            "created_at": self.created_at,
            "rig_config": self.rig_config,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines.extend(json.dumps(r.to_dict(), sort_keys=True) for r in self.records)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def from_jsonl(cls, text: str) -> "DatasetManifest":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise RainrigError("manifest is empty")
        header = json.loads(lines[0])
        if header.get("type") != "manifest":
            raise RainrigError("manifest header missing")
        records = [PairRecord.from_dict(json.loads(l)) for l in lines[1:]]
        return cls(
            records=records,
            rig_config=header.get("rig_config", {}),
            seed=header.get("seed", 0),
            created_at=header.get("created_at", ""),
            version=header.get("version", 1),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))

    def by_split(self, split: str) -> list[PairRecord]:
        return [r for r in self.records if r.split == split]

    def finetune_records(self) -> list[PairRecord]:
        return [r for r in self.records if r.finetune_sample]


def phase_correlation_shift(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Sub-pixel translation (dx, dy) such that shifting ``b`` by it matches ``a``."""
    ga = luminance(a).astype(np.float64)
    gb = luminance(b).astype(np.float64)
    if ga.shape != gb.shape:
        raise ConfigurationError(f"shape mismatch {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    fa = np.fft.fft2((ga - ga.mean()) * win)
    fb = np.fft.fft2((gb - gb.mean()) * win)
    cross = fa * np.conj(fb)
    mag = np.abs(cross)
    cross /= np.maximum(mag, 1e-12)
    corr = np.fft.ifft2(cross).real
    peak = np.unravel_index(np.argmax(corr), corr.shape)

    def refine(axis: int) -> float:
        idx = peak[axis]
        n = corr.shape[axis]
        take = lambda i: corr[(i % n, peak[1]) if axis == 0 else (peak[0], i % n)]
        c0, c1, c2 = take(idx - 1), take(idx), take(idx + 1)
        denom = c0 - 2 * c1 + c2
        frac = 0.0 if abs(denom) < 1e-12 else 0.5 * (c0 - c2) / denom
        pos = idx + np.clip(frac, -0.5, 0.5)
        if pos > n / 2:
            pos -= n
        return float(pos)

    dy = refine(0)
    dx = refine(1)
    return dx, dy


def validate_alignment(record: PairRecord, threshold: float = 2.0) -> float:
    """Residual translation (px) between the photographed and original clear
    images; stores it (and the pass/fail flag) on the record."""
    photographed = load_png(record.clear_path)
    original = load_png(record.original_clear_path)
    dx, dy = phase_correlation_shift(original, photographed)
    residual = float(np.hypot(dx, dy))
    record.alignment_residual = residual
    record.alignment_ok = residual <= threshold
    return residual


def build_pairs(
    clear_records: Sequence[CaptureRecord],
    rainy_records: Sequence[CaptureRecord],
    source: SourceAdapter,
    h: Homography,
    out_dir: str | Path,
    rig_config: dict | None = None,
    seed: int = 0,
    residual_threshold: float = 2.0,
    copy_labels: bool = False,
    created_at: str = "",
) -> DatasetManifest:
    """Align both passes into monitor coordinates, write the paired images,
    and assemble the manifest (ordered by source_id)."""
    clear_by_id = {r.source_id: r for r in clear_records}
    rainy_by_id = {r.source_id: r for r in rainy_records}
    orphans = sorted(set(clear_by_id) ^ set(rainy_by_id))
    if orphans:
        raise PairingError(f"unpaired capture records: {orphans}", orphan_ids=orphans)
    items = {it.source_id: it for it in source}
    missing = sorted(set(clear_by_id) - set(items))
    if missing:
        raise PairingError(f"captures without source entries: {missing}", orphan_ids=missing)

    out_dir = Path(out_dir)
    records = []
    for sid in sorted(clear_by_id):
        item = items[sid]
        original = load_png(item.image_path)
        oh, ow = original.shape[:2]
        aligned_clear = align_capture(clear_by_id[sid], h, (ow, oh))
        aligned_rainy = align_capture(rainy_by_id[sid], h, (ow, oh))
        clear_path = save_png(out_dir / "aligned" / "clear" / f"{sid}.png", aligned_clear)
        rainy_path = save_png(out_dir / "aligned" / "rainy" / f"{sid}.png", aligned_rainy)
        labels = {}
        for task, lp in item.label_paths.items():
            if copy_labels:
                dst = out_dir / "labels" / task / Path(lp).name
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(lp, dst)
                labels[task] = str(dst)
            else:
                labels[task] = str(lp)
        rec = PairRecord(
            source_id=sid,
            rainy_path=str(rainy_path),
            clear_path=str(clear_path),
            original_clear_path=str(item.image_path),
            label_paths=labels,
            homography=h.to_flat(),
            alignment_residual=0.0,
        )
        validate_alignment(rec, threshold=residual_threshold)
        records.append(rec)
    return DatasetManifest(
        records=records,
        rig_config=rig_config or {},
        seed=seed,
        created_at=created_at,
    )


def split(manifest: DatasetManifest, seed: int, fractions: tuple[float, float, float]) -> DatasetManifest:
    """Assign train/val/test splits by uniform shuffle, floor-then-distribute."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigurationError("split fractions must be non-negative")
    n = len(manifest.records)
    if n == 0:
        log.warning("split called on an empty manifest; nothing to assign")
        return manifest
    counts = [int(np.floor(f * n)) for f in fractions]
    remainder = n - sum(counts)
    # hand leftovers to the splits with the largest fractional parts (ties: train first)
    fracs = [(f * n - np.floor(f * n), -i) for i, f in enumerate(fractions)]
    for _, neg_i in sorted(fracs, reverse=True)[:remainder]:
        counts[-neg_i] += 1
    order = np.random.default_rng(seed).permutation(n)
    names = ["train", "val", "test"]
    bounds = np.cumsum(counts)
    for rank, idx in enumerate(order):
        which = int(np.searchsorted(bounds, rank, side="right"))
        rec = manifest.records[idx]
        rec.split = names[which]
        if rec.split != "train":
            rec.finetune_sample = False
    return manifest


def sample_finetune_subset(manifest: DatasetManifest, seed: int, count: int) -> DatasetManifest:
    """Mark a reproducible random subset of the train split for fine-tuning."""
    train = [r for r in manifest.records if r.split == "train"]
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    if count > len(train):
        raise ConfigurationError(f"requested {count} finetune samples from {len(train)} train records")
    for r in manifest.records:
        r.finetune_sample = False
    if count == 0:
        return manifest
    picked = np.random.default_rng(seed).choice(len(train), size=count, replace=False)
    for i in picked:
        train[int(i)].finetune_sample = True
    return manifest
