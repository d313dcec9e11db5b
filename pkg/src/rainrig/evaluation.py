"""Reconstruction (PSNR/SSIM) and segmentation (mIoU) evaluation harness.

Reports carry per-record rows plus aggregates laid out like the standard
two-table presentation: a reconstruction table with RAINY and DERAINED
columns against both clear ground-truth variants, and a segmentation table
with one mIoU row per condition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import cv2
import jsonschema
import numpy as np
from PIL import Image

from .dataset_builder import DatasetManifest, PairRecord
from .errors import ConfigurationError, MetricError, ShapeError
from .imgio import load_png, luminance

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CONDITIONS = ("clear_original", "clear_photographed", "rainy", "derained")

# Published reference values, kept only to exercise report formatting at the
# paper's scale; they are not reproducible without the physical rig data.
REFERENCE_RECONSTRUCTION = {
    "clear_original": {"rainy": {"psnr": 18.20, "ssim": 0.6865}, "derained": {"psnr": 25.76, "ssim": 0.8817}},
    "clear_photographed": {"rainy": {"psnr": 18.20, "ssim": 0.6865}, "derained": {"psnr": 21.20, "ssim": 0.8294}},
}
REFERENCE_SEGMENTATION = {
    "clear_original": 0.7901,
    "clear_photographed": 0.7137,
    "rainy": 0.1776,
    "derained": 0.6327,
}
REFERENCE_THIRD_PARTY = {
    "raw": {"psnr": 24.09, "ssim": 0.8518},
    "trained_on_target_full": {"psnr": 31.55, "ssim": 0.9020},
    "trained_on_rig_only": {"psnr": 27.52, "ssim": 0.8716},
    "rig_pretrained_finetuned_112": {"psnr": 30.21, "ssim": 0.8953},
}


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical images return the 99 dB cap."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(peak * peak / mse)))


def _ssim_maps(a: np.ndarray, b: np.ndarray, peak: float):
    ga = luminance(a).astype(np.float64)
    gb = luminance(b).astype(np.float64)
    if ga.shape != gb.shape:
        raise ShapeError(f"shape mismatch {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise MetricError(f"image {ga.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    blur = lambda x: cv2.GaussianBlur(x, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA)
    mu_a = blur(ga)
    mu_b = blur(gb)
    var_a = blur(ga * ga) - mu_a * mu_a
    var_b = blur(gb * gb) - mu_b * mu_b
    cov = blur(ga * gb) - mu_a * mu_b
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM: Gaussian window 11 / sigma 1.5, K1=0.01, K2=0.03,
    computed on the BT.601 luma of color inputs."""
    lum, cs = _ssim_maps(a, b, peak)
    return float(np.mean(lum * cs))


def ssim_decomposition(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> tuple[float, float]:
    """(luminance term, contrast*structure term), each averaged over the image."""
    lum, cs = _ssim_maps(a, b, peak)
    return float(np.mean(lum)), float(np.mean(cs))


class ConfusionAccumulator:
    """Running class-confusion matrix; mIoU is computed over the whole set."""

    def __init__(self, class_count: int, ignore_label: int | None = None):
        if class_count < 1:
            raise ConfigurationError("class_count must be positive")
        self.class_count = class_count
        self.ignore_label = ignore_label
        self.matrix = np.zeros((class_count, class_count), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        pred = pred.astype(np.int64).ravel()
        gt = gt.astype(np.int64).ravel()
        if self.ignore_label is not None:
            keep = gt != self.ignore_label
            pred, gt = pred[keep], gt[keep]
        if pred.size == 0:
            return
        for name, arr in (("pred", pred), ("gt", gt)):
            if arr.min() < 0 or arr.max() >= self.class_count:
                raise MetricError(
                    f"{name} contains class ids outside [0, {self.class_count}) "
                    f"(found {arr.min()}..{arr.max()})"
                )
        self.matrix += np.bincount(
            gt * self.class_count + pred, minlength=self.class_count**2
        ).reshape(self.class_count, self.class_count)

    def miou(self) -> float:
        gt_totals = self.matrix.sum(axis=1)
        present = gt_totals > 0
        if not present.any():
            raise MetricError("no ground-truth pixels to score (all ignored?)")
        tp = np.diag(self.matrix).astype(np.float64)
        union = gt_totals + self.matrix.sum(axis=0) - np.diag(self.matrix)
        ious = tp[present] / union[present].astype(np.float64)
        return float(ious.mean())


def miou(pred: np.ndarray, gt: np.ndarray, class_count: int, ignore_label: int | None = None) -> float:
    """Single-pair mIoU, averaged over classes present in the ground truth."""
    acc = ConfusionAccumulator(class_count, ignore_label)
    acc.add(pred, gt)
    return acc.miou()


class SegmenterInterface(Protocol):
    class_count: int

    def segment(self, image: np.ndarray) -> np.ndarray: ...


def load_label_map(path: str | Path) -> np.ndarray:
    """Integer class map from a label PNG (no intensity rescaling)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "P"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["kind", "rows", "aggregates", "meta"],
    "properties": {
        "kind": {"enum": ["reconstruction", "segmentation"]},
        "rows": {"type": "array", "items": {"type": "object"}},
        "aggregates": {"type": "object"},
        "meta": {
            "type": "object",
            "required": ["record_count"],
            "properties": {
                "record_count": {"type": "integer", "minimum": 0},
                "failed_records": {"type": "array"},
            },
        },
    },
    "allOf": [
        {
            "if": {"properties": {"kind": {"const": "reconstruction"}}},
            "then": {
                "properties": {
                    "aggregates": {
                        "type": "object",
                        "patternProperties": {
                            "^clear_(original|photographed)$": {
                                "type": "object",
                                "required": ["rainy"],
                                "properties": {
                                    "rainy": {
                                        "type": "object",
                                        "required": ["psnr", "ssim"],
                                    },
                                    "derained": {
                                        "type": ["object", "null"],
                                    },
                                },
                            }
                        },
                    }
                }
            },
        },
        {
            "if": {"properties": {"kind": {"const": "segmentation"}}},
            "then": {
                "properties": {
                    "aggregates": {
                        "type": "object",
                        "patternProperties": {".*": {"type": ["number", "null"]}},
                    }
                }
            },
        },
    ],
}


@dataclass
class MetricsReport:
    kind: str  # "reconstruction" | "segmentation"
    rows: list[dict]
    aggregates: dict
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "rows": self.rows, "aggregates": self.aggregates, "meta": self.meta}

    def validate(self) -> None:
        jsonschema.validate(self.to_json_dict(), REPORT_SCHEMA)

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load_json(cls, path: str | Path) -> "MetricsReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(kind=d["kind"], rows=d["rows"], aggregates=d["aggregates"], meta=d["meta"])

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not self.rows:
            path.write_text("", encoding="utf-8")
            return path
        fields = sorted({k for row in self.rows for k in row})
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.rows)
        return path

    def render_text(self) -> str:
        if self.kind == "reconstruction":
            return render_reconstruction_table(self.aggregates)
        return render_segmentation_table(self.aggregates)


def render_reconstruction_table(aggregates: dict) -> str:
    """RAINY / DERAINED columns (PSNR, SSIM) per ground-truth variant."""
    lines = [
        f"{'GROUND TRUTH':<22}|{'RAINY':^19}|{'DERAINED':^19}",
        f"{'':<22}|{'PSNR':^9}{'SSIM':^10}|{'PSNR':^9}{'SSIM':^10}",
        "-" * 62,
    ]
    for variant in ("clear_original", "clear_photographed"):
        if variant not in aggregates:
            continue
        cells = aggregates[variant]
        rainy = cells.get("rainy") or {}
        derained = cells.get("derained") or {}
        fmt = lambda d, k: f"{d[k]:.4f}" if k == "ssim" and k in d else (f"{d[k]:.2f}" if k in d else "-")
        lines.append(
            f"{variant:<22}|{fmt(rainy, 'psnr'):^9}{fmt(rainy, 'ssim'):^10}"
            f"|{fmt(derained, 'psnr'):^9}{fmt(derained, 'ssim'):^10}"
        )
    return "\n".join(lines)


_SEG_ROW_LABELS = {
    "clear_original": "CLEAR-Original",
    "clear_photographed": "CLEAR-Photographed",
    "rainy": "RAINY",
    "derained": "DERAINED",
}


def render_segmentation_table(aggregates: dict) -> str:
    """One mIoU row per condition."""
    lines = [f"{'CONDITION':<22}|{'mIoU':^10}", "-" * 33]
    for cond in CONDITIONS:
        if cond in aggregates and aggregates[cond] is not None:
            lines.append(f"{_SEG_ROW_LABELS[cond]:<22}|{aggregates[cond]:^10.4f}")
    return "\n".join(lines)


def _apply_model(model: Callable[[np.ndarray], np.ndarray], image: np.ndarray) -> np.ndarray:
    out = model(image)
    if out.shape[:2] != image.shape[:2]:
        raise ShapeError(f"model changed spatial size {image.shape[:2]} -> {out.shape[:2]}")
    return out


def evaluate_reconstruction(
    manifest: DatasetManifest,
    model: Callable[[np.ndarray], np.ndarray] | None = None,
    split: str = "test",
    peak: float = 1.0,
    include_derained: bool = True,
) -> MetricsReport:
    """PSNR/SSIM of rainy (and derained, when a model is given) against both
    clear ground-truth variants over the chosen split."""
    records = manifest.by_split(split)
    if not records:
        raise ConfigurationError(f"manifest has no records in split {split!r}")
    if include_derained and model is None:
        raise ConfigurationError("derained metrics requested but no model was given")
    rows = []
    sums: dict[tuple[str, str, str], list[float]] = {}
    for rec in records:
        rainy = load_png(rec.rainy_path)
        derained = _apply_model(model, rainy) if include_derained else None
        for variant, ref_path in (
            ("clear_original", rec.original_clear_path),
            ("clear_photographed", rec.clear_path),
        ):
            ref = load_png(ref_path)
            row = {
                "source_id": rec.source_id,
                "reference": variant,
                "psnr_rainy": psnr(rainy, ref, peak),
                "ssim_rainy": ssim(rainy, ref, peak),
            }
            if derained is not None:
                row["psnr_derained"] = psnr(derained, ref, peak)
                row["ssim_derained"] = ssim(derained, ref, peak)
            rows.append(row)
            for key, val in row.items():
                if key in ("source_id", "reference"):
                    continue
                condition = "rainy" if key.endswith("_rainy") else "derained"
                metric = key.split("_")[0]
                sums.setdefault((variant, condition, metric), []).append(val)
    aggregates: dict = {}
    for (variant, condition, metric), vals in sums.items():
        aggregates.setdefault(variant, {}).setdefault(condition, {})[metric] = float(np.mean(vals))
    for variant in aggregates:
        aggregates[variant].setdefault("derained", None)
    return MetricsReport(
        kind="reconstruction",
        rows=rows,
        aggregates=aggregates,
        meta={"record_count": len(records), "split": split, "failed_records": []},
    )


def evaluate_segmentation(
    manifest: DatasetManifest,
    segmenter: SegmenterInterface,
    model: Callable[[np.ndarray], np.ndarray] | None = None,
    label_task: str = "segmentation",
    split: str = "test",
    ignore_label: int | None = None,
) -> MetricsReport:
    """mIoU of the segmenter under each condition: original clear, photographed
    clear, rainy, and derained (when a model is given). Per-record segmenter
    failures are recorded and excluded; the aggregate discloses the counts."""
    records = manifest.by_split(split)
    if not records:
        raise ConfigurationError(f"manifest has no records in split {split!r}")
    missing = [r.source_id for r in records if label_task not in r.label_paths]
    if missing:
        raise ConfigurationError(f"records lack {label_task!r} labels: {missing}")
    conditions = list(CONDITIONS) if model is not None else [c for c in CONDITIONS if c != "derained"]
    accs = {c: ConfusionAccumulator(segmenter.class_count, ignore_label) for c in conditions}
    rows = []
    failures = []
    for rec in records:
        gt = load_label_map(rec.label_paths[label_task])
        rainy = load_png(rec.rainy_path)
        images = {
            "clear_original": load_png(rec.original_clear_path),
            "clear_photographed": load_png(rec.clear_path),
            "rainy": rainy,
        }
        if model is not None:
            images["derained"] = _apply_model(model, rainy)
        row = {"source_id": rec.source_id}
        try:
            for cond in conditions:
                pred = segmenter.segment(images[cond])
                accs[cond].add(pred, gt)
                row[f"miou_{cond}"] = miou(pred, gt, segmenter.class_count, ignore_label)
        except MetricError:
            raise
        except Exception as exc:
            failures.append({"source_id": rec.source_id, "error": str(exc)})
            continue
        rows.append(row)
    if not rows:
        raise MetricError("segmenter failed on every record")
    aggregates = {cond: accs[cond].miou() for cond in conditions}
    return MetricsReport(
        kind="segmentation",
        rows=rows,
        aggregates=aggregates,
        meta={
            "record_count": len(records),
            "scored_records": len(rows),
            "split": split,
            "failed_records": failures,
        },
    )
