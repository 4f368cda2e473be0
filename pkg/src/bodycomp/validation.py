"""Evaluation metrics: vertical-center error, cubic-ROI HU error, Dice."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyLevel, ShapeMismatch
from .spine import LEVELS, locate_body_center, superior_inferior_center
from .volume_io import CTVolume, SegmentationMask


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class LevelError:
    level: str
    vertical_center_error_mm: float
    roi_hu_error: float
    roi_hu_pct_error: float
    pred_roi_hu: float
    ref_roi_hu: float


@dataclass
class ValidationReport:
    levels: list[LevelError] = field(default_factory=list)
    dice: dict[str, float] = field(default_factory=dict)

    def aggregate(self, attr: str) -> tuple[float, float]:
        """(mean, median) of one per-level error column."""
        vals = [getattr(e, attr) for e in self.levels]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(statistics.median(vals))

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = ["vertical_center_error_mm", "roi_hu_error", "roi_hu_pct_error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", *cols, "pred_roi_hu", "ref_roi_hu"])
            for e in self.levels:
                w.writerow([e.level] + [getattr(e, c) for c in cols] + [e.pred_roi_hu, e.ref_roi_hu])
            for label, idx in (("mean", 0), ("median", 1)):
                w.writerow([label] + [self.aggregate(c)[idx] for c in cols] + ["", ""])
            for tissue, d in self.dice.items():
                w.writerow([f"dice_{tissue}", d, "", "", "", ""])
        return path


def cubic_roi(center, size_px: int, shape) -> tuple[slice, slice, slice]:
    """Axis-aligned ``size_px``-voxel cube around ``center``; even sizes extend one less above."""
    lo = [int(c) - size_px // 2 for c in center]
    sl = tuple(slice(a, a + size_px) for a in lo)
    for s, n in zip(sl, shape):
        if s.start < 0 or s.stop > n:
            raise ShapeMismatch(f"cubic ROI {sl} leaves volume {tuple(shape)}")
    return sl


def _roi_center(mask: SegmentationMask, level: str):
    x, (y, z), _ = locate_body_center(mask, level)
    return x, y, z


def compare_spine(pred: SegmentationMask, ref: SegmentationMask, volume: CTVolume,
                  cubic_roi_px: int = 10, levels=LEVELS) -> ValidationReport:
    """Per-level vertical-center and mean-HU errors of ``pred`` against ``ref``.

    Both ROIs are ``cubic_roi_px`` voxels on a side and are placed with the
    same body-center procedure, each on its own mask.
    """
    if pred.shape != volume.shape or ref.shape != volume.shape:
        raise ShapeMismatch(f"pred {pred.shape}, ref {ref.shape}, volume {volume.shape}")
    report = ValidationReport()
    sz = volume.spacing[2]
    for level in levels:
        ref_has, pred_has = bool(ref.ids_for(level)), bool(pred.ids_for(level))
        if not ref_has or not ref.binary(level).any():
            continue
        if not pred_has or not pred.binary(level).any():
            raise EmptyLevel(f"{level} present in reference but missing from prediction")
        vert = abs(superior_inferior_center(pred, level) - superior_inferior_center(ref, level)) * sz
        p_hu = float(volume.voxels[cubic_roi(_roi_center(pred, level), cubic_roi_px, volume.shape)].mean())
        r_hu = float(volume.voxels[cubic_roi(_roi_center(ref, level), cubic_roi_px, volume.shape)].mean())
        err = abs(p_hu - r_hu)
        pct = 100.0 * err / abs(r_hu) if r_hu != 0 else (0.0 if err == 0 else float("inf"))
        report.levels.append(LevelError(level, vert, err, pct, p_hu, r_hu))
    return report


def compare_tissues(pred_masks, ref_masks) -> dict[str, float]:
    return {t: dice(pred_masks[t], ref_masks[t]) for t in ref_masks if t in pred_masks}
