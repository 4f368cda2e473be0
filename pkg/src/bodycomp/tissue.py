"""Muscle / adipose post-processing and per-tissue area and density."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import MasksOverlap, ShapeMismatch

TISSUES = ("muscle", "imat", "vat", "sat")

HOLE_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)  # 4-connected
COMPONENT_CONNECTIVITY = ndimage.generate_binary_structure(2, 2)  # 8-connected


@dataclass(frozen=True)
class PostProcessConfig:
    sat_hole_max_px: int = 200
    other_hole_max_px: int = 20
    imat_hu_low: float = -190.0
    imat_hu_high: float = -30.0
    imat_min_component_px: int = 10

    def __post_init__(self):
        if self.sat_hole_max_px < 0 or self.other_hole_max_px < 0:
            raise ValueError("hole thresholds must be non-negative")
        if not self.imat_hu_low < self.imat_hu_high:
            raise ValueError("imat_hu_low must be below imat_hu_high")

    def hole_threshold(self, tissue: str) -> int:
        return self.sat_hole_max_px if tissue == "sat" else self.other_hole_max_px


@dataclass(frozen=True)
class TissueMetrics:
    tissue: str
    area_cm2: float
    mean_hu: float | None
    pixel_count: int

    def summary(self) -> str:
        """One-line text used in image annotations."""
        hu = "--" if self.mean_hu is None else f"{self.mean_hu:.1f} HU"
        return f"{self.tissue.upper()}: {self.area_cm2 * 100:.1f} mm2, {hu}"


def fill_holes(mask: np.ndarray, tissue: str, cfg: PostProcessConfig | None = None) -> np.ndarray:
    """Fill enclosed background components smaller than the tissue's threshold."""
    cfg = cfg or PostProcessConfig()
    mask = np.asarray(mask, dtype=bool)
    limit = cfg.hole_threshold(tissue)
    bg, n = ndimage.label(~mask, structure=HOLE_CONNECTIVITY)
    if n == 0 or limit == 0:
        return mask.copy()
    sizes = np.bincount(bg.ravel(), minlength=n + 1)
    border = np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
    fillable = sizes < limit
    fillable[0] = False
    fillable[border] = False
    return mask | fillable[bg]


def filter_small_components(mask: np.ndarray, min_px: int) -> np.ndarray:
    """Drop 8-connected components with fewer than ``min_px`` pixels."""
    comp, n = ndimage.label(mask, structure=COMPONENT_CONNECTIVITY)
    if n == 0:
        return np.zeros(mask.shape, bool)
    sizes = np.bincount(comp.ravel(), minlength=n + 1)
    keep = sizes >= min_px
    keep[0] = False
    return keep[comp]


def relabel_imat(muscle: np.ndarray, hu_slice: np.ndarray, cfg: PostProcessConfig | None = None):
    """Split muscle into (muscle', imat) by the fat HU window.

    Candidate islands under the component-size floor stay muscle, so the two
    outputs always partition the input muscle mask.
    """
    cfg = cfg or PostProcessConfig()
    muscle = np.asarray(muscle, dtype=bool)
    if muscle.shape != hu_slice.shape:
        raise ShapeMismatch(f"mask {muscle.shape} vs slice {hu_slice.shape}")
    candidate = muscle & (hu_slice > cfg.imat_hu_low) & (hu_slice < cfg.imat_hu_high)
    imat = filter_small_components(candidate, cfg.imat_min_component_px)
    return muscle & ~imat, imat


def compute_metrics(masks: Mapping[str, np.ndarray], hu_slice: np.ndarray, spacing) -> list[TissueMetrics]:
    sx, sy = float(spacing[0]), float(spacing[1])
    total = np.zeros(hu_slice.shape, np.int32)
    for name, m in masks.items():
        if m.shape != hu_slice.shape:
            raise ShapeMismatch(f"{name} mask {m.shape} vs slice {hu_slice.shape}")
        total += m.astype(bool)
    if np.any(total > 1):
        raise MasksOverlap(f"{int((total > 1).sum())} pixels carry more than one tissue")
    out = []
    for name in TISSUES:
        if name not in masks:
            continue
        m = np.asarray(masks[name], dtype=bool)
        n = int(m.sum())
        mean = float(hu_slice[m].mean()) if n else None
        out.append(TissueMetrics(name, n * sx * sy / 100.0, mean, n))
    return out


def postprocess_masks(hu_slice: np.ndarray, raw_masks: Mapping[str, np.ndarray],
                      cfg: PostProcessConfig | None = None, native_imat: bool | None = None):
    """Hole filling and IMAT handling for one axial slice.

    Tissues are hole-filled in ``TISSUES`` order; a filled pixel is claimed
    only if no tissue owns it yet, so the outputs stay disjoint.  With
    ``native_imat`` (a model that predicts IMAT itself) the HU relabel is
    skipped and only the component-size floor is applied, sub-floor islands
    going back to muscle.

    The result always has all four tissues.
    """
    cfg = cfg or PostProcessConfig()
    if native_imat is None:
        native_imat = "imat" in raw_masks
    shape = hu_slice.shape
    raw = {t: np.asarray(raw_masks[t], dtype=bool) if t in raw_masks else np.zeros(shape, bool)
           for t in TISSUES}
    for t, m in raw.items():
        if m.shape != shape:
            raise ShapeMismatch(f"{t} mask {m.shape} vs slice {shape}")

    claimed = np.zeros(shape, bool)
    for m in raw.values():
        claimed |= m
    filled = {}
    for t in TISSUES:
        grown = fill_holes(raw[t], t, cfg) & ~claimed
        filled[t] = raw[t] | grown
        claimed |= grown

    if native_imat:
        imat = filter_small_components(filled["imat"], cfg.imat_min_component_px)
        muscle = filled["muscle"] | (filled["imat"] & ~imat)
    else:
        muscle, imat = relabel_imat(filled["muscle"] | filled["imat"], hu_slice, cfg)
    return {"muscle": muscle, "imat": imat, "vat": filled["vat"], "sat": filled["sat"]}


def process_slice(hu_slice: np.ndarray, raw_masks: Mapping[str, np.ndarray],
                  cfg: PostProcessConfig | None = None, spacing=(1.0, 1.0),
                  native_imat: bool | None = None):
    """Post-process masks and measure them; returns ``(final_masks, metrics)``."""
    final = postprocess_masks(hu_slice, raw_masks, cfg, native_imat)
    return final, compute_metrics(final, hu_slice, spacing)
