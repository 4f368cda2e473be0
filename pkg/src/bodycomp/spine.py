"""Trabecular ROI localization and superior-inferior level centers.

Per vertebral level: right-left center of mass, sagittal plane through it,
vertebral body isolated from the spinous process by keeping the anterior of
the two largest components, 2D body centroid, then a sphere/cube ROI around
the combined 3D point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    BodyCompError,
    CenterOutOfBounds,
    EmptyLevel,
    EmptyMask,
    EmptyRoi,
    EmptySlice,
    RoiExceedsVolume,
    ShapeMismatch,
)
from .volume_io import CTVolume, SegmentationMask

LEVELS = ("T12", "L1", "L2", "L3", "L4", "L5")  # superior -> inferior

CONNECTIVITY_2D = np.ones((3, 3), dtype=bool)
# inclusion tolerance for floating distance comparisons, in mm
ROI_EPS = 1e-9


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class RoiSpec:
    shape: str = "sphere"
    diameter_mm: float = 10.0
    statistic: str = "median"

    def __post_init__(self):
        if self.shape not in ("sphere", "cube"):
            raise ValueError(f"unknown ROI shape {self.shape!r}")
        if self.statistic not in ("median", "mean"):
            raise ValueError(f"unknown statistic {self.statistic!r}")
        if not self.diameter_mm > 0:
            raise ValueError("diameter_mm must be positive")


@dataclass
class SpineLevelResult:
    level: str
    rl_center_index: int
    body_center_yz: tuple[int, int]
    roi_center: tuple[int, int, int]
    roi_voxels: np.ndarray  # (N, 3) int indices, lexicographically sorted
    hu_statistic: float
    si_center_z: int
    si_center_path: str | None = None
    single_component: bool = False


@dataclass(frozen=True)
class LevelSkip:
    level: str
    reason: str


@dataclass
class SpineAnalysis:
    results: list[SpineLevelResult] = field(default_factory=list)
    skipped: list[LevelSkip] = field(default_factory=list)

    def by_level(self) -> dict[str, SpineLevelResult]:
        return {r.level: r for r in self.results}


# ---------------------------------------------------------------------------
# per-level geometry
# ---------------------------------------------------------------------------

def _level_region(mask: SegmentationMask, level: str):
    """Binary crop of one level and the index offset of the crop."""
    ids = mask.ids_for(level)
    binary = mask.binary(level) if ids else np.zeros(mask.shape, bool)
    if not binary.any():
        raise EmptyLevel(level)
    sl = ndimage.find_objects(binary.astype(np.uint8))[0]
    return binary[sl], tuple(s.start for s in sl)


def _axis_mean(crop: np.ndarray, axis: int, offset: int) -> float:
    other = tuple(a for a in range(crop.ndim) if a != axis)
    counts = crop.sum(axis=other, dtype=np.int64)
    idx = np.arange(counts.size) + offset
    return float((counts * idx).sum() / counts.sum())


def rl_center_of_mass(mask: SegmentationMask, level: str) -> int:
    crop, off = _level_region(mask, level)
    return round_half_away(_axis_mean(crop, 0, off[0]))


def superior_inferior_center(mask: SegmentationMask, level: str) -> int:
    crop, off = _level_region(mask, level)
    return round_half_away(_axis_mean(crop, 2, off[2]))


def isolate_vertebral_body(sagittal: np.ndarray) -> np.ndarray:
    """Keep the anterior of the two largest 8-connected components.

    ``sagittal`` is a binary (y, z) plane with larger y = more posterior.
    A plane holding a single component is returned unchanged.
    """
    return _isolate(sagittal)[0]


def _isolate(sagittal):
    sagittal = np.asarray(sagittal, dtype=bool)
    comp, n = ndimage.label(sagittal, structure=CONNECTIVITY_2D)
    if n == 0:
        raise EmptySlice("no foreground in sagittal plane")
    if n == 1:
        return sagittal.copy(), True
    ids = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(comp), comp, ids)
    rows = np.broadcast_to(np.arange(comp.shape[0])[:, None], comp.shape)
    cy = ndimage.mean(rows, comp, ids)
    # larger area first; equal areas prefer the more anterior
    order = sorted(range(n), key=lambda i: (-areas[i], cy[i]))
    top = order[:2]
    keep = min(top, key=lambda i: cy[i])
    return comp == ids[keep], False


def body_center_2d(body: np.ndarray) -> tuple[int, int]:
    ys, zs = np.nonzero(body)
    if ys.size == 0:
        raise EmptyMask("vertebral body mask is empty")
    return round_half_away(ys.mean()), round_half_away(zs.mean())


def roi_offsets(spacing, spec: RoiSpec) -> np.ndarray:
    """Integer voxel offsets inside the ROI around its center voxel."""
    r = spec.diameter_mm / 2.0
    reach = [int(math.floor(r / s)) + 1 for s in spacing]
    grids = np.meshgrid(*[np.arange(-k, k + 1) for k in reach], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    phys = off * np.asarray(spacing, dtype=float)
    if spec.shape == "sphere":
        keep = (phys ** 2).sum(axis=1) <= r * r + ROI_EPS
    else:
        keep = np.all(np.abs(phys) <= r + ROI_EPS, axis=1)
    return off[keep]


def build_roi(volume: CTVolume, center, spec: RoiSpec) -> np.ndarray:
    shape = np.asarray(volume.shape)
    c = tuple(int(v) for v in center)
    if any(v < 0 or v >= n for v, n in zip(c, volume.shape)):
        raise CenterOutOfBounds(f"center {c} outside volume {volume.shape}")
    vox = roi_offsets(volume.spacing, spec) + c
    if np.any(vox < 0) or np.any(vox >= shape):
        raise RoiExceedsVolume(f"ROI around {c} leaves volume {volume.shape}")
    return vox


def roi_statistic(volume: CTVolume, roi_voxels: np.ndarray, statistic: str = "median") -> float:
    roi_voxels = np.asarray(roi_voxels)
    if roi_voxels.size == 0:
        raise EmptyRoi("ROI has no voxels")
    values = volume.voxels[roi_voxels[:, 0], roi_voxels[:, 1], roi_voxels[:, 2]]
    if statistic == "median":
        return float(np.median(values))
    if statistic == "mean":
        return float(np.mean(values))
    raise ValueError(f"unknown statistic {statistic!r}")


def locate_body_center(mask: SegmentationMask, level: str) -> tuple[int, tuple[int, int], bool]:
    """Right-left center and sagittal body centroid (y, z) for a level."""
    crop, off = _level_region(mask, level)
    x = round_half_away(_axis_mean(crop, 0, off[0]))
    return (x,) + _body_center_from_crop(crop, off, x)


def _body_center_from_crop(crop, off, x):
    plane = np.zeros(0)
    if off[0] <= x < off[0] + crop.shape[0]:
        plane = crop[x - off[0]]
    if not plane.any():
        raise EmptySlice(f"no level voxels in sagittal plane x={x}")
    body, single = _isolate(plane)
    cy, cz = body_center_2d(body)
    return (cy + off[1], cz + off[2]), single


def _nearest_slice(volume: CTVolume, crop, off) -> int:
    counts = crop.sum(axis=(0, 1), dtype=np.int64)
    zs = volume.slice_z()[off[2]: off[2] + counts.size]
    mean_z = float((counts * zs).sum() / counts.sum())
    # argmin returns the first (inferior) index on exact ties
    return int(np.argmin(np.abs(volume.slice_z() - mean_z)))


def analyze_level(volume: CTVolume, mask: SegmentationMask, level: str, spec: RoiSpec,
                  region=None) -> SpineLevelResult:
    crop, off = region if region is not None else _level_region(mask, level)
    x = round_half_away(_axis_mean(crop, 0, off[0]))
    (cy, cz), single = _body_center_from_crop(crop, off, x)
    center = (x, cy, cz)
    voxels = build_roi(volume, center, spec)
    stat = roi_statistic(volume, voxels, spec.statistic)
    si = round_half_away(_axis_mean(crop, 2, off[2]))
    path = None
    if volume.source_paths:
        path = volume.source_paths[_nearest_slice(volume, crop, off)]
    return SpineLevelResult(level, x, (cy, cz), center, voxels, stat, si, path, single)


def analyze_spine(volume: CTVolume, mask: SegmentationMask, spec: RoiSpec | None = None) -> SpineAnalysis:
    spec = spec or RoiSpec()
    if mask.shape != volume.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs volume {volume.shape}")
    out = SpineAnalysis()
    for level in LEVELS:
        try:
            out.results.append(analyze_level(volume, mask, level, spec))
        except BodyCompError as exc:
            out.skipped.append(LevelSkip(level, f"{type(exc).__name__}: {exc}"))
    return out
