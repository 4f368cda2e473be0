"""QA images: spine curved planar reformations and axial tissue overlays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage
from scipy.interpolate import make_interp_spline

from .errors import FewerThanTwoCenters, PathOutOfBounds
from .spine import LEVELS, SpineLevelResult
from .tissue import TissueMetrics
from .volume_io import CTVolume, SegmentationMask

SOFT_TISSUE_WINDOW = (50.0, 400.0)  # level, width
BONE_WINDOW = (400.0, 1800.0)

TISSUE_COLORS = {
    "muscle": (255, 0, 0),
    "imat": (0, 0, 255),
    "vat": (0, 255, 0),
    "sat": (255, 255, 0),
}
LEVEL_COLORS = {
    "T12": (255, 0, 255),
    "L1": (0, 255, 255),
    "L2": (255, 165, 0),
    "L3": (255, 255, 0),
    "L4": (0, 255, 0),
    "L5": (255, 255, 255),
}
ROI_COLOR = (255, 140, 0)


@dataclass(frozen=True)
class OverlayStyle:
    tissue_colors: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(TISSUE_COLORS))
    level_border_colors: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(LEVEL_COLORS))
    alpha: float = 0.3
    border_px: int = 4

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        for palette in (self.tissue_colors, self.level_border_colors):
            if len(set(palette.values())) != len(palette):
                raise ValueError("palette colors must be distinct")


@dataclass
class CprPath:
    samples: np.ndarray  # (n_rows, 3) continuous (x, y, z), z ascending
    control_points: np.ndarray  # (k, 3), z ascending


_font = None


def _get_font():
    global _font
    if _font is None:
        _font = ImageFont.load_default_imagefont()
    return _font


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _resample_axis(arr: np.ndarray, axis: int, step: float) -> np.ndarray:
    """Cubic-spline resample ``arr`` along ``axis`` at positions 0, step, 2*step, ..."""
    n = arr.shape[axis]
    if n < 2 or step == 1.0:
        return arr.copy()
    m = int(math.floor((n - 1) / step + 1e-9)) + 1
    pos = np.minimum(np.arange(m) * step, n - 1)
    # interpolating the offset from one sample keeps constant fields exact
    base = arr.flat[0]
    spline = make_interp_spline(np.arange(n), arr - base, k=min(3, n - 1), axis=axis)
    return spline(pos) + base


def resample_isotropic(volume: CTVolume) -> CTVolume:
    target = min(volume.spacing)
    vox = volume.voxels.astype(np.float64)
    for axis, s in enumerate(volume.spacing):
        if s != target:
            vox = _resample_axis(vox, axis, target / s)
    return CTVolume(vox, (target,) * 3, volume.origin)


def window(hu: np.ndarray, level: float, width: float) -> np.ndarray:
    lo = level - width / 2.0
    return np.clip(np.round((hu - lo) / width * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# curved planar reformation
# ---------------------------------------------------------------------------

def build_cpr_path(roi_centers: Sequence[Sequence[float]], n_slices: int) -> CprPath:
    """Piecewise-linear path through ROI centers, one sample per axial slice.

    Beyond the extreme centers the path continues parallel to the z axis.
    """
    pts = np.asarray(roi_centers, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        raise FewerThanTwoCenters(f"got {len(pts)} center(s)")
    pts = pts[np.argsort(pts[:, 2], kind="stable")]
    if np.any(np.diff(pts[:, 2]) <= 0):
        raise ValueError("ROI centers must have distinct z")
    z = np.arange(n_slices, dtype=float)
    x = np.interp(z, pts[:, 2], pts[:, 0])
    y = np.interp(z, pts[:, 2], pts[:, 1])
    return CprPath(np.stack([x, y, z], axis=1), pts)


def _cpr_coords(shape, path: CprPath, plane: str) -> np.ndarray:
    nx, ny, nz = shape
    s = path.samples[::-1]  # superior row first
    if np.any(s[:, 0] < 0) or np.any(s[:, 0] > nx - 1) or np.any(s[:, 1] < 0) \
            or np.any(s[:, 1] > ny - 1) or np.any(s[:, 2] < 0) or np.any(s[:, 2] > nz - 1):
        raise PathOutOfBounds("CPR path leaves the volume")
    rows = len(s)
    if plane == "coronal":
        cols = np.arange(nx, dtype=float)
        xs = np.broadcast_to(cols, (rows, nx))
        ys = np.broadcast_to(s[:, 1:2], (rows, nx))
        zs = np.broadcast_to(s[:, 2:3], (rows, nx))
    elif plane == "sagittal":
        cols = np.arange(ny, dtype=float)
        xs = np.broadcast_to(s[:, 0:1], (rows, ny))
        ys = np.broadcast_to(cols, (rows, ny))
        zs = np.broadcast_to(s[:, 2:3], (rows, ny))
    else:
        raise ValueError(f"unknown plane {plane!r}")
    return np.stack([xs, ys, zs])


def extract_cpr(volume: CTVolume, path: CprPath, plane: str = "coronal") -> np.ndarray:
    """HU image along the path; rows run superior to inferior."""
    coords = _cpr_coords(volume.shape, path, plane)
    return ndimage.map_coordinates(volume.voxels, coords, order=1, mode="nearest")


def _sample_labels(labels: np.ndarray, path: CprPath, plane: str) -> np.ndarray:
    coords = np.round(_cpr_coords(labels.shape, path, plane)).astype(np.intp)
    return labels[coords[0], coords[1], coords[2]]


def _blend(rgb: np.ndarray, where: np.ndarray, color, alpha: float) -> None:
    if not where.any():
        return
    c = np.asarray(color, dtype=float)
    rgb[where] = np.round((1 - alpha) * rgb[where] + alpha * c)


def _draw_text_block(draw: ImageDraw.ImageDraw, lines: Sequence[str], width: int, fill, right=True):
    font = _get_font()
    y = 3
    for line in lines:
        w = int(draw.textlength(line, font=font))
        x = width - w - 3 if right else 3
        draw.text((x, y), line, fill=fill, font=font)
        y += 12


def render_cpr(volume: CTVolume, path: CprPath, rois: Sequence[SpineLevelResult] = (),
               mask: SegmentationMask | None = None, style: OverlayStyle | None = None,
               plane: str = "coronal", roi_shape: str = "sphere", roi_diameter_mm: float = 10.0) -> np.ndarray:
    """Bone-windowed CPR with level overlay, ROI outlines, SI-center lines and HU text."""
    style = style or OverlayStyle()
    hu = extract_cpr(volume, path, plane)
    h_spacing = volume.spacing[0] if plane == "coronal" else volume.spacing[1]
    stretch = volume.spacing[2] / h_spacing
    nz = volume.shape[2]
    iso = _resample_axis(hu, 0, 1.0 / stretch)
    rgb = np.repeat(window(iso, *BONE_WINDOW)[..., None], 3, axis=2).astype(np.float64)

    def row_of(z):
        return (nz - 1 - z) * stretch

    if mask is not None:
        lab = _sample_labels(mask.labels, path, plane)
        src_rows = np.clip(np.round(np.arange(iso.shape[0]) / stretch).astype(int), 0, nz - 1)
        lab = lab[src_rows]
        for lid, name in sorted(mask.label_map.items()):
            if name in style.level_border_colors:
                _blend(rgb, lab == lid, style.level_border_colors[name], style.alpha)

    img = Image.fromarray(rgb.astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    width = iso.shape[1]
    radius = roi_diameter_mm / 2.0 / h_spacing
    for r in rois:
        col = r.roi_center[0] if plane == "coronal" else r.roi_center[1]
        row = row_of(r.roi_center[2])
        box = [col - radius, row - radius, col + radius, row + radius]
        if roi_shape == "cube":
            draw.rectangle(box, outline=ROI_COLOR)
        else:
            draw.ellipse(box, outline=ROI_COLOR)
        color = style.level_border_colors.get(r.level, (255, 255, 255))
        y = int(round(row_of(r.si_center_z)))
        for x0 in range(0, width, 10):
            draw.line([(x0, y), (min(x0 + 5, width - 1), y)], fill=color)
    lines = [f"{r.level}: {r.hu_statistic:.1f} HU" for r in rois]
    _draw_text_block(draw, lines, width, (255, 255, 255))
    return np.asarray(img)


# ---------------------------------------------------------------------------
# axial overlay
# ---------------------------------------------------------------------------

def metrics_lines(metrics: Sequence[TissueMetrics]) -> list[str]:
    return [m.summary() for m in metrics]


def render_axial_overlay(hu_slice: np.ndarray, masks: Mapping[str, np.ndarray],
                         metrics: Sequence[TissueMetrics] = (), level: str | None = None,
                         style: OverlayStyle | None = None) -> np.ndarray:
    """Soft-tissue windowed slice (rows = y, cols = x) with tissue tints.

    ``hu_slice`` and the masks are indexed [x, y] like every volume here.
    """
    style = style or OverlayStyle()
    gray = window(hu_slice.T, *SOFT_TISSUE_WINDOW)
    rgb = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
    for name, color in style.tissue_colors.items():
        if name in masks:
            _blend(rgb, np.asarray(masks[name], bool).T, color, style.alpha)
    out = rgb.astype(np.uint8)
    if level is not None:
        color = np.asarray(style.level_border_colors[level], np.uint8)
        b = style.border_px
        out[:b], out[-b:], out[:, :b], out[:, -b:] = color, color, color, color
    img = Image.fromarray(out, "RGB")
    draw = ImageDraw.Draw(img)
    if level is not None:
        _draw_text_block(draw, [level], out.shape[1], style.level_border_colors[level], right=False)
    if metrics:
        _draw_text_block(draw, metrics_lines(metrics), out.shape[1], (255, 255, 255))
    return np.asarray(img)


def save_png(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(image, np.uint8), "RGB").save(path, format="PNG")
    return path


def cpr_centers(results: Sequence[SpineLevelResult]) -> list[tuple[int, int, int]]:
    order = {lvl: i for i, lvl in enumerate(LEVELS)}
    return [r.roi_center for r in sorted(results, key=lambda r: order[r.level])]
