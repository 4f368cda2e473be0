"""Synthetic CT phantoms with exact ground truth, plus fixture writers.

Spine phantoms are stacks of cylindrical vertebral bodies (cortical shell
around a uniform trabecular core) with an optional box-shaped spinous
process behind each body.  Slice phantoms are concentric ellipses: SAT
annulus, muscle ring, and a central VAT disk surrounded by unlabeled organ
tissue.

Both specs round-trip through a small INI-style text format, e.g.::

    [volume]
    shape = 80, 80, 310
    spacing = 1.0, 1.0, 1.5
    background_hu = 0

    [level L3]
    center_mm = 40, 35, 120
    trabecular_hu = 150
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pydicom
from pydicom.dataset import FileMetaDataset
from pydicom.uid import CTImageStorage, ExplicitVRLittleEndian, generate_uid
from scipy import ndimage

from .errors import SpecInfeasible
from .seg_backend import DEFAULT_CLASS_MAPS, SPINE_MODEL, STANFORD_MODEL
from .spine import LEVELS
from .volume_io import CTVolume, SegmentationMask, save_nifti_mask

SPINE_LABELS = {name: lid for lid, name in DEFAULT_CLASS_MAPS[SPINE_MODEL].items()}
TISSUE_LABELS = {name: lid for lid, name in DEFAULT_CLASS_MAPS[STANFORD_MODEL].items()}


# ---------------------------------------------------------------------------
# spine
# ---------------------------------------------------------------------------

@dataclass
class LevelSpec:
    name: str
    center_mm: tuple[float, float, float]
    trabecular_hu: float
    radius_mm: float = 15.0
    half_height_mm: float = 12.0
    cortical_hu: float = 400.0
    cortical_mm: float = 2.0
    process_offset_mm: float = 25.0  # body center to process center, posterior
    process_size_mm: tuple[float, float, float] = (6.0, 8.0, 16.0)


@dataclass
class SpinePhantomSpec:
    levels: list[LevelSpec]
    shape: tuple[int, int, int] = (512, 512, 300)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    background_hu: float = 0.0
    include_processes: bool = True
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class SpineGroundTruth:
    body_center_index: dict[str, tuple[float, float, float]]
    trabecular_hu: dict[str, float]
    si_center_index: dict[str, float]


def _box(center_idx, half_idx, shape):
    lo = [max(int(math.floor(c - h)), 0) for c, h in zip(center_idx, half_idx)]
    hi = [min(int(math.ceil(c + h)) + 1, n) for c, h, n in zip(center_idx, half_idx, shape)]
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def _check_spine_spec(spec: SpinePhantomSpec):
    extent = np.asarray(spec.shape) * np.asarray(spec.spacing)
    spans = []
    for lv in spec.levels:
        if lv.name not in LEVELS:
            raise SpecInfeasible(f"unknown level {lv.name}")
        c = np.asarray(lv.center_mm, float)
        r, h = lv.radius_mm, lv.half_height_mm
        lo = c - (r, r, h)
        hi = c + (r, r, h)
        if spec.include_processes:
            px, py, pz = (s / 2 for s in lv.process_size_mm)
            if lv.process_offset_mm - py <= r:
                raise SpecInfeasible(f"{lv.name}: spinous process touches the body")
            hi[1] = max(hi[1], c[1] + lv.process_offset_mm + py)
            lo[2], hi[2] = min(lo[2], c[2] - pz), max(hi[2], c[2] + pz)
        if np.any(lo < 0) or np.any(hi > extent - np.asarray(spec.spacing)):
            raise SpecInfeasible(f"{lv.name}: structure leaves the volume")
        if lv.cortical_mm >= min(r, h):
            raise SpecInfeasible(f"{lv.name}: cortical shell fills the body")
        spans.append((lo[2], hi[2], lv.name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 <= a1:
            raise SpecInfeasible(f"levels {an} and {bn} overlap in z")


def generate_spine_phantom(spec: SpinePhantomSpec, torso=None):
    """Return ``(volume, mask, ground_truth)``.

    ``torso`` is an optional ``(hu_plane, ...)`` pair from
    :func:`generate_slice_phantom`; its HU plane fills every axial slice.
    """
    _check_spine_spec(spec)
    sp = np.asarray(spec.spacing, float)
    vox = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    if torso is not None:
        vox[:] = torso[:, :, None]
    labels = np.zeros(spec.shape, dtype=np.uint8)
    truth = SpineGroundTruth({}, {}, {})
    for lv in spec.levels:
        lid = SPINE_LABELS[lv.name]
        c = np.asarray(lv.center_mm, float) / sp
        r, h, t = lv.radius_mm, lv.half_height_mm, lv.cortical_mm
        sl = _box(c, (r / sp[0], r / sp[1], h / sp[2]), spec.shape)
        gx, gy, gz = np.ogrid[sl]
        dx, dy, dz = (gx - c[0]) * sp[0], (gy - c[1]) * sp[1], (gz - c[2]) * sp[2]
        rad = np.sqrt(dx ** 2 + dy ** 2)
        body = (rad <= r) & (np.abs(dz) <= h)
        core = (rad <= r - t) & (np.abs(dz) <= h - t)
        sub = vox[sl]
        sub[body] = lv.cortical_hu
        sub[core] = lv.trabecular_hu
        labels[sl][body] = lid
        if spec.include_processes:
            pc = c + np.array([0.0, lv.process_offset_mm / sp[1], 0.0])
            half = np.asarray(lv.process_size_mm) / 2.0
            psl = _box(pc, half / sp, spec.shape)
            px, py, pz = np.ogrid[psl]
            inside = ((np.abs((px - pc[0]) * sp[0]) <= half[0])
                      & (np.abs((py - pc[1]) * sp[1]) <= half[1])
                      & (np.abs((pz - pc[2]) * sp[2]) <= half[2]))
            vox[psl][inside] = lv.cortical_hu
            labels[psl][inside] = lid
        truth.body_center_index[lv.name] = tuple(float(v) for v in c)
        truth.trabecular_hu[lv.name] = float(lv.trabecular_hu)
    for lv in spec.levels:
        lid = SPINE_LABELS[lv.name]
        counts = (labels == lid).sum(axis=(0, 1))
        truth.si_center_index[lv.name] = float((counts * np.arange(len(counts))).sum() / counts.sum())
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        vox += rng.normal(0.0, spec.noise_sigma, size=vox.shape)
    volume = CTVolume(vox, spec.spacing)
    mask = SegmentationMask(labels, dict(DEFAULT_CLASS_MAPS[SPINE_MODEL]), spec.spacing)
    return volume, mask, truth


def default_spine_spec(shape=(512, 512, 300), spacing=(1.0, 1.0, 1.5),
                       trabecular_hu=(180, 170, 160, 150, 140, 130), curved=False,
                       include_processes=True, radius_mm=15.0, half_height_mm=12.0,
                       pitch_mm=34.0, process_offset_mm=25.0) -> SpinePhantomSpec:
    """Six levels stacked around the volume center, T12 uppermost.

    Centers are snapped to voxel centers.  ``curved`` bends the column in x
    and y so CPR paths are non-trivial.
    """
    sp = np.asarray(spacing, float)
    cx, cy = shape[0] // 2, int(shape[1] * 0.45)
    mid_z = shape[2] * spacing[2] / 2.0
    levels = []
    for i, (name, hu) in enumerate(zip(LEVELS, trabecular_hu)):
        z_mm = mid_z + (2.5 - i) * pitch_mm
        x_mm, y_mm = cx * sp[0], cy * sp[1]
        if curved:
            x_mm += 6.0 * math.sin(i * 1.1)
            y_mm += 8.0 * math.cos(i * 0.9) - 4.0
        center = tuple(float(round(v / s) * s) for v, s in zip((x_mm, y_mm, z_mm), sp))
        levels.append(LevelSpec(name, center, float(hu), radius_mm=radius_mm,
                                half_height_mm=half_height_mm, process_offset_mm=process_offset_mm))
    return SpinePhantomSpec(levels, tuple(shape), tuple(spacing), include_processes=include_processes)


# ---------------------------------------------------------------------------
# axial slice
# ---------------------------------------------------------------------------

@dataclass
class Pocket:
    position: tuple[int, int]  # (x, y) of the first pixel
    size_px: int
    hu: float = -100.0


@dataclass
class Hole:
    tissue: str
    position: tuple[int, int]
    size_px: int


@dataclass
class SlicePhantomSpec:
    shape: tuple[int, int] = (128, 128)
    spacing: tuple[float, float] = (0.8, 0.8)
    center: tuple[float, float] = (63.5, 63.5)
    body_axes_px: tuple[float, float] = (58.0, 46.0)
    sat_thickness_px: float = 12.0
    muscle_thickness_px: float = 10.0
    vat_radius_px: float = 14.0
    background_hu: float = -1000.0
    organ_hu: float = 30.0
    sat_hu: float = -100.0
    muscle_hu: float = 40.0
    vat_hu: float = -90.0
    pockets: list[Pocket] = field(default_factory=list)
    holes: list[Hole] = field(default_factory=list)


@dataclass
class SliceGroundTruth:
    pixel_count: dict[str, int]
    mean_hu: dict[str, float | None]
    expected_masks: dict[str, np.ndarray]


def _block(position, size, shape):
    w = int(math.ceil(math.sqrt(size)))
    k = np.arange(size)
    xs, ys = position[0] + k % w, position[1] + k // w
    if xs.max() >= shape[0] or ys.max() >= shape[1] or min(position) < 0:
        raise SpecInfeasible(f"block at {position} of {size} px leaves the slice")
    return xs, ys


def generate_slice_phantom(spec: SlicePhantomSpec, cfg=None):
    """Return ``(hu_slice, raw_masks, ground_truth)``; arrays are [x, y]."""
    from .tissue import PostProcessConfig

    cfg = cfg or PostProcessConfig()
    gx, gy = np.meshgrid(np.arange(spec.shape[0]) - spec.center[0],
                         np.arange(spec.shape[1]) - spec.center[1], indexing="ij")

    def ellipse(shrink):
        a, b = spec.body_axes_px[0] - shrink, spec.body_axes_px[1] - shrink
        return (gx / a) ** 2 + (gy / b) ** 2 <= 1.0

    body = ellipse(0.0)
    inner_sat = ellipse(spec.sat_thickness_px)
    inner_muscle = ellipse(spec.sat_thickness_px + spec.muscle_thickness_px)
    if not body.any() or not inner_muscle.any():
        raise SpecInfeasible("compartment thicknesses exceed the body")
    if np.any(body[0]) or np.any(body[-1]) or np.any(body[:, 0]) or np.any(body[:, -1]):
        raise SpecInfeasible("body ellipse touches the slice border")
    sat = body & ~inner_sat
    muscle = inner_sat & ~inner_muscle
    vat = gx ** 2 + gy ** 2 <= spec.vat_radius_px ** 2
    if np.any(vat & ~inner_muscle):
        raise SpecInfeasible("VAT disk reaches the muscle ring")

    hu = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    hu[body] = spec.organ_hu
    hu[sat] = spec.sat_hu
    hu[muscle] = spec.muscle_hu
    hu[vat] = spec.vat_hu

    expected_imat = np.zeros(spec.shape, bool)
    for p in spec.pockets:
        xs, ys = _block(p.position, p.size_px, spec.shape)
        if not muscle[xs, ys].all():
            raise SpecInfeasible(f"pocket at {p.position} is not inside muscle")
        hu[xs, ys] = p.hu
        if p.size_px >= cfg.imat_min_component_px and cfg.imat_hu_low < p.hu < cfg.imat_hu_high:
            expected_imat[xs, ys] = True

    raw = {"muscle": muscle.copy(), "vat": vat.copy(), "sat": sat.copy()}
    expected = {"muscle": muscle & ~expected_imat, "imat": expected_imat, "vat": vat.copy(), "sat": sat.copy()}
    for hl in spec.holes:
        xs, ys = _block(hl.position, hl.size_px, spec.shape)
        m = raw[hl.tissue]
        if not m[xs, ys].all():
            raise SpecInfeasible(f"hole at {hl.position} is not inside {hl.tissue}")
        m[xs, ys] = False
        comp, _ = ndimage.label(~m, structure=ndimage.generate_binary_structure(2, 1))
        ids = np.unique(comp[xs, ys])
        if len(ids) != 1 or (comp == ids[0]).sum() != hl.size_px:
            raise SpecInfeasible(f"hole at {hl.position} is not enclosed by {hl.tissue}")
        if hl.size_px >= cfg.hole_threshold(hl.tissue):
            expected[hl.tissue][xs, ys] = False
            if hl.tissue == "muscle":
                expected["imat"][xs, ys] = False

    # ground truth by region arithmetic, independent of the measuring code
    counts, means = {}, {}
    for t, m in expected.items():
        n = int(m.sum())
        counts[t] = n
        if n == 0:
            means[t] = None
            continue
        values, weights = np.unique(hu[m], return_counts=True)
        means[t] = float((values * weights).sum() / n)
    return hu, raw, SliceGroundTruth(counts, means, expected)


def tissue_label_plane(masks) -> np.ndarray:
    """Combine binary tissue masks into one label plane (stanford label ids)."""
    shape = next(iter(masks.values())).shape
    plane = np.zeros(shape, np.uint8)
    for name, m in masks.items():
        if name in TISSUE_LABELS:
            plane[np.asarray(m, bool)] = TISSUE_LABELS[name]
    return plane


# ---------------------------------------------------------------------------
# spec text format
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_like(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",")]
        return tuple(type(d)(float(p)) if isinstance(d, int) else float(p) for d, p in zip(default, parts))
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def spine_spec_to_text(spec: SpinePhantomSpec) -> str:
    cp = configparser.ConfigParser()
    cp["volume"] = {f.name: _fmt(getattr(spec, f.name)) for f in fields(spec) if f.name != "levels"}
    for lv in spec.levels:
        cp[f"level {lv.name}"] = {k: _fmt(v) for k, v in asdict(lv).items() if k != "name"}
    return _dump(cp)


def spine_spec_from_text(text: str) -> SpinePhantomSpec:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    proto = SpinePhantomSpec(levels=[])
    kw = {k: _parse_like(v, getattr(proto, k)) for k, v in cp["volume"].items()}
    levels = []
    lproto = LevelSpec("L1", (0.0, 0.0, 0.0), 0.0)
    for sec in cp.sections():
        if not sec.startswith("level "):
            continue
        vals = {k: _parse_like(v, getattr(lproto, k)) for k, v in cp[sec].items()}
        levels.append(replace(lproto, name=sec.split(None, 1)[1], **vals))
    return SpinePhantomSpec(levels=levels, **kw)


def slice_spec_to_text(spec: SlicePhantomSpec) -> str:
    cp = configparser.ConfigParser()
    cp["slice"] = {f.name: _fmt(getattr(spec, f.name)) for f in fields(spec)
                   if f.name not in ("pockets", "holes")}
    for i, p in enumerate(spec.pockets):
        cp[f"pocket {i}"] = {k: _fmt(v) for k, v in asdict(p).items()}
    for i, h in enumerate(spec.holes):
        cp[f"hole {i}"] = {k: _fmt(v) for k, v in asdict(h).items()}
    return _dump(cp)


def slice_spec_from_text(text: str) -> SlicePhantomSpec:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    proto = SlicePhantomSpec()
    kw = {k: _parse_like(v, getattr(proto, k)) for k, v in cp["slice"].items()} if "slice" in cp else {}
    pockets, holes = [], []
    pproto, hproto = Pocket((0, 0), 0), Hole("sat", (0, 0), 0)
    for sec in cp.sections():
        if sec.startswith("pocket "):
            pockets.append(replace(pproto, **{k: _parse_like(v, getattr(pproto, k)) for k, v in cp[sec].items()}))
        elif sec.startswith("hole "):
            holes.append(replace(hproto, **{k: _parse_like(v, getattr(hproto, k)) for k, v in cp[sec].items()}))
    return SlicePhantomSpec(pockets=pockets, holes=holes, **kw)


def _dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# fixture writers
# ---------------------------------------------------------------------------

def _dicom_dataset(plane_hu, spacing, position, instance, series_uid, study_uid,
                   slope=1.0, intercept=-1024.0, thickness=None):
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = CTImageStorage
    sop_uid = generate_uid(entropy_srcs=[series_uid, str(instance)])
    meta.MediaStorageSOPInstanceUID = sop_uid
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    ds = pydicom.Dataset()
    ds.file_meta = meta
    ds.SOPClassUID = CTImageStorage
    ds.SOPInstanceUID = sop_uid
    ds.Modality = "CT"
    ds.StudyInstanceUID = study_uid
    ds.SeriesInstanceUID = series_uid
    ds.InstanceNumber = instance
    ds.ImagePositionPatient = [float(v) for v in position]
    ds.ImageOrientationPatient = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    ds.PixelSpacing = [float(spacing[1]), float(spacing[0])]
    if thickness is not None:
        ds.SliceThickness = float(thickness)
    raw = np.round((np.asarray(plane_hu).T - intercept) / slope)
    ds.Rows, ds.Columns = raw.shape
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 1
    ds.RescaleSlope = slope
    ds.RescaleIntercept = intercept
    ds.PixelData = raw.astype("<i2").tobytes()
    return ds


def write_dicom_series(volume: CTVolume, out_dir: str | Path, prefix: str = "slice",
                       slope: float = 1.0, intercept: float = -1024.0) -> list[Path]:
    """Write one axial DICOM file per slice of ``volume`` (deterministic UIDs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series_uid = generate_uid(entropy_srcs=[str(out_dir.name), "series"])
    study_uid = generate_uid(entropy_srcs=[str(out_dir.name), "study"])
    zs = volume.slice_z()
    paths = []
    for k in range(volume.shape[2]):
        pos = (volume.origin[0], volume.origin[1], zs[k])
        ds = _dicom_dataset(volume.voxels[:, :, k], volume.spacing, pos, k + 1, series_uid, study_uid,
                            slope, intercept, thickness=volume.spacing[2])
        p = out_dir / f"{prefix}_{k:04d}.dcm"
        ds.save_as(p, enforce_file_format=True)
        paths.append(p)
    return paths


def write_dicom_slice(hu_plane: np.ndarray, spacing, path: str | Path, z: float = 0.0,
                      slope: float = 1.0, intercept: float = -1024.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    uid = generate_uid(entropy_srcs=[str(path.name)])
    ds = _dicom_dataset(hu_plane, spacing, (0.0, 0.0, z), 1, uid, uid, slope, intercept)
    ds.save_as(path, enforce_file_format=True)
    return path


def write_tissue_mask(masks, spacing, path: str | Path) -> Path:
    plane = tissue_label_plane(masks)[:, :, None]
    sp = (float(spacing[0]), float(spacing[1]), 1.0)
    return save_nifti_mask(SegmentationMask(plane, dict(DEFAULT_CLASS_MAPS[STANFORD_MODEL]), sp), path)
