"""DICOM / NIfTI ingestion into canonical in-memory volumes.

Every array produced here is indexed ``[x, y, z]`` with x running right to
left, y anterior to posterior and z inferior to superior (the DICOM patient
LPS directions).  Downstream modules rely on this order and never reorient.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError

from .errors import (
    InconsistentSliceGeometry,
    MissingPixelSpacing,
    NonUniformSliceSpacing,
    OrientationUnresolvable,
    RootNotFound,
    UnparseableFile,
    UnsupportedDatatype,
)

log = logging.getLogger(__name__)

SERIES_FILE_THRESHOLD = 300
SLICE_GAP_TOLERANCE = 0.10
_GEOMETRY_ATOL = 1e-4
# nibabel axis codes for the canonical index directions
CANONICAL_AXCODES = ("L", "P", "S")


@dataclass
class CTVolume:
    """HU voxels plus the geometry needed to measure them.

    ``z_positions`` holds the physical z of each slice when the volume came
    from a DICOM series; it is ``None`` for synthetic or NIfTI volumes, in
    which case slices are assumed evenly spaced from ``origin[2]``.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    source_paths: tuple[str, ...] = ()
    z_positions: np.ndarray | None = None

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"invalid spacing {self.spacing}")
        self.origin = tuple(float(o) for o in self.origin)
        self.source_paths = tuple(str(p) for p in self.source_paths)
        if self.source_paths and len(self.source_paths) != self.voxels.shape[2]:
            raise ValueError("source_paths must list one file per slice")
        if self.z_positions is not None:
            self.z_positions = np.asarray(self.z_positions, dtype=float)
            if np.any(np.diff(self.z_positions) <= 0):
                raise ValueError("z_positions must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def slice_z(self) -> np.ndarray:
        """Physical z (mm) of every slice."""
        if self.z_positions is not None:
            return self.z_positions
        return self.origin[2] + self.spacing[2] * np.arange(self.shape[2])


@dataclass
class SegmentationMask:
    labels: np.ndarray
    label_map: dict[int, str]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise UnsupportedDatatype(f"label array must be integer, got {self.labels.dtype}")
        self.label_map = {int(k): str(v) for k, v in self.label_map.items()}
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        missing = set(present_labels(self.labels)) - set(self.label_map)
        if missing:
            raise ValueError(f"labels {sorted(missing)} have no entry in label_map")

    @property
    def shape(self):
        return self.labels.shape

    def ids_for(self, name: str) -> list[int]:
        return [k for k, v in self.label_map.items() if v == name]

    def binary(self, name: str) -> np.ndarray:
        ids = self.ids_for(name)
        if len(ids) == 1:
            return self.labels == ids[0]
        return np.isin(self.labels, ids)

    def names(self) -> list[str]:
        """Semantic names of the labels actually present."""
        present = set(present_labels(self.labels))
        return [self.label_map[k] for k in sorted(present)]


@dataclass(frozen=True)
class SeriesCandidate:
    directory: Path
    file_count: int
    is_3d_eligible: bool


def present_labels(labels: np.ndarray) -> list[int]:
    """Sorted nonzero label ids occurring in ``labels``."""
    if labels.size == 0:
        return []
    lo, hi = int(labels.min()), int(labels.max())
    if lo >= 0 and hi < 65536:
        counts = np.bincount(labels.ravel().astype(np.intp, copy=False), minlength=hi + 1)
        return [int(i) for i in np.flatnonzero(counts) if i != 0]
    return [int(v) for v in np.unique(labels) if v != 0]


# ---------------------------------------------------------------------------
# DICOM
# ---------------------------------------------------------------------------

def is_dicom_file(path: str | os.PathLike) -> bool:
    """Preamble magic test with a permissive parse for preamble-less files."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(132)
    except OSError:
        return False
    if len(head) == 132 and head[128:132] == b"DICM":
        return True
    try:
        ds = pydicom.dcmread(path, stop_before_pixels=True, force=True)
    except Exception:
        return False
    return any(k in ds for k in ("SOPClassUID", "Modality", "Rows"))


def _read_dataset(path) -> pydicom.Dataset:
    try:
        return pydicom.dcmread(path)
    except InvalidDicomError:
        pass
    except Exception as exc:
        raise UnparseableFile(f"{path}: {exc}") from exc
    try:
        ds = pydicom.dcmread(path, force=True)
    except Exception as exc:
        raise UnparseableFile(f"{path}: {exc}") from exc
    if "PixelData" not in ds:
        raise UnparseableFile(f"{path}: not a DICOM image")
    return ds


def _rescale(ds, path) -> np.ndarray:
    try:
        raw = ds.pixel_array
    except Exception as exc:
        raise UnparseableFile(f"{path}: cannot decode pixel data ({exc})") from exc
    if raw.ndim != 2:
        raise UnparseableFile(f"{path}: expected a single-frame image, got shape {raw.shape}")
    slope = ds.get("RescaleSlope")
    intercept = ds.get("RescaleIntercept")
    if slope is None or intercept is None:
        log.warning("%s: RescaleSlope/Intercept missing, assuming 1/0", path)
    slope = 1.0 if slope is None else float(slope)
    intercept = 0.0 if intercept is None else float(intercept)
    return raw.astype(np.float64) * slope + intercept


def _axis_of(cosines, path) -> tuple[int, int]:
    """Patient axis index and sign of a direction-cosine triple."""
    c = np.asarray(cosines, dtype=float)
    axis = int(np.argmax(np.abs(c)))
    if abs(c[axis]) < 0.99:
        raise InconsistentSliceGeometry(f"{path}: oblique image orientation {list(c)}")
    return axis, (1 if c[axis] > 0 else -1)


@dataclass
class _SliceInfo:
    path: str
    ds: pydicom.Dataset
    rows: int
    cols: int
    pixel_spacing: tuple[float, float]
    orientation: tuple[float, ...]
    position: tuple[float, float, float] | None
    instance: int | None = field(default=None)


def _slice_info(path) -> _SliceInfo:
    ds = _read_dataset(path)
    if "PixelSpacing" not in ds:
        raise MissingPixelSpacing(str(path))
    try:
        rows, cols = int(ds.Rows), int(ds.Columns)
    except AttributeError as exc:
        raise UnparseableFile(f"{path}: missing Rows/Columns") from exc
    ps = tuple(float(v) for v in ds.PixelSpacing)
    iop = tuple(float(v) for v in ds.get("ImageOrientationPatient", (1, 0, 0, 0, 1, 0)))
    ipp = ds.get("ImagePositionPatient")
    pos = tuple(float(v) for v in ipp) if ipp is not None else None
    inst = ds.get("InstanceNumber")
    return _SliceInfo(str(path), ds, rows, cols, ps, iop, pos,
                      int(inst) if inst is not None else None)


def _canonical_plane(pixels: np.ndarray, info: _SliceInfo):
    """Reorder a (rows, cols) pixel plane to [x, y] and return (plane, sx, sy, origin_xy)."""
    row_axis, row_sign = _axis_of(info.orientation[:3], info.path)  # moves along columns
    col_axis, col_sign = _axis_of(info.orientation[3:], info.path)  # moves along rows
    if {row_axis, col_axis} != {0, 1}:
        raise InconsistentSliceGeometry(f"{info.path}: only axial acquisitions are supported")
    # PixelSpacing = (spacing between rows, spacing between columns)
    col_step, row_step = info.pixel_spacing[1], info.pixel_spacing[0]
    plane = pixels.T  # [col, row]
    steps = [col_step, row_step]
    signs = [row_sign, col_sign]
    if row_axis == 1:
        plane = plane.T
        steps.reverse()
        signs.reverse()
    origin = list(info.position[:2]) if info.position else [0.0, 0.0]
    for ax in (0, 1):
        if signs[ax] < 0:
            plane = np.flip(plane, axis=ax)
            origin[ax] -= (plane.shape[ax] - 1) * steps[ax]
    return np.ascontiguousarray(plane), steps[0], steps[1], tuple(origin)


def load_axial_dicom(path: str | os.PathLike) -> CTVolume:
    info = _slice_info(path)
    plane, sx, sy, (ox, oy) = _canonical_plane(_rescale(info.ds, path), info)
    sz = float(info.ds.get("SliceThickness") or 1.0)
    oz = info.position[2] if info.position else 0.0
    return CTVolume(plane[:, :, None], (sx, sy, sz if sz > 0 else 1.0), (ox, oy, oz),
                    source_paths=(str(path),))


def load_dicom_series(directory: str | os.PathLike) -> CTVolume:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file())
    infos = []
    for p in files:
        try:
            infos.append(_slice_info(p))
        except UnparseableFile:
            if not is_dicom_file(p):
                continue
            raise
    if not infos:
        raise UnparseableFile(f"{directory}: no DICOM images found")

    ref = infos[0]
    for inf in infos[1:]:
        if (inf.rows, inf.cols) != (ref.rows, ref.cols):
            raise InconsistentSliceGeometry(
                f"{inf.path}: {inf.rows}x{inf.cols} differs from {ref.rows}x{ref.cols}")
        if not np.allclose(inf.pixel_spacing, ref.pixel_spacing, atol=_GEOMETRY_ATOL):
            raise InconsistentSliceGeometry(f"{inf.path}: PixelSpacing differs within series")
        if not np.allclose(inf.orientation, ref.orientation, atol=_GEOMETRY_ATOL):
            raise InconsistentSliceGeometry(f"{inf.path}: mixed image orientations")

    if all(inf.position is not None for inf in infos):
        infos.sort(key=lambda inf: inf.position[2])
        z = np.array([inf.position[2] for inf in infos])
    elif all(inf.instance is not None for inf in infos):
        infos.sort(key=lambda inf: inf.instance)
        step = ref.ds.get("SpacingBetweenSlices") or ref.ds.get("SliceThickness")
        if step is None:
            raise InconsistentSliceGeometry(f"{directory}: no positions and no slice spacing")
        z = float(step) * np.arange(len(infos), dtype=float)
    else:
        raise InconsistentSliceGeometry(f"{directory}: slices carry neither position nor instance number")

    if len(infos) > 1:
        gaps = np.diff(z)
        if np.any(gaps <= 0):
            raise InconsistentSliceGeometry(f"{directory}: duplicate slice positions")
        med = float(np.median(gaps))
        if np.max(np.abs(gaps - med)) > SLICE_GAP_TOLERANCE * med:
            raise NonUniformSliceSpacing(
                f"{directory}: slice gaps range {gaps.min():.3f}-{gaps.max():.3f} mm")
        sz = float((z[-1] - z[0]) / (len(z) - 1))
    else:
        sz = float(ref.ds.get("SliceThickness") or 1.0)

    planes = []
    for inf in infos:
        plane, sx, sy, oxy = _canonical_plane(_rescale(inf.ds, inf.path), inf)
        planes.append(plane)
    voxels = np.stack(planes, axis=-1)
    return CTVolume(voxels, (sx, sy, sz), (oxy[0], oxy[1], float(z[0])),
                    source_paths=tuple(inf.path for inf in infos), z_positions=z)


def discover_series(root: str | os.PathLike, threshold: int = SERIES_FILE_THRESHOLD) -> list[SeriesCandidate]:
    """Directories whose files are all DICOM, in lexicographic path order."""
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(str(root))
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if not filenames:
            continue
        paths = [Path(dirpath) / f for f in sorted(filenames)]
        if all(is_dicom_file(p) for p in paths):
            found.append(SeriesCandidate(Path(dirpath), len(paths), len(paths) > threshold))
    found.sort(key=lambda c: str(c.directory))
    return found


def find_dicom_files(root: str | os.PathLike) -> list[Path]:
    """Every DICOM file at or below ``root``, sorted by path."""
    root = Path(root)
    if root.is_file():
        return [root] if is_dicom_file(root) else []
    if not root.is_dir():
        raise RootNotFound(str(root))
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        out.extend(Path(dirpath) / f for f in sorted(filenames) if is_dicom_file(Path(dirpath) / f))
    return sorted(out)


# ---------------------------------------------------------------------------
# NIfTI
# ---------------------------------------------------------------------------

def _canonical_affine(spacing, origin) -> np.ndarray:
    # canonical index axes point L, P, S; NIfTI world space is RAS
    aff = np.diag([-spacing[0], -spacing[1], spacing[2], 1.0])
    aff[:3, 3] = (-origin[0], -origin[1], origin[2])
    return aff


def save_nifti_mask(mask: SegmentationMask, path: str | os.PathLike) -> Path:
    labels = mask.labels
    dtype = np.uint8 if labels.min() >= 0 and labels.max() < 256 else np.int16
    img = nib.Nifti1Image(labels.astype(dtype), _canonical_affine(mask.spacing, mask.origin))
    img.header.set_xyzt_units("mm")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, path)
    return path


def load_nifti_mask(path: str | os.PathLike, label_map: Mapping[int, str] | None = None) -> SegmentationMask:
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise UnparseableFile(f"{path}: {exc}") from exc
    data = np.asanyarray(img.dataobj)
    if data.dtype.kind not in "iuf" or data.dtype.fields is not None:
        raise UnsupportedDatatype(f"{path}: datatype {data.dtype} is not a label type")
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise UnsupportedDatatype(f"{path}: expected 2D or 3D data, got {data.shape}")
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise UnsupportedDatatype(f"{path}: float data holds non-integer values")
        data = data.astype(np.int32)
    elif data.dtype.itemsize > 4 or data.dtype == np.uint32:
        data = data.astype(np.int64)

    affine = img.affine
    ornt = nib.orientations.io_orientation(affine)
    if np.any(np.isnan(ornt)):
        raise OrientationUnresolvable(f"{path}: affine {affine.tolist()} has no axis mapping")
    target = nib.orientations.axcodes2ornt(CANONICAL_AXCODES)
    xform = nib.orientations.ornt_transform(ornt, target)
    labels = nib.orientations.apply_orientation(data, xform)
    new_affine = affine @ nib.orientations.inv_ornt_aff(xform, data.shape)
    spacing = tuple(float(v) for v in np.sqrt((new_affine[:3, :3] ** 2).sum(axis=0)))
    ras = new_affine[:3, 3]
    origin = (-float(ras[0]), -float(ras[1]), float(ras[2]))

    if label_map is None:
        label_map = {k: str(k) for k in present_labels(labels)}
    return SegmentationMask(np.ascontiguousarray(labels), dict(label_map), spacing, origin)

