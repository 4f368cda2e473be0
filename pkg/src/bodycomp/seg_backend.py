"""Segmentation providers: precomputed mask files or an ONNX model.

The neural networks themselves are never bundled.  ``mask_files`` looks up
NIfTI masks by series directory name and DICOM stem; ``onnx_runtime`` runs a
user-supplied model described by a small key-value manifest next to it.
"""
from __future__ import annotations

import importlib
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, MaskNotFound, RuntimeUnavailable, ShapeMismatch, UnknownLabel
from .volume_io import CTVolume, SegmentationMask, load_nifti_mask, present_labels

SPINE_3D = "spine_3d"
TISSUE_2D = "tissue_2d"

MASK_FILES = "mask_files"
ONNX_RUNTIME = "onnx_runtime"
PROVIDER_KINDS = (MASK_FILES, ONNX_RUNTIME)

SPINE_MODEL = "totalsegmentator_spine"
STANFORD_MODEL = "stanford_v0.0.1"
ABCT_MODEL = "abct_v0.0.1"

DEFAULT_CLASS_MAPS: dict[str, dict[int, str]] = {
    SPINE_MODEL: {1: "T12", 2: "L1", 3: "L2", 4: "L3", 5: "L4", 6: "L5"},
    STANFORD_MODEL: {1: "muscle", 2: "bone", 3: "vat", 4: "sat"},
    ABCT_MODEL: {1: "muscle", 2: "imat", 3: "vat", 4: "sat"},
}


@dataclass(frozen=True)
class SegmentationRequest:
    target: str
    volume: CTVolume
    model_id: str

    def __post_init__(self):
        if self.target not in (SPINE_3D, TISSUE_2D):
            raise ValueError(f"unknown target {self.target!r}")
        nz = self.volume.shape[2]
        if self.target == SPINE_3D and nz < 2:
            raise ValueError("spine_3d needs a volume with at least 2 slices")
        if self.target == TISSUE_2D and nz != 1:
            raise ValueError("tissue_2d needs a single axial slice")


@dataclass
class ProviderConfig:
    kind: str = MASK_FILES
    mask_root: Path | None = None
    model_path: Path | None = None
    # model_id -> {label id -> semantic name}; falls back to DEFAULT_CLASS_MAPS
    class_map: dict[str, dict[int, str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.kind == MASK_FILES:
            if self.mask_root is None or self.model_path is not None:
                raise ConfigError("mask_files provider takes mask_root and no model_path")
            self.mask_root = Path(self.mask_root)
        else:
            if self.model_path is None or self.mask_root is not None:
                raise ConfigError("onnx_runtime provider takes model_path and no mask_root")
            self.model_path = Path(self.model_path)

    def class_map_for(self, model_id: str) -> dict[int, str]:
        if model_id in self.class_map:
            return dict(self.class_map[model_id])
        if model_id in DEFAULT_CLASS_MAPS:
            return dict(DEFAULT_CLASS_MAPS[model_id])
        raise ConfigError(f"no class map for model {model_id!r}")


@dataclass(frozen=True)
class ProviderStatus:
    kind: str
    ready: bool
    reason: str = ""


def apply_class_map(labels: np.ndarray, class_map: dict[int, str]) -> dict[int, str]:
    """Validate that every present label has a distinct semantic name."""
    present = present_labels(labels)
    unknown = [k for k in present if k not in class_map]
    if unknown:
        raise UnknownLabel(f"labels {unknown} not in class map {sorted(class_map)}")
    names = [class_map[k] for k in present]
    if len(set(names)) != len(names):
        raise UnknownLabel(f"class map is not one-to-one on present labels: {names}")
    return dict(class_map)


def _aligned(labels: np.ndarray, req: SegmentationRequest, class_map) -> SegmentationMask:
    vol = req.volume
    if labels.shape != vol.shape:
        raise ShapeMismatch(f"mask {labels.shape} vs volume {vol.shape}")
    label_map = apply_class_map(labels, class_map)
    return SegmentationMask(labels, label_map, vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# mask_files
# ---------------------------------------------------------------------------

def mask_path_for(req: SegmentationRequest, mask_root: Path) -> Path:
    if not req.volume.source_paths:
        raise MaskNotFound("volume has no source files to key a mask lookup")
    first = Path(req.volume.source_paths[0])
    series = first.parent.name
    if req.target == SPINE_3D:
        return Path(mask_root) / series / "spine.nii.gz"
    return Path(mask_root) / series / f"{first.stem}_tissue.nii.gz"


def _segment_mask_files(req: SegmentationRequest, cfg: ProviderConfig) -> SegmentationMask:
    path = mask_path_for(req, cfg.mask_root)
    if not path.is_file():
        raise MaskNotFound(str(path))
    loaded = load_nifti_mask(path)
    return _aligned(loaded.labels, req, cfg.class_map_for(req.model_id))


# ---------------------------------------------------------------------------
# onnx_runtime
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelManifest:
    input_size: tuple[int, int]
    hu_window: tuple[float, float]
    channels: tuple[str, ...]
    layout: str = "NCHW"

    def class_map(self) -> dict[int, str]:
        return {i: c for i, c in enumerate(self.channels) if i and c != "background"}


def manifest_path(model_path: Path) -> Path:
    return Path(model_path).with_suffix(".manifest")


def read_manifest(path: str | Path) -> ModelManifest:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: malformed line {raw!r}")
        values[key.strip()] = val.strip()
    try:
        size = tuple(int(v) for v in values["input_size"].split(","))
        window = tuple(float(v) for v in values["hu_window"].split(","))
        channels = tuple(c.strip() for c in values["channels"].split(","))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    layout = values.get("layout", "NCHW").upper()
    if len(size) != 2 or len(window) != 2 or window[0] >= window[1] or layout not in ("NCHW", "NHWC"):
        raise ConfigError(f"{path}: invalid manifest values")
    return ModelManifest(size, window, channels, layout)


def _import_runtime():
    try:
        return importlib.import_module("onnxruntime")
    except ImportError as exc:
        raise RuntimeUnavailable("onnxruntime is not installed") from exc


class _OnnxModel:
    def __init__(self, model_path: Path):
        rt = _import_runtime()
        if not model_path.is_file():
            raise RuntimeUnavailable(f"model file missing: {model_path}")
        mpath = manifest_path(model_path)
        if not mpath.is_file():
            raise RuntimeUnavailable(f"model manifest missing: {mpath}")
        self.manifest = read_manifest(mpath)
        try:
            self.session = rt.InferenceSession(str(model_path), providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise RuntimeUnavailable(f"cannot load {model_path}: {exc}") from exc
        self.input_name = self.session.get_inputs()[0].name
        self.lock = threading.Lock()

    def predict_plane(self, plane: np.ndarray) -> np.ndarray:
        """Label map for one axial [x, y] HU plane."""
        m = self.manifest
        image = plane.T  # model sees rows = y, cols = x
        h, w = m.input_size
        zoomed = ndimage.zoom(image, (h / image.shape[0], w / image.shape[1]), order=1)
        lo, hi = m.hu_window
        x = ((np.clip(zoomed, lo, hi) - lo) / (hi - lo)).astype(np.float32)
        x = x[None, None] if m.layout == "NCHW" else x[None, :, :, None]
        with self.lock:
            (out,) = self.session.run(None, {self.input_name: x})[:1]
        out = np.asarray(out)[0]
        if m.layout == "NHWC":
            out = np.moveaxis(out, -1, 0)
        lab = np.argmax(out, axis=0).astype(np.int16)
        # nearest-neighbour back to the native grid
        rows = np.minimum((np.arange(image.shape[0]) * h / image.shape[0]).astype(int), h - 1)
        cols = np.minimum((np.arange(image.shape[1]) * w / image.shape[1]).astype(int), w - 1)
        return lab[np.ix_(rows, cols)].T


_sessions: dict[Path, _OnnxModel] = {}
_sessions_lock = threading.Lock()


def _model_for(path: Path) -> _OnnxModel:
    key = Path(path).resolve()
    with _sessions_lock:
        if key not in _sessions:
            _sessions[key] = _OnnxModel(key)
        return _sessions[key]


def _segment_onnx(req: SegmentationRequest, cfg: ProviderConfig) -> SegmentationMask:
    model = _model_for(cfg.model_path)
    vox = req.volume.voxels
    labels = np.stack([model.predict_plane(vox[:, :, k]) for k in range(vox.shape[2])], axis=-1)
    if req.model_id in cfg.class_map:
        class_map = cfg.class_map_for(req.model_id)
    else:
        class_map = model.manifest.class_map()
    return _aligned(labels, req, class_map)


def segment(req: SegmentationRequest, cfg: ProviderConfig) -> SegmentationMask:
    if cfg.kind == MASK_FILES:
        return _segment_mask_files(req, cfg)
    return _segment_onnx(req, cfg)


def available_providers(cfg: ProviderConfig | None = None) -> list[ProviderStatus]:
    statuses = [ProviderStatus(MASK_FILES, True)]
    try:
        _import_runtime()
    except RuntimeUnavailable as exc:
        statuses.append(ProviderStatus(ONNX_RUNTIME, False, str(exc)))
        return statuses
    if cfg is None or cfg.model_path is None:
        statuses.append(ProviderStatus(ONNX_RUNTIME, False, "no model_path configured"))
        return statuses
    try:
        _model_for(cfg.model_path)
    except RuntimeUnavailable as exc:
        statuses.append(ProviderStatus(ONNX_RUNTIME, False, str(exc)))
    else:
        statuses.append(ProviderStatus(ONNX_RUNTIME, True))
    return statuses
