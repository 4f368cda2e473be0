"""End-to-end runs: discovery, per-series isolation, output tree, CSV/H5/PNG."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import h5py
import numpy as np

from . import render
from .errors import BodyCompError, ConfigError
from .seg_backend import (
    SPINE_3D,
    SPINE_MODEL,
    STANFORD_MODEL,
    TISSUE_2D,
    ProviderConfig,
    SegmentationRequest,
    segment,
)
from .spine import RoiSpec, SpineLevelResult, analyze_spine
from .tissue import TISSUES, PostProcessConfig, TissueMetrics, process_slice
from .volume_io import (
    SERIES_FILE_THRESHOLD,
    SegmentationMask,
    discover_series,
    find_dicom_files,
    load_axial_dicom,
    load_dicom_series,
    save_nifti_mask,
)

RUN_DIR_FORMAT = "%Y-%m-%d_%H-%M-%S"
SUBDIRS = ("images", "segmentations", "metrics")
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"

OK, OK_WITH_WARNINGS, FAILED, SKIPPED = "ok", "ok_with_warnings", "failed", "skipped"

TISSUE_COLUMNS = [f"{t}_{c}" for t in TISSUES for c in ("area_cm2", "mean_hu")]
CSV_HEADER_3D = ["level", "dicom_path", "spine_roi_hu", *TISSUE_COLUMNS]
CSV_HEADER_2D = ["file", "dicom_path", *TISSUE_COLUMNS]


class PipelineError(BodyCompError):
    pass


def default_output_root() -> Path:
    return Path(os.environ.get("C2C_OUTPUT_ROOT", "outputs"))


def default_mask_root(input_path: Path) -> Path:
    base = input_path if input_path.is_dir() else input_path.parent
    return base / "masks"


@dataclass
class RunConfig:
    mode: str
    input_path: Path
    provider: ProviderConfig | None = None
    output_root: Path | None = None
    roi_spec: RoiSpec = field(default_factory=RoiSpec)
    post: PostProcessConfig = field(default_factory=PostProcessConfig)
    workers: int = 1
    tissue_model: str = STANFORD_MODEL
    spine_model: str = SPINE_MODEL
    save_images: bool = True
    series_threshold: int = SERIES_FILE_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("process_3d", "process_2d"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.input_path = Path(self.input_path).absolute()
        if not self.input_path.exists():
            raise ConfigError(f"input path does not exist: {self.input_path}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.output_root = Path(self.output_root) if self.output_root else default_output_root()
        if self.provider is None:
            self.provider = ProviderConfig(mask_root=default_mask_root(self.input_path))


@dataclass
class SeriesRecord:
    source: str
    name: str
    status: str
    reason: str = ""
    warnings: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)


@dataclass
class RunManifest:
    run_dir: Path
    mode: str
    records: list[SeriesRecord] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if any(r.status == FAILED for r in self.records):
            return 1
        if not any(r.status in (OK, OK_WITH_WARNINGS) for r in self.records):
            return 1
        return 0

    def statuses(self) -> list[str]:
        return [r.status for r in self.records]

    def write(self) -> Path:
        path = self.run_dir / MANIFEST_FILE
        doc = {"run_dir": self.run_dir.name, "mode": self.mode,
               "records": [asdict(r) for r in self.records]}
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path


def make_run_dir(output_root: Path, now: _dt.datetime | None = None) -> Path:
    """Create ``<root>/<Y>-<m>-<d>_<H>-<M>-<S>``, suffixing ``-2``, ``-3``... on collision."""
    now = now or _dt.datetime.now()
    stem = now.strftime(RUN_DIR_FORMAT)
    try:
        output_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output root {output_root}: {exc}") from exc
    n = 1
    while True:
        candidate = output_root / (stem if n == 1 else f"{stem}-{n}")
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1


def _unique_names(names: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for name in names:
        k = seen.get(name, 0) + 1
        seen[name] = k
        out.append(name if k == 1 else f"{name}-{k}")
    return out


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _metric_cells(metrics: Sequence[TissueMetrics] | None) -> list:
    by = {m.tissue: m for m in metrics or ()}
    cells = []
    for t in TISSUES:
        m = by.get(t)
        if m is None or m.pixel_count == 0:
            cells += ["", ""]
        else:
            cells += [m.area_cm2, m.mean_hu]
    return cells


def write_metrics_csv_3d(path: Path, results: Sequence[SpineLevelResult],
                         tissue: Mapping[str, Sequence[TissueMetrics]]) -> Path:
    """One row per analyzed level; empty cells for absent tissues."""
    if not results:
        raise PipelineError("no level results to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER_3D)
        for r in results:
            w.writerow([r.level, r.si_center_path or "", r.hu_statistic, *_metric_cells(tissue.get(r.level))])
    return path


def write_metrics_csv_2d(path: Path, rows: Sequence[tuple[str, str, Sequence[TissueMetrics]]]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER_2D)
        for name, dicom_path, metrics in rows:
            w.writerow([name, dicom_path, *_metric_cells(metrics)])
    return path


def write_tissue_h5(path: Path, masks: Mapping[str, np.ndarray], model_id: str) -> Path:
    with h5py.File(path, "w") as f:
        g = f.create_group(model_id)
        for t in sorted(masks):
            g.create_dataset(t, data=np.asarray(masks[t], dtype=np.uint8))
    return path


def read_tissue_h5(path: Path, model_id: str | None = None) -> dict[str, np.ndarray]:
    with h5py.File(path, "r") as f:
        group = f[model_id] if model_id else f[next(iter(f.keys()))]
        return {k: group[k][()].astype(bool) for k in group.keys()}


def write_segmentations(seg_dir: Path, spine_mask: SegmentationMask | None,
                        per_level: Mapping[str, Mapping[str, np.ndarray]], model_id: str) -> list[Path]:
    out = []
    if spine_mask is not None:
        out.append(save_nifti_mask(spine_mask, seg_dir / "spine.nii.gz"))
    for level, masks in per_level.items():
        out.append(write_tissue_h5(seg_dir / f"{level}_seg.h5", masks, model_id))
    return out


# ---------------------------------------------------------------------------
# per-unit work
# ---------------------------------------------------------------------------

def _analyze_axial(path: str | Path, cfg: RunConfig):
    axial = load_axial_dicom(path)
    tmask = segment(SegmentationRequest(TISSUE_2D, axial, cfg.tissue_model), cfg.provider)
    raw = {t: tmask.binary(t)[:, :, 0] for t in TISSUES if tmask.ids_for(t)}
    native = "imat" in tmask.label_map.values()
    hu = axial.voxels[:, :, 0]
    final, metrics = process_slice(hu, raw, cfg.post, axial.spacing[:2], native)
    return hu, final, metrics


def _make_dirs(out_dir: Path) -> dict[str, Path]:
    dirs = {d: out_dir / d for d in SUBDIRS}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def process_series_3d(series_dir: Path, out_dir: Path, cfg: RunConfig) -> tuple[list[Path], list[str]]:
    vol = load_dicom_series(series_dir)
    spine_mask = segment(SegmentationRequest(SPINE_3D, vol, cfg.spine_model), cfg.provider)
    analysis = analyze_spine(vol, spine_mask, cfg.roi_spec)
    warnings = [f"{s.level} skipped: {s.reason}" for s in analysis.skipped]
    if not analysis.results:
        raise PipelineError("no vertebral level could be analyzed; " + "; ".join(warnings))

    dirs = _make_dirs(out_dir)
    files: list[Path] = []
    tissue_metrics: dict[str, list[TissueMetrics]] = {}
    tissue_masks: dict[str, dict[str, np.ndarray]] = {}
    for res in analysis.results:
        try:
            hu, final, metrics = _analyze_axial(res.si_center_path, cfg)
        except BodyCompError as exc:
            warnings.append(f"{res.level} tissue analysis failed: {type(exc).__name__}: {exc}")
            continue
        tissue_metrics[res.level] = metrics
        tissue_masks[res.level] = final
        if cfg.save_images:
            img = render.render_axial_overlay(hu, final, metrics, res.level)
            files.append(render.save_png(img, dirs["images"] / f"{res.level}_seg.png"))

    files += write_segmentations(dirs["segmentations"], spine_mask, tissue_masks, cfg.tissue_model)
    files.append(write_metrics_csv_3d(dirs["metrics"] / METRICS_FILE, analysis.results, tissue_metrics))

    if cfg.save_images and len(analysis.results) >= 2:
        path = render.build_cpr_path(render.cpr_centers(analysis.results), vol.shape[2])
        for plane in ("coronal", "sagittal"):
            try:
                img = render.render_cpr(vol, path, analysis.results, spine_mask, plane=plane,
                                        roi_shape=cfg.roi_spec.shape,
                                        roi_diameter_mm=cfg.roi_spec.diameter_mm)
            except BodyCompError as exc:
                warnings.append(f"{plane} CPR skipped: {exc}")
                continue
            files.append(render.save_png(img, dirs["images"] / f"spine_{plane}.png"))
    return files, warnings


def _record(source, name, run_dir, fn) -> SeriesRecord:
    try:
        files, warnings = fn()
    except Exception as exc:
        print(f"[c2c] {source} failed:", file=sys.stderr)
        traceback.print_exc()
        return SeriesRecord(str(source), name, FAILED, f"{type(exc).__name__}: {exc}")
    rel = sorted(str(Path(f).relative_to(run_dir)) for f in files)
    status = OK_WITH_WARNINGS if warnings else OK
    return SeriesRecord(str(source), name, status, warnings=list(warnings), files=rel)


def _run_jobs(jobs, workers: int) -> list[SeriesRecord]:
    if workers == 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def run_pipeline_3d(cfg: RunConfig, now: _dt.datetime | None = None) -> RunManifest:
    candidates = discover_series(cfg.input_path, cfg.series_threshold)
    run_dir = make_run_dir(cfg.output_root, now)
    manifest = RunManifest(run_dir, "process_3d")
    names = _unique_names([c.directory.name for c in candidates])
    jobs = []
    for cand, name in zip(candidates, names):
        if not cand.is_3d_eligible:
            reason = f"{cand.file_count} DICOM files, need more than {cfg.series_threshold}"
            jobs.append(lambda c=cand, n=name, r=reason: SeriesRecord(str(c.directory), n, SKIPPED, r))
            continue
        out_dir = run_dir / name
        jobs.append(lambda c=cand, n=name, o=out_dir: _record(
            c.directory, n, run_dir, lambda: process_series_3d(c.directory, o, cfg)))
    manifest.records = _run_jobs(jobs, cfg.workers)
    manifest.write()
    return manifest


def run_pipeline_2d(cfg: RunConfig, now: _dt.datetime | None = None) -> RunManifest:
    files = find_dicom_files(cfg.input_path)
    run_dir = make_run_dir(cfg.output_root, now)
    manifest = RunManifest(run_dir, "process_2d")
    out_dir = run_dir / cfg.input_path.name
    dirs = _make_dirs(out_dir)
    stems = _unique_names([f.stem for f in files])
    results: dict[str, list[TissueMetrics]] = {}

    def work(path: Path, stem: str):
        hu, final, metrics = _analyze_axial(path, cfg)
        out = [write_tissue_h5(dirs["segmentations"] / f"{stem}.h5", final, cfg.tissue_model)]
        if cfg.save_images:
            img = render.render_axial_overlay(hu, final, metrics)
            out.append(render.save_png(img, dirs["images"] / f"{stem}.png"))
        results[stem] = metrics
        return out, []

    jobs = [lambda p=p, s=s: _record(p, s, run_dir, lambda: work(p, s)) for p, s in zip(files, stems)]
    manifest.records = _run_jobs(jobs, cfg.workers)
    rows = [(s, str(p), results[s]) for p, s in zip(files, stems) if s in results]
    csv_path = write_metrics_csv_2d(dirs["metrics"] / METRICS_FILE, rows)
    rel = str(csv_path.relative_to(run_dir))
    for rec in manifest.records:
        if rec.status in (OK, OK_WITH_WARNINGS):
            rec.files.append(rel)
    manifest.write()
    return manifest


def run(cfg: RunConfig, now: _dt.datetime | None = None) -> RunManifest:
    if cfg.mode == "process_3d":
        return run_pipeline_3d(cfg, now)
    return run_pipeline_2d(cfg, now)

