"""CT body composition: spine trabecular HU and muscle / adipose metrics."""
from .spine import LEVELS, RoiSpec, analyze_spine
from .tissue import TISSUES, PostProcessConfig, TissueMetrics, process_slice
from .volume_io import CTVolume, SegmentationMask, discover_series, load_dicom_series, load_nifti_mask

__version__ = "0.1.0"

__all__ = [
    "CTVolume",
    "LEVELS",
    "PostProcessConfig",
    "RoiSpec",
    "SegmentationMask",
    "TISSUES",
    "TissueMetrics",
    "analyze_spine",
    "discover_series",
    "load_dicom_series",
    "load_nifti_mask",
    "process_slice",
]
