"""Semi-automatic 3D segmentation of vertebral bodies in CT-like volumes with
trabecular BMD and volume measurement, validated on a synthetic spine phantom."""

__version__ = "0.1.0"

from .analysis import VoiReport, accuracy_error, precision_cv, study_report, voi_stats
from .constraints import SeedSet
from .phantom import PhantomSpec, default_spec, generate_phantom
from .pipeline import PipelineParams, VertebraResult, segment_all, segment_vertebra
from .volgrid import Calibration, VoxelVolume, load_volume, save_volume

__all__ = [
    "Calibration", "PhantomSpec", "PipelineParams", "SeedSet", "VertebraResult",
    "VoiReport", "VoxelVolume", "accuracy_error", "default_spec",
    "generate_phantom", "load_volume", "precision_cv", "save_volume",
    "segment_all", "segment_vertebra", "study_report", "voi_stats",
    "__version__",
]
