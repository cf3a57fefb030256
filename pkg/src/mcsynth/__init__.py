"""Multi-channel cycleGAN pipeline for CBCT to synthetic CT conversion."""

__version__ = "0.1.0"

from .volume_core import (  # noqa: E402
    GeometryRecord,
    HUWindow,
    MultiChannelSlice,
    Volume3D,
    pad_or_crop,
    read_volume,
    undo_pad_or_crop,
    window_denormalize,
    window_normalize,
    write_volume,
)
from .preprocess import (  # noqa: E402
    ChannelWindows,
    HistogramPeakParams,
    MultiChannelPreprocessor,
    PatientCase,
    preprocess_case,
)
from .estimator import MultiChannelCycleGAN  # noqa: E402

__all__ = [
    "ChannelWindows",
    "GeometryRecord",
    "HistogramPeakParams",
    "HUWindow",
    "MultiChannelCycleGAN",
    "MultiChannelPreprocessor",
    "MultiChannelSlice",
    "PatientCase",
    "Volume3D",
    "pad_or_crop",
    "preprocess_case",
    "read_volume",
    "undo_pad_or_crop",
    "window_denormalize",
    "window_normalize",
    "write_volume",
]
