"""CBCT/CT preprocessing: mask and range repair, overflow removal, three-window channels.

Pipeline order per case: mask regeneration (training only) -> CBCT range
correction -> overflow correction (pelvis) -> mask application -> channel
windowing -> axial slice extraction with pad/crop.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator, TransformerMixin

from .volume_core import (
    AIR_HU,
    DENSE_WINDOW,
    FULL_WINDOW,
    MAX_HU,
    GeometryRecord,
    HUWindow,
    MultiChannelSlice,
    Volume3D,
    pad_or_crop,
    read_volume,
    window_normalize,
    write_volume,
)

logger = logging.getLogger(__name__)

REGIONS = ("brain", "pelvis")
SOFT_HALFWIDTH = {"brain": 100.0, "pelvis": 150.0}
SLICE_SHAPE = {"brain": (304, 304), "pelvis": (448, 448)}

MASK_THRESHOLD_HU = -500.0
MASK_DILATE_RADIUS = 2
MASK_CLOSE_RADIUS = 5
RANGE_SHIFT_PERCENTILE = 1.0
RANGE_SHIFT_TRIGGER_HU = -500.0
OVERFLOW_HULL_MM = 40.0
OVERFLOW_MIN_HU = 1000.0


class EmptyMaskError(ValueError):
    """The input contains no anatomy above threshold, or a mask is empty."""


class PeakNotFoundWarning(UserWarning):
    pass


def check_region(region: str) -> str:
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    return region


@dataclass
class PatientCase:
    cbct: Volume3D
    mask: Volume3D
    region: str
    case_id: str
    ct: Optional[Volume3D] = None

    def __post_init__(self):
        check_region(self.region)
        for name in ("ct", "mask"):
            vol = getattr(self, name)
            if vol is not None and not vol.same_grid(self.cbct):
                raise ValueError(f"{self.case_id}: {name} grid differs from cbct grid")
        values = np.unique(self.mask.data)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError(f"{self.case_id}: mask is not binary (values {values[:5]})")


@dataclass
class ChannelWindows:
    """The three windows used to build one modality's channels for one patient."""

    soft_level: float
    soft_halfwidth: float
    full: HUWindow = FULL_WINDOW
    dense: HUWindow = DENSE_WINDOW
    peak_found: bool = True

    @property
    def soft(self) -> HUWindow:
        return HUWindow(self.soft_level - self.soft_halfwidth, self.soft_level + self.soft_halfwidth)

    def as_tuple(self) -> Tuple[HUWindow, HUWindow, HUWindow]:
        return self.full, self.soft, self.dense

    @classmethod
    def for_region(cls, region: str, soft_level: float = 0.0, peak_found: bool = True):
        return cls(float(soft_level), SOFT_HALFWIDTH[check_region(region)], peak_found=peak_found)

    def to_dict(self):
        return {
            "full": self.full.to_dict(),
            "soft": self.soft.to_dict(),
            "dense": self.dense.to_dict(),
            "soft_level": self.soft_level,
            "soft_halfwidth": self.soft_halfwidth,
            "peak_found": self.peak_found,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            soft_level=float(d["soft_level"]),
            soft_halfwidth=float(d["soft_halfwidth"]),
            full=HUWindow(**d["full"]),
            dense=HUWindow(**d["dense"]),
            peak_found=bool(d.get("peak_found", True)),
        )


@dataclass(frozen=True)
class HistogramPeakParams:
    search_lo: float = -300.0
    search_hi: float = 300.0
    bin_width: float = 4.0
    smooth_radius: int = 2
    min_prominence: float = 0.05

    def __post_init__(self):
        if not self.search_lo < self.search_hi:
            raise ValueError("search_lo must be below search_hi")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.smooth_radius < 0:
            raise ValueError("smooth_radius must be non-negative")
        if not 0 < self.min_prominence < 1:
            raise ValueError("min_prominence must lie in (0, 1)")


def ball(radius: int) -> np.ndarray:
    """Voxel-index ball {o : |o|^2 <= r^2} as a boolean structuring element."""
    r = int(radius)
    z, y, x = np.mgrid[-r: r + 1, -r: r + 1, -r: r + 1]
    return (z * z + y * y + x * x) <= r * r


def _require_mask(mask: Volume3D) -> np.ndarray:
    m = np.asarray(mask.data) > 0
    if not m.any():
        raise EmptyMaskError("mask is empty")
    return m


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest face-connected component; ties resolved by raster order of first voxel."""
    labels, n = ndimage.label(binary)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def regenerate_mask(
    ct: Volume3D,
    threshold: float = MASK_THRESHOLD_HU,
    dilate_radius: int = MASK_DILATE_RADIUS,
    close_radius: int = MASK_CLOSE_RADIUS,
) -> Volume3D:
    """Rebuild a body mask from a CT by threshold, dilation, closing and hole filling.

    Closing treats space beyond the volume as background but is computed on a
    padded grid so it never erodes anatomy touching the volume edge.
    """
    data = np.asarray(ct.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("ct contains non-finite values")
    body = data > threshold
    if not body.any():
        raise EmptyMaskError(f"no voxel above {threshold} HU; input is not anatomical")
    if dilate_radius > 0:
        body = ndimage.binary_dilation(body, structure=ball(dilate_radius))
    if close_radius > 0:
        r = close_radius
        padded = np.pad(body, r, mode="constant")
        padded = ndimage.binary_closing(padded, structure=ball(r))
        body = padded[r:-r, r:-r, r:-r]
    for z in range(body.shape[0]):
        body[z] = ndimage.binary_fill_holes(body[z])
    body = largest_component(body)
    return ct.with_data(body.astype(np.float32))


def correct_cbct_range(cbct: Volume3D) -> Volume3D:
    """Undo a +1024 storage offset (detected via the 1st percentile) and clip to [-1024, 3000]."""
    data = np.asarray(cbct.data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise ValueError("cbct contains non-finite values")
    if np.percentile(data, RANGE_SHIFT_PERCENTILE) > RANGE_SHIFT_TRIGGER_HU:
        logger.info("cbct range offset detected, shifting by -1024 HU")
        data = data - np.float32(1024.0)
    return cbct.with_data(np.clip(data, AIR_HU, MAX_HU).astype(np.float32))


def depth_below_surface(mask: Volume3D) -> np.ndarray:
    """Spacing-aware distance (mm) from each in-mask voxel to the nearest out-of-mask voxel.

    Out-of-mask voxels get 0; a mask with no background voxel gets +inf inside.
    """
    m = _require_mask(mask)
    if m.all():
        return np.full(m.shape, np.inf)
    return ndimage.distance_transform_edt(m, sampling=mask.spacing)


def overflow_hull(mask: Volume3D, hull_mm: float = OVERFLOW_HULL_MM) -> np.ndarray:
    m = _require_mask(mask)
    return ~m | (depth_below_surface(mask) <= hull_mm)


def overflow_correct(
    cbct: Volume3D,
    mask: Volume3D,
    hull_mm: float = OVERFLOW_HULL_MM,
    min_hu: float = OVERFLOW_MIN_HU,
) -> Volume3D:
    """Overwrite bright voxels in the surface hull with air."""
    if not cbct.same_grid(mask):
        raise ValueError("cbct and mask grids differ")
    hull = overflow_hull(mask, hull_mm)
    data = np.array(cbct.data, dtype=np.float32, copy=True)
    hit = hull & (data > min_hu)
    if hit.any():
        logger.info("overflow correction replaced %d voxels", int(hit.sum()))
    data[hit] = AIR_HU
    return cbct.with_data(data)


def soft_tissue_histogram(values: np.ndarray, params: HistogramPeakParams):
    """Box-smoothed histogram of ``values`` over the search range.

    Returns (bin_centers, raw_counts, smoothed_counts).
    """
    n_bins = int(round((params.search_hi - params.search_lo) / params.bin_width))
    v = np.asarray(values, dtype=np.float64).ravel()
    idx = np.floor((v - params.search_lo) / params.bin_width)
    idx = idx[(idx >= 0) & (idx < n_bins)].astype(np.int64)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    width = 2 * params.smooth_radius + 1
    smoothed = np.convolve(counts, np.ones(width) / width, mode="same")
    centers = params.search_lo + (np.arange(n_bins) + 0.5) * params.bin_width
    return centers, counts, smoothed


def locate_soft_tissue_peak(values: np.ndarray, params: HistogramPeakParams) -> Tuple[float, bool]:
    """Centre of the most prominent histogram peak, or (0.0, False) if none qualifies."""
    centers, _, smoothed = soft_tissue_histogram(values, params)
    top = smoothed.max() if smoothed.size else 0.0
    if top <= 0:
        return 0.0, False
    peaks, props = find_peaks(smoothed, prominence=params.min_prominence * top)
    if peaks.size == 0:
        return 0.0, False
    prominences = props["prominences"]
    # argmax returns the first (lowest HU) among equal prominences
    best = peaks[int(np.argmax(prominences))]
    return float(centers[best]), True


def find_soft_tissue_level(
    cbct: Volume3D, mask: Volume3D, params: Optional[HistogramPeakParams] = None
) -> float:
    """Per-patient soft-tissue window level from the in-mask intensity histogram.

    Falls back to 0 HU (the calibrated water peak) with a
    :class:`PeakNotFoundWarning` when no peak clears the prominence bar.
    """
    params = params or HistogramPeakParams()
    m = _require_mask(mask)
    level, found = locate_soft_tissue_peak(np.asarray(cbct.data)[m], params)
    if not found:
        warnings.warn("no soft-tissue peak found, falling back to 0 HU", PeakNotFoundWarning)
    return level


def _peak_windows(cbct, mask, region, params) -> ChannelWindows:
    params = params or HistogramPeakParams()
    m = _require_mask(mask)
    level, found = locate_soft_tissue_peak(np.asarray(cbct.data)[m], params)
    if not found:
        warnings.warn("no soft-tissue peak found, falling back to 0 HU", PeakNotFoundWarning)
    return ChannelWindows.for_region(region, level, peak_found=found)


def apply_mask(vol: Volume3D, mask: Volume3D) -> Volume3D:
    m = _require_mask(mask)
    data = np.where(m, vol.data, np.float32(AIR_HU)).astype(np.float32)
    return vol.with_data(data)


def build_channels(
    vol: Volume3D,
    mask: Volume3D,
    region: str,
    modality: str,
    params: Optional[HistogramPeakParams] = None,
    windows: Optional[ChannelWindows] = None,
) -> Tuple[np.ndarray, ChannelWindows]:
    """Mask a volume and window it into three [0, 1] channels.

    Returns an array of shape (3, nz, ny, nx) and the windows used. The CT soft
    window is centred on 0 HU; the CBCT one on its detected histogram peak.
    """
    check_region(region)
    if modality not in ("ct", "cbct"):
        raise ValueError(f"modality must be 'ct' or 'cbct', got {modality!r}")
    if windows is None:
        if modality == "ct":
            windows = ChannelWindows.for_region(region, 0.0)
        else:
            windows = _peak_windows(vol, mask, region, params)
    masked = apply_mask(vol, mask).data
    channels = np.stack([window_normalize(masked, w) for w in windows.as_tuple()])
    return channels, windows


@dataclass
class PreprocessedCase:
    case_id: str
    region: str
    cbct_channels: np.ndarray
    cbct_windows: ChannelWindows
    mask: Volume3D
    cbct_hu: Volume3D
    ct_channels: Optional[np.ndarray] = None
    ct_windows: Optional[ChannelWindows] = None
    ct_hu: Optional[Volume3D] = None

    @property
    def spacing(self):
        return self.mask.spacing


def preprocess_case(
    case: PatientCase,
    regenerate: bool = True,
    params: Optional[HistogramPeakParams] = None,
    overflow: Optional[bool] = None,
) -> PreprocessedCase:
    """Run the full per-case pipeline up to (but excluding) pad/crop.

    ``regenerate`` rebuilds the mask from the CT (training only; ignored
    without a CT). ``overflow`` defaults to pelvis-only.
    """
    region = case.region
    mask = case.mask
    if regenerate and case.ct is not None:
        mask = regenerate_mask(case.ct)
    cbct = correct_cbct_range(case.cbct)
    if overflow if overflow is not None else region == "pelvis":
        cbct = overflow_correct(cbct, mask)
    cbct_channels, cbct_windows = build_channels(cbct, mask, region, "cbct", params)
    out = PreprocessedCase(
        case_id=case.case_id,
        region=region,
        cbct_channels=cbct_channels,
        cbct_windows=cbct_windows,
        mask=mask,
        cbct_hu=apply_mask(cbct, mask),
    )
    if case.ct is not None:
        ct = case.ct.with_data(np.clip(case.ct.data, AIR_HU, MAX_HU).astype(np.float32))
        out.ct_channels, out.ct_windows = build_channels(ct, mask, region, "ct")
        out.ct_hu = apply_mask(ct, mask)
    return out


def _slices_of(channels: np.ndarray, target, windows) -> List[MultiChannelSlice]:
    out = []
    for z in range(channels.shape[1]):
        resized = []
        record = None
        for c in range(3):
            arr, record = pad_or_crop(channels[c, z], target, fill=0.0)
            resized.append(arr)
        out.append(MultiChannelSlice(np.stack(resized), record, windows))
    return out


def assemble_training_slices(
    case, region: Optional[str] = None, target_shape=None, **preprocess_kwargs
) -> List[Tuple[MultiChannelSlice, Optional[MultiChannelSlice]]]:
    """Axial (cbct, ct) slice pairs, padded/cropped to the region's slice size.

    ``case`` is a :class:`PatientCase` (preprocessed here) or an already
    :class:`PreprocessedCase`. The ct element is None for CBCT-only cases.
    """
    if isinstance(case, PatientCase):
        case = preprocess_case(case, **preprocess_kwargs)
    region = check_region(region or case.region)
    target = tuple(target_shape) if target_shape is not None else SLICE_SHAPE[region]
    cbct_slices = _slices_of(case.cbct_channels, target, case.cbct_windows)
    if case.ct_channels is None:
        return [(s, None) for s in cbct_slices]
    ct_slices = _slices_of(case.ct_channels, target, case.ct_windows)
    return list(zip(cbct_slices, ct_slices))


# -- dataset layout ---------------------------------------------------------


def save_case(case: PatientCase, root) -> Path:
    case_dir = Path(root) / case.region / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_volume(case.cbct, case_dir / "cbct")
    write_volume(case.mask, case_dir / "mask", dtype="i16")
    if case.ct is not None:
        write_volume(case.ct, case_dir / "ct")
    return case_dir


def load_case(case_dir, region: Optional[str] = None) -> PatientCase:
    case_dir = Path(case_dir)
    region = region or case_dir.parent.name
    ct_path = case_dir / "ct.json"
    return PatientCase(
        cbct=read_volume(case_dir / "cbct"),
        mask=read_volume(case_dir / "mask"),
        ct=read_volume(ct_path) if ct_path.exists() else None,
        region=region,
        case_id=case_dir.name,
    )


def load_dataset(root, region: str) -> List[PatientCase]:
    region_dir = Path(root) / check_region(region)
    if not region_dir.is_dir():
        raise FileNotFoundError(f"no {region} cases under {root}")
    dirs = sorted(p for p in region_dir.iterdir() if (p / "cbct.json").exists())
    return [load_case(d, region) for d in dirs]


def write_preprocessed(case: PreprocessedCase, out_dir, target_shape=None) -> dict:
    """Write per-slice (3, ny, nx) SVF stacks for one case; returns its manifest entry."""
    case_dir = Path(out_dir) / case.case_id
    pairs = assemble_training_slices(case, target_shape=target_shape)
    spacing = (1.0,) + tuple(case.spacing[1:])
    geometry = []
    for z, (cb, ct) in enumerate(pairs):
        write_volume(Volume3D(cb.channels, spacing), case_dir / "cbct" / f"slice_{z:04d}")
        if ct is not None:
            write_volume(Volume3D(ct.channels, spacing), case_dir / "ct" / f"slice_{z:04d}")
        geometry.append(cb.geometry.to_dict())
    write_volume(case.mask, case_dir / "mask", dtype="i16")
    return {
        "case_id": case.case_id,
        "region": case.region,
        "n_slices": len(pairs),
        "spacing_mm": list(case.spacing),
        "cbct_windows": case.cbct_windows.to_dict(),
        "ct_windows": case.ct_windows.to_dict() if case.ct_windows else None,
        "geometry": geometry,
    }


class MultiChannelPreprocessor(TransformerMixin, BaseEstimator):
    """Turn patient cases into stacked three-channel slice arrays.

    Stateless: ``fit`` only validates parameters. ``transform`` returns a
    list with one entry per case, each a tuple ``(cbct, ct)`` of arrays
    shaped (nz, 3, ny, nx); ``ct`` is None for CBCT-only cases.

    Parameters
    ----------
    region : {"brain", "pelvis"}
    target_shape : tuple of int, optional
        Axial slice size; defaults to 304x304 (brain) or 448x448 (pelvis).
    regenerate_masks : bool
        Rebuild masks from the CT (training-time correction).
    peak_params : HistogramPeakParams, optional
    """

    def __init__(self, region="brain", target_shape=None, regenerate_masks=True, peak_params=None):
        self.region = region
        self.target_shape = target_shape
        self.regenerate_masks = regenerate_masks
        self.peak_params = peak_params

    def fit(self, cases=None, y=None):
        check_region(self.region)
        self.slice_shape_ = (
            tuple(self.target_shape) if self.target_shape is not None else SLICE_SHAPE[self.region]
        )
        return self

    def preprocess(self, case: PatientCase) -> PreprocessedCase:
        return preprocess_case(case, regenerate=self.regenerate_masks, params=self.peak_params)

    def transform(self, cases: Sequence[PatientCase]):
        if not hasattr(self, "slice_shape_"):
            self.fit()
        out = []
        for case in cases:
            pairs = assemble_training_slices(self.preprocess(case), self.region, self.slice_shape_)
            cbct = np.stack([p[0].channels for p in pairs])
            ct = None if pairs[0][1] is None else np.stack([p[1].channels for p in pairs])
            out.append((cbct, ct))
        return out
