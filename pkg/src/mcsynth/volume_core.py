"""Volume container, HU windowing, slice geometry and the SVF file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, Path]

AIR_HU = -1024.0
MAX_HU = 3000.0

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


class VolumeFormatError(ValueError):
    """Raised for malformed SVF headers or payloads."""


@dataclass
class Volume3D:
    """A 3D scalar grid with physical spacing.

    Attributes:
        data: array of shape (nz, ny, nx). HU for images, {0, 1} for masks, Gy for dose.
        spacing: (sz, sy, sx) in mm.
        origin: (z, y, x) in mm.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D array, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"empty volume shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have three values, got {self.origin}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same grid, new payload."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {data.shape} vs {self.data.shape}")
        return Volume3D(data, self.spacing, self.origin)

    def same_grid(self, other: "Volume3D") -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing)


@dataclass(frozen=True)
class HUWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid window [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi}


FULL_WINDOW = HUWindow(AIR_HU, MAX_HU)
DENSE_WINDOW = HUWindow(600.0, MAX_HU)


@dataclass(frozen=True)
class GeometryRecord:
    """Everything needed to undo a centred pad/crop of one axial slice."""

    original_shape: Tuple[int, int]
    target_shape: Tuple[int, int]
    pad_before: Tuple[int, int] = (0, 0)
    crop_before: Tuple[int, int] = (0, 0)

    def to_dict(self):
        return {
            "original_shape": list(self.original_shape),
            "target_shape": list(self.target_shape),
            "pad_before": list(self.pad_before),
            "crop_before": list(self.crop_before),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(tuple(int(v) for v in d[k]) for k in
                     ("original_shape", "target_shape", "pad_before", "crop_before")))


@dataclass
class MultiChannelSlice:
    """Three normalized channels of one axial slice plus the geometry to undo padding."""

    channels: np.ndarray
    geometry: GeometryRecord
    windows: object = field(default=None, repr=False)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ValueError(f"expected (3, ny, nx) channels, got {self.channels.shape}")
        if self.channels.min() < 0.0 or self.channels.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")


def _check_finite(values: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(values)):
        n_bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise ValueError(f"{what} contains {n_bad} non-finite value(s)")


def window_normalize(values, window: HUWindow) -> np.ndarray:
    """Clip to the window and min-max scale into [0, 1] (float32)."""
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    out = (np.clip(values, window.lo, window.hi) - window.lo) / window.width
    return out.astype(np.float32)


def window_denormalize(values, window: HUWindow, tol: float = 1e-6) -> np.ndarray:
    """Map normalized values back to HU. Values outside [0, 1] by more than ``tol`` are rejected."""
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    if values.size and (values.min() < -tol or values.max() > 1.0 + tol):
        raise ValueError(
            f"normalized values outside [0, 1]: range [{values.min()}, {values.max()}]"
        )
    values = np.clip(values, 0.0, 1.0)
    return (window.lo + values * window.width).astype(np.float32)


def _centered_split(amount: int) -> int:
    # extra voxel of an odd split goes to the trailing side
    return amount // 2


def pad_or_crop(slice2d: np.ndarray, target: Tuple[int, int], fill: float = 0.0):
    """Centre-pad or centre-crop a 2D slice to ``target``.

    Returns the resized slice and a :class:`GeometryRecord` that lets
    :func:`undo_pad_or_crop` recover the original extent.
    """
    slice2d = np.asarray(slice2d)
    if slice2d.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {slice2d.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 2 or min(target) < 1:
        raise ValueError(f"invalid target shape {target}")

    pad_before = [0, 0]
    crop_before = [0, 0]
    pads = []
    for axis in range(2):
        diff = target[axis] - slice2d.shape[axis]
        if diff >= 0:
            pad_before[axis] = _centered_split(diff)
            pads.append((pad_before[axis], diff - pad_before[axis]))
        else:
            crop_before[axis] = _centered_split(-diff)
            pads.append((0, 0))

    out = slice2d[
        crop_before[0]: crop_before[0] + min(target[0], slice2d.shape[0]),
        crop_before[1]: crop_before[1] + min(target[1], slice2d.shape[1]),
    ]
    out = np.pad(out, pads, mode="constant", constant_values=fill)
    record = GeometryRecord(
        original_shape=tuple(slice2d.shape),
        target_shape=target,
        pad_before=tuple(pad_before),
        crop_before=tuple(crop_before),
    )
    return out, record


def undo_pad_or_crop(slice2d: np.ndarray, record: GeometryRecord, fill: float = 0.0) -> np.ndarray:
    """Invert :func:`pad_or_crop`; cropped-away borders are refilled with ``fill``."""
    slice2d = np.asarray(slice2d)
    if tuple(slice2d.shape) != tuple(record.target_shape):
        raise ValueError(
            f"slice shape {slice2d.shape} does not match record target {record.target_shape}"
        )
    orig = record.original_shape
    inner = slice2d[
        record.pad_before[0]: record.pad_before[0] + min(orig[0], record.target_shape[0]),
        record.pad_before[1]: record.pad_before[1] + min(orig[1], record.target_shape[1]),
    ]
    pads = []
    for axis in range(2):
        before = record.crop_before[axis]
        pads.append((before, orig[axis] - inner.shape[axis] - before))
    return np.pad(inner, pads, mode="constant", constant_values=fill)


def _header_path(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def write_volume(volume: Volume3D, path: PathLike, dtype: str = "f32") -> Path:
    """Write ``<path>.json`` + ``<path>.raw``. Returns the header path."""
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    header_path, raw_path = _header_path(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    data = volume.data
    if dtype == "i16":
        rounded = np.rint(data)
        if not np.array_equal(rounded, data) or data.min() < -32768 or data.max() > 32767:
            raise VolumeFormatError("i16 storage requires integer values within int16 range")
        data = rounded
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype])
    header = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing),
        "origin_mm": list(volume.origin),
        "dtype": dtype,
        "order": "C",
    }
    header_path.write_text(json.dumps(header, indent=2))
    raw_path.write_bytes(payload.tobytes(order="C"))
    return header_path


def read_volume(path: PathLike) -> Volume3D:
    """Read an SVF volume; i16 payloads are promoted to float32."""
    header_path, raw_path = _header_path(path)
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header.get("origin_mm", (0.0, 0.0, 0.0)))
        dtype = header["dtype"]
        order = header.get("order", "C")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r} in {header_path}")
    if order != "C":
        raise VolumeFormatError(f"unsupported order {order!r} in {header_path}")
    if len(shape) != 3:
        raise VolumeFormatError(f"shape must have three entries, got {shape}")

    raw = raw_path.read_bytes()
    count = len(raw) // _DTYPES[dtype].itemsize
    if len(raw) % _DTYPES[dtype].itemsize or count != int(np.prod(shape)):
        raise VolumeFormatError(
            f"payload holds {len(raw)} bytes, header shape {shape} needs "
            f"{int(np.prod(shape)) * _DTYPES[dtype].itemsize}"
        )
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    data = data.astype(np.float32) if dtype == "i16" else data.astype(np.float32, copy=True)
    _check_finite(data, str(raw_path))
    return Volume3D(data, spacing, origin)
