"""Apply a trained bundle to CBCTs, restore HU and geometry, recombine channels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .preprocess import (
    ChannelWindows,
    PatientCase,
    PreprocessedCase,
    assemble_training_slices,
    check_region,
    preprocess_case,
)
from .volume_core import (
    AIR_HU,
    MAX_HU,
    GeometryRecord,
    Volume3D,
    undo_pad_or_crop,
    window_denormalize,
    write_volume,
)

SATURATION_EPS = 0.005
BASE_CHOICES = ("auto", "ch1", "fused")


@dataclass
class SctBundle:
    """Every synthetic image produced for one case, in HU on the CBCT grid."""

    ch1: Volume3D
    ch2: Volume3D
    ch3: Volume3D
    fused: Volume3D
    windows: ChannelWindows
    geometry: List[GeometryRecord]

    def volumes(self):
        return {"sct_ch1": self.ch1, "sct_ch2": self.ch2, "sct_ch3": self.ch3, "sct_fused": self.fused}


def _forward(bundle, slices: np.ndarray, batch_size: int):
    outs, fused = [], []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            x = torch.from_numpy(slices[start:start + batch_size])
            y = bundle.G_cbct2ct(x)
            outs.append(y.numpy())
            fused.append(bundle.F_fusion(y).numpy())
    return np.concatenate(outs), np.concatenate(fused)


def generate_sct(case, bundle, region: Optional[str] = None, target_shape=None,
                 batch_size: int = 8) -> SctBundle:
    """Slice-wise CBCT->sCT and fusion passes, un-padded and rescaled to HU.

    ``case`` may be a raw :class:`PatientCase` (preprocessed here without mask
    regeneration) or a :class:`PreprocessedCase`.
    """
    if bundle is None:
        raise ValueError("no model bundle supplied")
    for name in ("G_cbct2ct", "F_fusion"):
        if getattr(bundle, name, None) is None:
            raise ValueError(f"model bundle is missing {name}")
    if isinstance(case, PatientCase):
        case = preprocess_case(case, regenerate=False)
    region = check_region(region or case.region)
    pairs = assemble_training_slices(case, region, target_shape)
    stack = np.stack([cb.channels for cb, _ in pairs]).astype(np.float32)
    for net in (bundle.G_cbct2ct, bundle.F_fusion):
        if hasattr(net, "eval"):
            net.eval()
    pred, fused = _forward(bundle, stack, batch_size)

    geometry = [cb.geometry for cb, _ in pairs]
    channels = np.empty((3,) + case.mask.shape, dtype=np.float32)
    fused_n = np.empty(case.mask.shape, dtype=np.float32)
    for z, rec in enumerate(geometry):
        for c in range(3):
            channels[c, z] = undo_pad_or_crop(pred[z, c], rec, fill=0.0)
        fused_n[z] = undo_pad_or_crop(fused[z, 0], rec, fill=0.0)

    windows = ChannelWindows.for_region(region, 0.0)
    full, soft, dense = windows.as_tuple()
    like = case.mask
    return SctBundle(
        ch1=like.with_data(window_denormalize(channels[0], full)),
        ch2=like.with_data(window_denormalize(channels[1], soft)),
        ch3=like.with_data(window_denormalize(channels[2], dense)),
        fused=like.with_data(window_denormalize(fused_n, full)),
        windows=windows,
        geometry=geometry,
    )


def resolve_base(region: str, base: str = "auto") -> str:
    if base not in BASE_CHOICES:
        raise ValueError(f"base must be one of {BASE_CHOICES}, got {base!r}")
    if base == "auto":
        return "fused" if check_region(region) == "brain" else "ch1"
    return base


def recombine_channels(sct: SctBundle, region: str, base: str = "auto",
                       eps: float = SATURATION_EPS) -> Volume3D:
    """Insert unsaturated soft-tissue and high-density channel values into a full-range base.

    The base is the fused sCT for brain and channel one for pelvis unless
    ``base`` says otherwise. Dense insertion runs second and wins overlaps.
    """
    base_vol = sct.fused if resolve_base(region, base) == "fused" else sct.ch1
    out = np.asarray(base_vol.data, dtype=np.float32)
    soft, dense = sct.windows.soft, sct.windows.dense

    ch2 = np.asarray(sct.ch2.data, dtype=np.float32)
    n2 = (ch2.astype(np.float64) - soft.lo) / soft.width
    out = np.where((n2 > eps) & (n2 < 1.0 - eps), ch2, out)

    ch3 = np.asarray(sct.ch3.data, dtype=np.float32)
    n3 = (ch3.astype(np.float64) - dense.lo) / dense.width
    out = np.where(n3 > eps, ch3, out)
    return base_vol.with_data(np.clip(out, np.float32(AIR_HU), np.float32(MAX_HU)))


def apply_final_mask(sct: Volume3D, mask: Volume3D) -> Volume3D:
    if sct.shape != mask.shape:
        raise ValueError(f"shape mismatch: sct {sct.shape} vs mask {mask.shape}")
    data = np.where(np.asarray(mask.data) > 0, sct.data, np.float32(AIR_HU)).astype(np.float32)
    return sct.with_data(data)


def predict_case(case, bundle, region: Optional[str] = None, base: str = "auto",
                 target_shape=None, return_bundle: bool = False):
    """Final masked sCT (HU) for one case."""
    if isinstance(case, PatientCase):
        case = preprocess_case(case, regenerate=False)
    region = region or case.region
    sct = generate_sct(case, bundle, region, target_shape)
    final = apply_final_mask(recombine_channels(sct, region, base), case.mask)
    final = Volume3D(final.data, case.mask.spacing, case.mask.origin)
    return (final, sct) if return_bundle else final


def write_intermediates(sct: SctBundle, out_dir) -> None:
    out_dir = Path(out_dir)
    for name, vol in sct.volumes().items():
        write_volume(vol, out_dir / name)
