"""Masked image similarity metrics, the gamma index, and report assembly."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume_core import AIR_HU, Volume3D

REPORT_SCHEMA_VERSION = "1.0"

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arrays(gt, pred, mask):
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    m = np.asarray(getattr(mask, "data", mask)) > 0
    if g.shape != p.shape or g.shape != m.shape:
        raise ValueError(f"shape mismatch: gt {g.shape}, pred {p.shape}, mask {m.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return g, p, m


def mae(gt, pred, mask) -> float:
    """Mean absolute error over in-mask voxels."""
    g, p, m = _arrays(gt, pred, mask)
    return float(np.mean(np.abs(g[m] - p[m])))


def dynamic_range(gt, mask) -> float:
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    vals = g[np.asarray(getattr(mask, "data", mask)) > 0]
    return float(vals.max() - vals.min())


def psnr(gt, pred, mask) -> float:
    """PSNR in dB with peak = in-mask ground-truth range.

    Returns ``inf`` for identical inputs and ``nan`` when the ground truth is
    constant inside the mask.
    """
    g, p, m = _arrays(gt, pred, mask)
    data_range = float(g[m].max() - g[m].min())
    if data_range == 0.0:
        return float("nan")
    mse = float(np.mean((g[m] - p[m]) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range ** 2 / mse)


def _gaussian_filter2d(img):
    return ndimage.gaussian_filter(
        img, sigma=SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA
    )


def ssim_map_2d(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    """Per-pixel SSIM of two 2D images with an 11x11 Gaussian window (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _gaussian_filter2d(a)
    mu_b = _gaussian_filter2d(b)
    var_a = _gaussian_filter2d(a * a) - mu_a * mu_a
    var_b = _gaussian_filter2d(b * b) - mu_b * mu_b
    cov = _gaussian_filter2d(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(gt, pred, mask, data_range: Optional[float] = None, background: float = AIR_HU) -> float:
    """Slice-wise SSIM averaged over in-mask pixels.

    Out-of-mask voxels of both images are replaced by ``background`` first, so
    nothing outside the mask can influence the score.
    """
    g, p, m = _arrays(gt, pred, mask)
    if data_range is None:
        data_range = float(g[m].max() - g[m].min())
    if data_range <= 0:
        return float("nan")
    g = np.where(m, g, background)
    p = np.where(m, p, background)
    total = 0.0
    count = 0
    for z in range(g.shape[0]):
        if not m[z].any():
            continue
        smap = ssim_map_2d(g[z], p[z], data_range)
        total += float(smap[m[z]].sum())
        count += int(m[z].sum())
    return total / count


# -- gamma index ---------------------------------------------------------------


@dataclass(frozen=True)
class GammaParams:
    dose_diff_pct: float = 2.0
    dta_mm: float = 2.0
    low_dose_cutoff_pct: float = 10.0
    search_radius_mm: Optional[float] = None
    step_mm: Optional[float] = None

    def __post_init__(self):
        if self.dose_diff_pct <= 0 or self.dta_mm <= 0 or self.low_dose_cutoff_pct < 0:
            raise ValueError("gamma criteria must be positive")
        if self.search_radius_mm is not None and self.search_radius_mm < self.dta_mm:
            raise ValueError("search radius must be >= dta")

    @property
    def radius(self) -> float:
        return self.search_radius_mm if self.search_radius_mm is not None else 3.0 * self.dta_mm

    @property
    def step(self) -> float:
        return self.step_mm if self.step_mm is not None else self.dta_mm / 3.0


# float guard so a gamma of exactly 1 (up to rounding) counts as a pass
GAMMA_PASS_TOL = 1e-9


def search_offsets(spacing, params: GammaParams):
    """Candidate displacements in voxel units, sorted by physical distance.

    Each axis step divides the voxel spacing evenly and is no larger than
    ``params.step``, so every voxel centre inside the radius is a candidate.
    Returns (offsets (n, 3) in voxels, squared distances in mm^2).
    """
    sub = [max(1, math.ceil(s / params.step - 1e-12)) for s in spacing]
    reach = [int(math.floor(params.radius / (s / k) + 1e-9)) for s, k in zip(spacing, sub)]
    axes = [np.arange(-r, r + 1) for r in reach]
    grid = np.array(list(itertools.product(*axes)), dtype=np.float64)
    steps = np.array([s / k for s, k in zip(spacing, sub)])
    mm = grid * steps
    r2 = (mm ** 2).sum(axis=1)
    keep = r2 <= params.radius ** 2 + 1e-9
    order = np.argsort(r2[keep], kind="stable")
    return grid[keep][order] / np.array(sub, dtype=np.float64), r2[keep][order]


def gamma_index(ref_dose, eval_dose, params: Optional[GammaParams] = None):
    """Global gamma map of ``eval_dose`` against ``ref_dose`` on a shared grid.

    Voxels at or below the low-dose cutoff get NaN. Positions between voxel
    centres are sampled by trilinear interpolation of the evaluated dose.
    """
    params = params or GammaParams()
    if isinstance(ref_dose, Volume3D):
        spacing = ref_dose.spacing
        if isinstance(eval_dose, Volume3D) and not ref_dose.same_grid(eval_dose):
            raise ValueError("dose grids differ")
    else:
        spacing = (1.0, 1.0, 1.0)
    ref = np.asarray(getattr(ref_dose, "data", ref_dose), dtype=np.float64)
    ev = np.asarray(getattr(eval_dose, "data", eval_dose), dtype=np.float64)
    if ref.shape != ev.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {ev.shape}")
    if (ref < 0).any() or (ev < 0).any():
        raise ValueError("doses must be non-negative")

    ref_max = float(ref.max())
    dd = params.dose_diff_pct / 100.0 * ref_max
    cutoff = params.low_dose_cutoff_pct / 100.0 * ref_max
    idx = np.argwhere(ref > cutoff)
    gamma = np.full(ref.shape, np.nan)
    if idx.size == 0 or dd <= 0:
        return gamma
    ref_vals = ref[tuple(idx.T)]
    best = np.full(len(idx), np.inf)
    shape = np.array(ref.shape)
    offsets, r2 = search_offsets(spacing, params)
    dta2 = params.dta_mm ** 2
    for off, d2 in zip(offsets, r2):
        dist_term = d2 / dta2
        if dist_term >= best.max():
            break
        pos = idx + off
        inside = np.all((pos >= 0) & (pos <= shape - 1), axis=1)
        if not inside.any():
            continue
        if np.all(off == np.round(off)):
            p = pos[inside].astype(np.int64)
            vals = ev[tuple(p.T)]
        else:
            vals = ndimage.map_coordinates(ev, pos[inside].T, order=1, mode="nearest")
        g2 = ((vals - ref_vals[inside]) / dd) ** 2 + dist_term
        best[inside] = np.minimum(best[inside], g2)
    gamma[tuple(idx.T)] = np.sqrt(best)
    return gamma


def gamma_pass_rate(ref_dose, eval_dose, params: Optional[GammaParams] = None):
    """Percentage of above-cutoff voxels with gamma <= 1, and the gamma map.

    Returns (nan, map) when no voxel clears the cutoff.
    """
    gmap = gamma_index(ref_dose, eval_dose, params)
    evaluated = ~np.isnan(gmap)
    if not evaluated.any():
        return float("nan"), gmap
    passed = np.count_nonzero(gmap[evaluated] <= 1.0 + GAMMA_PASS_TOL)
    return 100.0 * passed / int(evaluated.sum()), gmap


# -- reports -------------------------------------------------------------------


@dataclass
class CaseMetrics:
    case_id: str
    region: str
    mae: float
    psnr: float
    ssim: float
    voxel_count: int


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class MetricsReport:
    per_case: List[CaseMetrics]
    aggregate: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    gamma: Optional[Dict[str, object]] = None

    def recompute_aggregate(self):
        groups = {}
        for row in self.per_case:
            groups.setdefault(row.region, []).append(row)
        agg = {}
        for name in sorted(groups) + ["full"]:
            rows = self.per_case if name == "full" else groups[name]
            agg[name] = {k: _stats([getattr(r, k) for r in rows]) for k in ("mae", "psnr", "ssim")}
        self.aggregate = agg
        return agg

    def to_dict(self):
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config,
            "per_case": [asdict(r) for r in self.per_case],
            "aggregate": self.aggregate,
        }
        if self.gamma is not None:
            out["gamma"] = self.gamma
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case_id", "region", "mae", "psnr", "ssim", "voxel_count"])
        for r in self.per_case:
            writer.writerow([r.case_id, r.region, repr(r.mae), repr(r.psnr), repr(r.ssim), r.voxel_count])
        for name, metrics in self.aggregate.items():
            writer.writerow([f"mean:{name}", name] + [repr(metrics[k]["mean"]) for k in ("mae", "psnr", "ssim")] + [""])
            writer.writerow([f"std:{name}", name] + [repr(metrics[k]["std"]) for k in ("mae", "psnr", "ssim")] + [""])
        return buf.getvalue()

    def write(self, json_path, csv_path=None):
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())

    @classmethod
    def from_dict(cls, d):
        rows = [CaseMetrics(**r) for r in d["per_case"]]
        return cls(rows, d.get("aggregate", {}), d.get("config", {}), d.get("gamma"))


def metric_config():
    return {
        "mae": "mean |gt - pred| over mask voxels (HU)",
        "psnr_peak": "in-mask ground-truth range",
        "ssim_mode": "2D slice-wise, pooled over mask pixels",
        "ssim_window": {"type": "gaussian", "sigma": SSIM_SIGMA, "size": 2 * SSIM_RADIUS + 1},
        "ssim_constants": {"K1": SSIM_K1, "K2": SSIM_K2},
        "ssim_data_range": "in-mask ground-truth range",
        "ssim_background_hu": AIR_HU,
    }


def evaluate_case(case_id, region, gt, pred, mask) -> CaseMetrics:
    return CaseMetrics(
        case_id=case_id,
        region=region,
        mae=mae(gt, pred, mask),
        psnr=psnr(gt, pred, mask),
        ssim=ssim(gt, pred, mask),
        voxel_count=int(np.count_nonzero(np.asarray(getattr(mask, "data", mask)) > 0)),
    )


def build_report(cases: Sequence, sct_volumes: Sequence, masks: Optional[Sequence] = None) -> MetricsReport:
    """Per-case and per-region (plus ``full``) metrics.

    ``cases`` are objects with ``case_id``, ``region`` and ``ct``
    (:class:`~mcsynth.preprocess.PatientCase`); masks default to each case's mask.
    """
    if not cases:
        raise ValueError("need at least one case")
    if masks is None:
        masks = [c.mask for c in cases]
    rows = [
        evaluate_case(c.case_id, c.region, c.ct, s, m) for c, s, m in zip(cases, sct_volumes, masks)
    ]
    report = MetricsReport(rows, config=metric_config())
    report.recompute_aggregate()
    return report
