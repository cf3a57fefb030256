"""Procedural CBCT/CT/mask phantoms for desk-scale testing and toy training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .preprocess import PatientCase, check_region, load_case, save_case
from .volume_core import AIR_HU, MAX_HU, Volume3D

PHANTOM_VERSION = 1
NOISE_SIGMA_HU = 20.0
OVERFLOW_SHELL_MM = 10.0
DEFAULT_SHAPE = {"brain": (16, 64, 64), "pelvis": (16, 96, 96)}
SLICE_THICKNESS_MM = 2.5
# in-plane field of view; fixes the physical body size whatever the grid, so the
# 40 mm overflow hull only reaches anatomy a real patient would have there
FOV_MM = {"brain": 220.0, "pelvis": 400.0}


def default_spacing(region: str, shape) -> Tuple[float, float, float]:
    _, ny, nx = shape
    fov = FOV_MM[check_region(region)]
    return (SLICE_THICKNESS_MM, fov / ny, fov / nx)


# independent random streams, one per ingredient, so toggles never perturb each other
_STREAMS = ("anatomy", "metal", "deform", "scatter", "streaks", "noise", "overflow")


@dataclass
class PhantomSpec:
    seed: int
    region: str = "brain"
    shape: Optional[Tuple[int, int, int]] = None
    spacing: Optional[Tuple[float, float, float]] = None
    soft_level_shift: float = 0.0
    scatter_amplitude: float = 0.0
    streak_count: int = 0
    add_metal: bool = False
    add_overflow_artifact: bool = False
    add_range_offset: bool = False
    deformation_voxels: float = 0.0
    noise_sigma: float = NOISE_SIGMA_HU

    def __post_init__(self):
        check_region(self.region)
        if self.shape is None:
            self.shape = DEFAULT_SHAPE[self.region]
        self.shape = tuple(int(s) for s in self.shape)
        if self.spacing is None:
            self.spacing = default_spacing(self.region, self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) != 3 or min(self.shape) < 1 or min(self.shape[1:]) < 16:
            raise ValueError(f"phantom shape too small: {self.shape}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if self.scatter_amplitude < 0 or self.streak_count < 0 or self.noise_sigma < 0:
            raise ValueError("artifact magnitudes must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _streams(seed: int):
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _smooth_field(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _anatomy(spec: PhantomSpec, rng):
    """CT volume (HU) and body mask for the spec's region."""
    nz, ny, nx = spec.shape
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    if spec.region == "brain":
        ay, ax = 0.40 * ny, 0.33 * nx
    else:
        ay, ax = 0.32 * ny, 0.44 * nx
    ay *= rng.uniform(0.92, 1.05)
    ax *= rng.uniform(0.92, 1.05)

    ct = np.full(spec.shape, AIR_HU, dtype=np.float64)
    mask = np.zeros(spec.shape, dtype=bool)
    texture = 8.0 * _smooth_field(rng, spec.shape, sigma=(1.0, 3.0, 3.0))
    zc = (nz - 1) / 2.0
    for z in range(nz):
        taper = 1.0 - 0.15 * ((z - zc) / max(nz, 1)) ** 2
        body = _ellipse(yy, xx, cy, cx, ay * taper, ax * taper)
        mask[z] = body
        sl = np.where(body, 0.0, AIR_HU)
        if spec.region == "brain":
            outer = _ellipse(yy, xx, cy, cx, 0.93 * ay * taper, 0.93 * ax * taper)
            inner = _ellipse(yy, xx, cy, cx, 0.82 * ay * taper, 0.82 * ax * taper)
            sl[outer & ~inner] = rng.uniform(1000.0, 1500.0)
            sinus = _ellipse(yy, xx, cy - 0.55 * ay, cx, 0.10 * ay, 0.14 * ax)
            sl[sinus & inner] = -1000.0
        else:
            fat = body & ~_ellipse(yy, xx, cy, cx, ay * taper - 3, ax * taper - 3)
            sl[fat] = -100.0
            for side in (-1, 1):
                head = _ellipse(yy, xx, cy + 0.05 * ay, cx + side * 0.55 * ax, 0.16 * ay, 0.10 * ax)
                sl[head] = rng.uniform(700.0, 1200.0)
                cortex = head & ~_ellipse(
                    yy, xx, cy + 0.05 * ay, cx + side * 0.55 * ax, 0.11 * ay, 0.06 * ax
                )
                sl[cortex] = rng.uniform(1200.0, 1500.0)
            sacrum = _ellipse(yy, xx, cy + 0.45 * ay, cx, 0.12 * ay, 0.12 * ax)
            sl[sacrum] = rng.uniform(700.0, 1300.0)
            gas = _ellipse(yy, xx, cy - 0.30 * ay, cx, 0.10 * ay, 0.09 * ax)
            sl[gas] = -1000.0
        soft = body & (np.abs(sl) < 1.0)
        sl[soft] += texture[z][soft]
        ct[z] = sl
    return ct, mask, (cy, cx, ay, ax)


def _add_metal(spec, ct, geom, rng):
    cy, cx, ay, ax = geom
    nz, ny, nx = spec.shape
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    if spec.region == "pelvis":
        blob = _ellipse(yy, xx, cy + 0.05 * ay, cx + 0.55 * ax, 0.12 * ay, 0.08 * ax)
    else:
        blob = _ellipse(yy, xx, cy - 0.72 * ay, cx + rng.uniform(-0.2, 0.2) * ax, 0.06 * ay, 0.06 * ax)
    z0 = rng.integers(0, max(1, nz // 3))
    z1 = min(nz, z0 + max(2, nz // 2))
    for z in range(z0, z1):
        ct[z][blob] = rng.uniform(2800.0, 3000.0)


def _deform(spec, ct, rng):
    nz, ny, nx = spec.shape
    out = np.empty_like(ct)
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    for z in range(nz):
        dy = spec.deformation_voxels * _smooth_field(rng, (ny, nx), sigma=ny / 6.0)
        dx = spec.deformation_voxels * _smooth_field(rng, (ny, nx), sigma=nx / 6.0)
        out[z] = ndimage.map_coordinates(ct[z], [yy + dy, xx + dx], order=1, mode="nearest")
    return out


def _scatter_field(spec, geom, rng):
    nz, ny, nx = spec.shape
    cy, cx, ay, ax = geom
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    radial = np.clip(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2, 0.0, 1.0)
    cupping = radial - 1.0  # -1 at centre, 0 at the skin
    lowfreq = _smooth_field(rng, spec.shape, sigma=(nz / 2.0, ny / 4.0, nx / 4.0))
    field = 0.6 * cupping[None] + 0.4 * lowfreq
    return 1.0 + spec.scatter_amplitude * field / np.abs(field).max()


def _streaks(spec, cbct, ct, mask, rng):
    nz, ny, nx = spec.shape
    length = 2 * max(ny, nx)
    t = np.linspace(-length / 2, length / 2, 4 * length)
    for _ in range(spec.streak_count):
        z = int(rng.integers(0, nz))
        dense = np.argwhere(ct[z] > 600.0)
        pool = dense if len(dense) else np.argwhere(mask[z])
        y0, x0 = pool[int(rng.integers(0, len(pool)))]
        angle = rng.uniform(0.0, np.pi)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(150.0, 400.0)
        ys = np.rint(y0 + t * np.sin(angle)).astype(int)
        xs = np.rint(x0 + t * np.cos(angle)).astype(int)
        keep = (ys >= 0) & (ys < ny) & (xs >= 0) & (xs < nx)
        line = np.zeros((ny, nx), dtype=bool)
        line[ys[keep], xs[keep]] = True
        line &= mask[z]
        cbct[z][line] += amp


def _overflow_shell(spec, cbct, mask, geom, rng):
    cy, cx, _, _ = geom
    nz, ny, nx = spec.shape
    depth = ndimage.distance_transform_edt(mask, sampling=spec.spacing)
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    centre = rng.uniform(-np.pi, np.pi)
    sector = np.abs(np.angle(np.exp(1j * (theta - centre)))) < np.pi / 3
    shell = mask & (depth <= OVERFLOW_SHELL_MM) & sector[None]
    values = rng.uniform(1500.0, 2500.0, size=int(shell.sum()))
    cbct[shell] = values


def generate_case(spec: PhantomSpec, case_id: Optional[str] = None) -> PatientCase:
    """Deterministically build one paired CBCT/CT/mask phantom from ``spec``."""
    rng = _streams(spec.seed)
    ct, mask, geom = _anatomy(spec, rng["anatomy"])
    if spec.add_metal:
        _add_metal(spec, ct, geom, rng["metal"])
    ct = np.clip(ct, AIR_HU, MAX_HU)

    cbct = ct.copy()
    if spec.deformation_voxels > 0:
        cbct = _deform(spec, cbct, rng["deform"])
    body = mask
    if spec.scatter_amplitude > 0:
        field = _scatter_field(spec, geom, rng["scatter"])
        cbct = np.where(body, (cbct - AIR_HU) * field + AIR_HU, cbct)
    if spec.soft_level_shift:
        cbct = np.where(body, cbct + spec.soft_level_shift, cbct)
    if spec.streak_count:
        _streaks(spec, cbct, ct, mask, rng["streaks"])
    if spec.noise_sigma > 0:
        cbct = cbct + rng["noise"].normal(0.0, spec.noise_sigma, size=cbct.shape)
    if spec.add_overflow_artifact:
        _overflow_shell(spec, cbct, mask, geom, rng["overflow"])
    if spec.add_range_offset:
        cbct = cbct + 1024.0

    case_id = case_id or f"{spec.region}_seed{spec.seed}"
    return PatientCase(
        cbct=Volume3D(cbct.astype(np.float32), spec.spacing),
        ct=Volume3D(ct.astype(np.float32), spec.spacing),
        mask=Volume3D(mask.astype(np.float32), spec.spacing),
        region=spec.region,
        case_id=case_id,
    )


def dataset_specs(n_cases: int, region: str, base_seed: int, shape=None, spacing=None):
    """Per-case specs covering every artifact branch.

    The first four cases are pinned to metal, overflow, range offset and heavy
    streaks respectively; the rest draw toggles at random.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    check_region(region)
    rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), 7919]))
    specs = []
    for i in range(n_cases):
        seed = int(np.random.SeedSequence([int(base_seed), i]).generate_state(1)[0])
        spec = PhantomSpec(
            seed=seed,
            region=region,
            shape=shape,
            spacing=spacing,
            soft_level_shift=float(4 * rng.integers(-25, 26)),
            scatter_amplitude=float(rng.uniform(0.02, 0.08)),
            streak_count=int(rng.integers(0, 4)),
            add_metal=bool(rng.random() < 0.25),
            # overflow shells are a pelvis reconstruction fault; brain only sees the pinned case
            add_overflow_artifact=bool(rng.random() < (0.2 if region == "pelvis" else 0.0)),
            add_range_offset=bool(rng.random() < 0.25),
            deformation_voxels=float(rng.uniform(0.2, 0.6)),
        )
        if i == 0:
            spec.add_metal = True
        elif i == 1:
            spec.add_overflow_artifact = True
        elif i == 2:
            spec.add_range_offset = True
        elif i == 3:
            spec.streak_count = 10
        specs.append(spec)
    return specs


def generate_dataset(n_cases: int, region: str, base_seed: int, out_dir, shape=None,
                     spacing=None) -> Path:
    """Write ``n_cases`` phantoms under ``<out_dir>/<region>/`` plus a manifest.

    Returns the manifest path.
    """
    region_dir = Path(out_dir) / check_region(region)
    manifest_path = region_dir / "phantom_manifest.json"
    if manifest_path.exists():
        raise FileExistsError(f"{manifest_path} already exists")
    specs = dataset_specs(n_cases, region, base_seed, shape, spacing)
    entries = []
    for i, spec in enumerate(specs):
        case_id = f"{region}_{i:03d}"
        if (region_dir / case_id).exists():
            raise FileExistsError(f"{region_dir / case_id} already exists")
        save_case(generate_case(spec, case_id), out_dir)
        entries.append({"case_id": case_id, "spec": spec.to_dict()})
    manifest = {
        "generator": "mcsynth.phantom",
        "version": PHANTOM_VERSION,
        "region": region,
        "base_seed": int(base_seed),
        "noise_sigma_hu": NOISE_SIGMA_HU,
        "overflow_shell_mm": OVERFLOW_SHELL_MM,
        "cases": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def regenerate_from_manifest(manifest_path):
    """Rebuild every case listed in a phantom manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    return [generate_case(PhantomSpec.from_dict(e["spec"]), e["case_id"]) for e in manifest["cases"]]


def load_phantom_case(root, region, case_id) -> PatientCase:
    return load_case(Path(root) / region / case_id, region)
