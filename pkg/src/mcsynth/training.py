"""Cycle-consistent training: losses, learning-rate schedule, checkpointing and selection."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .nn_fabric import DiscriminatorSpec, FusionSpec, GeneratorSpec, ModelBundle
from .preprocess import PatientCase, PreprocessedCase, assemble_training_slices, preprocess_case

logger = logging.getLogger(__name__)

LOSS_TERMS = ("gan_sct", "gan_scbct", "cycle_ct", "cycle_cbct", "identity_ct", "identity_cbct", "fusion_sct")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Generator loss terms; ``total`` keeps the autograd graph when built from tensors."""

    gan_sct: torch.Tensor
    gan_scbct: torch.Tensor
    cycle_ct: torch.Tensor
    cycle_cbct: torch.Tensor
    identity_ct: torch.Tensor
    identity_cbct: torch.Tensor
    fusion_sct: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in LOSS_TERMS + ("total",)}


def combine_terms(terms: Dict[str, object], weights: LossWeights):
    return (
        terms["gan_sct"] + terms["gan_scbct"]
        + weights.alpha * (terms["cycle_ct"] + terms["cycle_cbct"])
        + weights.beta * (terms["identity_ct"] + terms["identity_cbct"])
        + terms["fusion_sct"]
    )


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor,
                       real_label: float = 1.0) -> torch.Tensor:
    """Patch-averaged BCE: real patches towards ``real_label``, fake towards 0."""
    real = F.binary_cross_entropy_with_logits(real_logits, torch.full_like(real_logits, real_label))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


@dataclass
class CycleOutputs:
    """Forward products needed by :func:`generator_loss`."""

    d_fake_ct_logits: torch.Tensor
    d_fake_cbct_logits: torch.Tensor
    real_ct: torch.Tensor
    real_cbct: torch.Tensor
    cycle_ct: torch.Tensor
    cycle_cbct: torch.Tensor
    identity_ct: torch.Tensor
    identity_cbct: torch.Tensor
    fused_sct: torch.Tensor
    fusion_target: torch.Tensor


def _mse(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b)


def generator_loss(out: CycleOutputs, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """All generator-side terms as mean squared errors.

    Adversarial terms compare discriminator probabilities of the synthetic
    images against 1.
    """
    p_ct = torch.sigmoid(out.d_fake_ct_logits)
    p_cbct = torch.sigmoid(out.d_fake_cbct_logits)
    terms = {
        "gan_sct": _mse("gan_sct", p_ct, torch.ones_like(p_ct)),
        "gan_scbct": _mse("gan_scbct", p_cbct, torch.ones_like(p_cbct)),
        "cycle_ct": _mse("cycle_ct", out.cycle_ct, out.real_ct),
        "cycle_cbct": _mse("cycle_cbct", out.cycle_cbct, out.real_cbct),
        "identity_ct": _mse("identity_ct", out.identity_ct, out.real_ct),
        "identity_cbct": _mse("identity_cbct", out.identity_cbct, out.real_cbct),
        "fusion_sct": _mse("fusion_sct", out.fused_sct, out.fusion_target),
    }
    return LossBreakdown(total=combine_terms(terms, weights), **terms)


def cycle_forward(bundle: ModelBundle, cbct: torch.Tensor, ct: torch.Tensor,
                  fusion_end_to_end: bool = True) -> CycleOutputs:
    fake_ct = bundle.G_cbct2ct(cbct)
    fake_cbct = bundle.G_ct2cbct(ct)
    fusion_in = fake_ct if fusion_end_to_end else fake_ct.detach()
    return CycleOutputs(
        d_fake_ct_logits=bundle.D_ct(fake_ct),
        d_fake_cbct_logits=bundle.D_cbct(fake_cbct),
        real_ct=ct,
        real_cbct=cbct,
        cycle_ct=bundle.G_cbct2ct(fake_cbct),
        cycle_cbct=bundle.G_ct2cbct(fake_ct),
        identity_ct=bundle.G_cbct2ct(ct),
        identity_cbct=bundle.G_ct2cbct(cbct),
        fused_sct=bundle.F_fusion(fusion_in),
        fusion_target=ct[:, :1],
    )


@dataclass
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 1
    optimizer: str = "adam"
    lr_generator: float = 1e-4
    lr_discriminator: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    decay_start_epoch: int = 5
    decay_factor: float = 0.8
    decay_every: int = 2
    early_stop_patience: int = 20
    min_improvement: float = 1e-6
    top_k: int = 5
    seed: int = 0
    val_fraction: float = 0.2
    alpha: float = 10.0
    beta: float = 5.0
    fusion_end_to_end: bool = True
    label_smoothing: float = 0.0
    replay_buffer_size: int = 0
    target_shape: Optional[tuple] = None
    generator: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.max_epochs < 1 or self.batch_size < 1 or self.top_k < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch size, top_k and decay_every must be positive")
        if self.lr_generator < 0 or self.lr_discriminator < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.adam_betas = tuple(self.adam_betas)
        if self.target_shape is not None:
            self.target_shape = tuple(self.target_shape)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def specs(self):
        g = GeneratorSpec(**self.generator)
        d = DiscriminatorSpec(**self.discriminator)
        fusion = dict(base_filters=g.base_filters, n_down=g.n_down, downsample=g.downsample, init_std=g.init_std)
        fusion.update(self.fusion)
        return g, d, FusionSpec(**fusion)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        if self.target_shape is not None:
            d["target_shape"] = list(self.target_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at_epoch(config: TrainConfig, epoch: int, which: str = "gen") -> float:
    """Step decay: first decay applied at ``decay_start_epoch``, then every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if which not in ("gen", "disc"):
        raise ValueError("which must be 'gen' or 'disc'")
    lr0 = config.lr_generator if which == "gen" else config.lr_discriminator
    if epoch < config.decay_start_epoch:
        return lr0
    n = (epoch - config.decay_start_epoch) // config.decay_every + 1
    return lr0 * config.decay_factor ** n


def split_cases(cases: Sequence, val_fraction: float, seed: int):
    """Random case-level train/validation split (at least one case each when possible)."""
    n = len(cases)
    if n == 0:
        raise ValueError("empty dataset")
    order = np.random.default_rng([int(seed), 80_20]).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    val = [cases[i] for i in sorted(order[:n_val])]
    train = [cases[i] for i in sorted(order[n_val:])]
    return train, val


def _stack_pairs(cases, target_shape):
    cbct, ct = [], []
    for case in cases:
        for cb, c in assemble_training_slices(case, target_shape=target_shape):
            if c is None:
                raise ValueError(f"case {case.case_id} has no CT; training needs CT slices")
            cbct.append(cb.channels)
            ct.append(c.channels)
    if not cbct:
        raise ValueError("no training slices")
    return torch.from_numpy(np.stack(cbct)), torch.from_numpy(np.stack(ct))


class ReplayBuffer:
    """Pool of past synthetic images for discriminator updates (disabled at size 0)."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.items: List[torch.Tensor] = []
        self.rng = np.random.default_rng([int(seed), 4242])

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            img = img.unsqueeze(0)
            if len(self.items) < self.size:
                self.items.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                i = int(self.rng.integers(0, self.size))
                out.append(self.items[i].clone())
                self.items[i] = img
            else:
                out.append(img)
        return torch.cat(out)


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: List[dict]
    last_checkpoint: Path
    epochs_run: int
    log: List[dict]
    train_cases: List[str]
    val_cases: List[str]


def _mean_breakdowns(rows: List[Dict[str, float]]):
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


def evaluate_loss(bundle: ModelBundle, cbct: torch.Tensor, ct: torch.Tensor, config: TrainConfig):
    """Mean generator loss breakdown over slices, no gradient."""
    bundle.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, len(cbct), config.batch_size):
            out = cycle_forward(bundle, cbct[i:i + config.batch_size], ct[i:i + config.batch_size])
            rows.append(generator_loss(out, config.weights).to_dict())
    return _mean_breakdowns(rows)


def _check_finite(record: dict, out_dir: Path, context: dict):
    bad = [k for k, v in record.items() if not math.isfinite(v)]
    if bad:
        snapshot = {"non_finite_terms": bad, "values": {k: repr(v) for k, v in record.items()}, **context}
        (out_dir / "diagnostic.json").write_text(json.dumps(snapshot, indent=2))
        raise TrainingError(f"non-finite loss terms {bad} at {context}; snapshot in {out_dir}")


def train(config: TrainConfig, cases: Sequence, region: str, out_dir,
          val_cases: Optional[Sequence] = None) -> TrainResult:
    """Train one site-specific bundle.

    ``cases`` are :class:`PatientCase` or :class:`PreprocessedCase` objects.
    Unless ``val_cases`` is given they are split randomly into training and
    validation sets. Writes ``train_log.jsonl``, the top-k checkpoints under
    ``checkpoints/epoch_XXXX`` (ranked by validation generator loss), the
    final epoch under ``checkpoints/last`` and ``checkpoints.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cases:
        raise ValueError("empty dataset")
    cases = [c if isinstance(c, PreprocessedCase) else preprocess_case(c) for c in cases]
    if val_cases is None:
        train_cases, val_cases = split_cases(cases, config.val_fraction, config.seed)
    else:
        train_cases = cases
        val_cases = [c if isinstance(c, PreprocessedCase) else preprocess_case(c) for c in val_cases]
    train_cbct, train_ct = _stack_pairs(train_cases, config.target_shape)
    if val_cases:
        val_cbct, val_ct = _stack_pairs(val_cases, config.target_shape)
    else:
        val_cbct, val_ct = train_cbct, train_ct
        logger.warning("no validation cases; early stopping uses training loss")

    torch.use_deterministic_algorithms(True, warn_only=True)
    g_spec, d_spec, f_spec = config.specs()
    bundle = ModelBundle.build(g_spec, d_spec, f_spec, seed=config.seed)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=config.lr_discriminator,
                             betas=config.adam_betas)
    weights = config.weights
    real_label = 1.0 - config.label_smoothing
    pool_ct = ReplayBuffer(config.replay_buffer_size, config.seed)
    pool_cbct = ReplayBuffer(config.replay_buffer_size, config.seed + 1)

    ckpt_root = out_dir / "checkpoints"
    if ckpt_root.exists():
        shutil.rmtree(ckpt_root)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    kept: List[dict] = []
    log: List[dict] = []
    best = math.inf
    stale = 0
    epoch = -1
    meta = {"region": region, "train_config": config.to_dict(), "seed": config.seed}

    for epoch in range(config.max_epochs):
        lr_g = lr_at_epoch(config, epoch, "gen")
        lr_d = lr_at_epoch(config, epoch, "disc")
        for group in opt_g.param_groups:
            group["lr"] = lr_g
        for group in opt_d.param_groups:
            group["lr"] = lr_d

        bundle.train()
        order = np.random.default_rng([int(config.seed), epoch]).permutation(len(train_cbct))
        g_rows, d_vals = [], []
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            cbct, ct = train_cbct[idx], train_ct[idx]

            with torch.no_grad():
                fake_ct = pool_ct(bundle.G_cbct2ct(cbct))
                fake_cbct = pool_cbct(bundle.G_ct2cbct(ct))
            loss_d = (discriminator_loss(bundle.D_ct(ct), bundle.D_ct(fake_ct), real_label)
                      + discriminator_loss(bundle.D_cbct(cbct), bundle.D_cbct(fake_cbct), real_label))
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            for p in bundle.discriminator_parameters():
                p.requires_grad_(False)
            breakdown = generator_loss(cycle_forward(bundle, cbct, ct, config.fusion_end_to_end), weights)
            opt_g.zero_grad(set_to_none=True)
            breakdown.total.backward()
            opt_g.step()
            for p in bundle.discriminator_parameters():
                p.requires_grad_(True)

            row = breakdown.to_dict()
            row["discriminator"] = float(loss_d.detach())
            _check_finite(row, out_dir, {"epoch": epoch, "step": step})
            d_vals.append(row.pop("discriminator"))
            g_rows.append(row)

        val = evaluate_loss(bundle, val_cbct, val_ct, config)
        _check_finite(val, out_dir, {"epoch": epoch, "stage": "validation"})
        improved = val["total"] < best - config.min_improvement
        if improved:
            best = val["total"]
            stale = 0
        else:
            stale += 1

        name = f"epoch_{epoch:04d}"
        candidates = sorted(kept + [{"name": name, "epoch": epoch, "val_total": val["total"]}],
                            key=lambda c: (c["val_total"], c["epoch"]))
        saved = any(c["name"] == name for c in candidates[:config.top_k])
        for dropped in candidates[config.top_k:]:
            if dropped["name"] != name:
                shutil.rmtree(ckpt_root / dropped["name"], ignore_errors=True)
        kept = candidates[:config.top_k]
        epoch_meta = dict(meta, epoch=epoch, val_total=val["total"])
        if saved:
            bundle.save(ckpt_root / name, **epoch_meta)
        bundle.save(ckpt_root / "last", **epoch_meta)

        record = {
            "epoch": epoch,
            "lr_generator": lr_g,
            "lr_discriminator": lr_d,
            "train": _mean_breakdowns(g_rows),
            "train_discriminator": float(np.mean(d_vals)),
            "val": val,
            "improved": bool(improved),
            "checkpoint_saved": bool(saved),
        }
        log.append(record)
        with log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info("epoch %d  train %.5f  val %.5f%s", epoch, record["train"]["total"], val["total"],
                    "  *" if improved else "")
        if stale >= config.early_stop_patience:
            logger.info("early stop after %d epochs without improvement", stale)
            break

    for c in kept:
        c["path"] = str(ckpt_root / c["name"])
    summary = {
        "region": region,
        "epochs_run": epoch + 1,
        "top_k": kept,
        "last": {"name": "last", "epoch": epoch, "path": str(ckpt_root / "last")},
        "train_cases": [c.case_id for c in train_cases],
        "val_cases": [c.case_id for c in val_cases],
    }
    (out_dir / "checkpoints.json").write_text(json.dumps(summary, indent=2))
    return TrainResult(out_dir, kept, ckpt_root / "last", epoch + 1, log,
                       summary["train_cases"], summary["val_cases"])


# -- checkpoint selection ------------------------------------------------------


@dataclass
class CheckpointScore:
    name: str
    epoch: int
    mae: float
    psnr: float
    ssim: float
    path: Optional[str] = None
    ranks: Optional[Dict[str, float]] = None
    rank_sum: Optional[float] = None


def rank_checkpoints(scores: Sequence[CheckpointScore]) -> List[CheckpointScore]:
    """Fill in per-metric ranks (1 = best, ties share the lower rank) and rank sums."""
    mae = rankdata([s.mae for s in scores], method="min")
    psnr = rankdata([-s.psnr for s in scores], method="min")
    ssim = rankdata([-s.ssim for s in scores], method="min")
    for s, a, b, c in zip(scores, mae, psnr, ssim):
        s.ranks = {"mae": float(a), "psnr": float(b), "ssim": float(c)}
        s.rank_sum = float(a + b + c)
    return list(scores)


def select_checkpoint(scores: Sequence[CheckpointScore]) -> CheckpointScore:
    """Lowest rank sum; ties go to lower MAE, then the earlier epoch."""
    if not scores:
        raise ValueError("no checkpoints to select from")
    ranked = rank_checkpoints(list(scores))
    return min(ranked, key=lambda s: (s.rank_sum, s.mae, s.epoch))


def score_checkpoint(path, cases: Sequence, region: str, target_shape=None, base: str = "auto",
                     name: Optional[str] = None) -> CheckpointScore:
    """Mean MAE/PSNR/SSIM of the final sCT against the CT over ``cases``."""
    from .inference import predict_case
    from .metrics import mae, psnr, ssim

    bundle = ModelBundle.load(path)
    rows = []
    for case in cases:
        if not isinstance(case, PreprocessedCase):
            case = preprocess_case(case)
        if case.ct_hu is None:
            raise ValueError(f"validation case {case.case_id} has no CT")
        sct = predict_case(case, bundle, region, base=base, target_shape=target_shape)
        rows.append((mae(case.ct_hu, sct, case.mask), psnr(case.ct_hu, sct, case.mask),
                     ssim(case.ct_hu, sct, case.mask)))
    arr = np.asarray(rows, dtype=np.float64)
    return CheckpointScore(
        name=name or Path(path).name,
        epoch=int(bundle.metadata.get("epoch", -1)),
        mae=float(arr[:, 0].mean()),
        psnr=float(arr[:, 1].mean()),
        ssim=float(arr[:, 2].mean()),
        path=str(path),
    )


def select_from_training(result_dir, cases: Sequence, region: str, target_shape=None,
                         include_last: bool = True):
    """Score the retained checkpoints of a training run and write ``selected.json``.

    Returns (chosen score, all scores).
    """
    result_dir = Path(result_dir)
    summary = json.loads((result_dir / "checkpoints.json").read_text())
    entries = list(summary["top_k"])
    if include_last and all(e["epoch"] != summary["last"]["epoch"] for e in entries):
        entries.append(summary["last"])
    # resolve against result_dir so a moved or relatively-addressed run still works
    scores = [score_checkpoint(result_dir / "checkpoints" / e["name"], cases, region, target_shape, name=e["name"])
              for e in entries]
    chosen = select_checkpoint(scores)
    (result_dir / "selected.json").write_text(json.dumps(
        {"selected": asdict(chosen), "candidates": [asdict(s) for s in scores]}, indent=2))
    return chosen, scores
