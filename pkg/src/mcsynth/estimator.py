"""scikit-learn style wrapper around training, checkpoint selection and inference."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import generate_sct, predict_case, resolve_base
from .metrics import mae
from .nn_fabric import ModelBundle
from .preprocess import PreprocessedCase, check_region, preprocess_case
from .training import TrainConfig, select_from_training, train
from .validation import check_cases


class MultiChannelCycleGAN(BaseEstimator):
    """Site-specific multi-channel cycleGAN for CBCT to synthetic CT.

    ``fit`` trains on paired :class:`~mcsynth.preprocess.PatientCase` objects,
    keeps the top-k checkpoints by validation generator loss and picks the
    one with the best image-similarity rank sum on the validation cases.
    ``predict`` returns one masked sCT volume (HU) per case.

    Parameters
    ----------
    region : {"brain", "pelvis"}
    base_filters, n_residual_blocks : int
        Generator width and bottleneck depth.
    max_epochs, early_stop_patience, top_k : int
    lr_generator, lr_discriminator : float
    alpha, beta : float
        Cycle and identity loss weights.
    target_shape : tuple of int, optional
        Axial slice size; defaults to the region's standard size.
    val_fraction : float
    recombine_base : {"auto", "ch1", "fused"}
    fusion_end_to_end : bool
        Let the fusion loss gradient reach the CBCT->CT generator.
    seed : int
    work_dir : str, optional
        Where checkpoints and logs are written. A temporary directory is used
        (and discarded after fitting) when omitted.

    Attributes
    ----------
    bundle_ : ModelBundle
    checkpoint_ : str or None
    history_ : list of dict
        Per-epoch training log.
    selection_ : list of CheckpointScore
    """

    def __init__(self, region="brain", base_filters=64, n_residual_blocks=9, max_epochs=200,
                 lr_generator=1e-4, lr_discriminator=2e-4, early_stop_patience=20, top_k=5,
                 alpha=10.0, beta=5.0, target_shape=None, val_fraction=0.2, recombine_base="auto",
                 fusion_end_to_end=True, seed=0, work_dir=None):
        self.region = region
        self.base_filters = base_filters
        self.n_residual_blocks = n_residual_blocks
        self.max_epochs = max_epochs
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.early_stop_patience = early_stop_patience
        self.top_k = top_k
        self.alpha = alpha
        self.beta = beta
        self.target_shape = target_shape
        self.val_fraction = val_fraction
        self.recombine_base = recombine_base
        self.fusion_end_to_end = fusion_end_to_end
        self.seed = seed
        self.work_dir = work_dir

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            lr_generator=self.lr_generator,
            lr_discriminator=self.lr_discriminator,
            early_stop_patience=self.early_stop_patience,
            top_k=self.top_k,
            alpha=self.alpha,
            beta=self.beta,
            seed=self.seed,
            val_fraction=self.val_fraction,
            fusion_end_to_end=self.fusion_end_to_end,
            target_shape=self.target_shape,
            generator=dict(base_filters=self.base_filters, n_residual_blocks=self.n_residual_blocks),
        )

    def fit(self, cases, y=None):
        check_region(self.region)
        resolve_base(self.region, self.recombine_base)
        cases = check_cases(cases, self.region, require_ct=True)
        config = self.train_config()
        prepared = [c if isinstance(c, PreprocessedCase) else preprocess_case(c) for c in cases]

        tmp = None
        out_dir = self.work_dir
        if out_dir is None:
            tmp = tempfile.TemporaryDirectory(prefix="mcsynth-")
            out_dir = tmp.name
        try:
            result = train(config, prepared, self.region, out_dir)
            val = [c for c in prepared if c.case_id in set(result.val_cases)] or prepared
            chosen, scores = select_from_training(out_dir, val, self.region, self.target_shape)
            self.bundle_ = ModelBundle.load(chosen.path)
            self.checkpoint_ = None if tmp else chosen.path
            self.history_ = result.log
            self.selection_ = scores
        finally:
            if tmp is not None:
                tmp.cleanup()
        return self

    @classmethod
    def from_checkpoint(cls, path, region, **params):
        est = cls(region=region, **params)
        est.bundle_ = ModelBundle.load(path)
        est.checkpoint_ = str(path)
        est.history_ = []
        est.selection_ = []
        return est

    def generate(self, case):
        """All intermediate synthetic images (:class:`~mcsynth.inference.SctBundle`) for one case."""
        check_is_fitted(self, "bundle_")
        return generate_sct(case, self.bundle_, self.region, self.target_shape)

    def predict(self, cases):
        check_is_fitted(self, "bundle_")
        cases = check_cases(cases, self.region)
        return [
            predict_case(c, self.bundle_, self.region, self.recombine_base, self.target_shape)
            for c in cases
        ]

    def score(self, cases, y=None):
        """Negative mean masked MAE (HU) against each case's CT; higher is better."""
        cases = check_cases(cases, self.region, require_ct=True)
        preds = self.predict(cases)
        errs = []
        for case, sct in zip(cases, preds):
            if not isinstance(case, PreprocessedCase):
                case = preprocess_case(case, regenerate=False)
            errs.append(mae(case.ct_hu, sct, case.mask))
        return -float(np.mean(errs))
