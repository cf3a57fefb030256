"""End-to-end run: phantoms or dataset -> preprocess -> train -> select -> infer -> evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .inference import predict_case
from .metrics import MetricsReport, evaluate_case, metric_config
from .nn_fabric import ModelBundle
from .phantom import generate_dataset
from .preprocess import load_dataset, preprocess_case
from .training import TrainConfig, select_from_training, train
from .volume_core import write_volume

logger = logging.getLogger(__name__)

DEFAULT_PIPELINE = {
    "seed": 0,
    "regions": ["brain", "pelvis"],
    "data": None,
    "phantom": {"n_cases": 24, "size": [16, 64, 64]},
    "n_test": 4,
    "recombine_base": "auto",
    "train": {},
}


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def resolve_config(config: Optional[dict]) -> dict:
    merged = json.loads(json.dumps(DEFAULT_PIPELINE))
    for key, value in (config or {}).items():
        if key not in merged:
            raise ValueError(f"unknown pipeline config key {key!r}")
        if isinstance(value, dict) and isinstance(merged[key], dict):
            merged[key].update(value)
        else:
            merged[key] = value
    if merged["n_test"] < 1:
        raise ValueError("n_test must be >= 1")
    return merged


@dataclass
class PipelineResult:
    report: MetricsReport
    baseline: MetricsReport
    selections: Dict[str, dict] = field(default_factory=dict)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(f"stage '{name}' failed: {exc}") from exc


def run_pipeline(config: Optional[dict], out_dir) -> PipelineResult:
    """Run every stage for each configured region and write ``report.json``.

    The report is a pure function of the resolved config (no paths or
    timestamps), so identical configs reproduce it byte for byte.
    """
    cfg = resolve_config(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    train_cfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    target = train_cfg.target_shape

    rows, base_rows, selections = [], [], {}
    for region in cfg["regions"]:
        if cfg["data"] is None:
            data_root = out_dir / "data"
            if not (data_root / region / "phantom_manifest.json").exists():
                _stage("phantom", generate_dataset, cfg["phantom"]["n_cases"], region, seed, data_root,
                       shape=tuple(cfg["phantom"]["size"]))
        else:
            data_root = Path(cfg["data"])
        cases = _stage("load", load_dataset, data_root, region)
        if len(cases) <= cfg["n_test"]:
            raise StageError(f"stage 'load' failed: {len(cases)} {region} cases, need > n_test")
        fit_cases, test_cases = cases[:-cfg["n_test"]], cases[-cfg["n_test"]:]

        prepared = _stage("preprocess", lambda: [preprocess_case(c) for c in fit_cases])
        model_dir = out_dir / "models" / region
        result = _stage("train", train, train_cfg, prepared, region, model_dir)
        val = [c for c in prepared if c.case_id in set(result.val_cases)] or prepared
        chosen, _ = _stage("select", select_from_training, model_dir, val, region, target)
        selections[region] = {"name": chosen.name, "epoch": chosen.epoch, "rank_sum": chosen.rank_sum}
        bundle = ModelBundle.load(chosen.path)

        for case in test_cases:
            pc = _stage("preprocess", preprocess_case, case, regenerate=False)
            sct = _stage("infer", predict_case, pc, bundle, region, cfg["recombine_base"], target)
            write_volume(sct, out_dir / "predictions" / region / case.case_id / "sct")
            rows.append(_stage("evaluate", evaluate_case, case.case_id, region, case.ct, sct, case.mask))
            base_rows.append(evaluate_case(case.case_id, region, case.ct, pc.cbct_hu, case.mask))

    meta = {**metric_config(), "pipeline_config_hash": config_hash(cfg), "selected": selections}
    report = MetricsReport(rows, config=meta)
    report.recompute_aggregate()
    baseline = MetricsReport(base_rows, config={**metric_config(), "baseline": "range-corrected, masked CBCT vs CT"})
    baseline.recompute_aggregate()
    report.write(out_dir / "report.json", out_dir / "report.csv")
    baseline.write(out_dir / "baseline_report.json")
    return PipelineResult(report, baseline, selections)


def end_to_end(config: Optional[dict], out_dir) -> MetricsReport:
    return run_pipeline(config, out_dir).report
