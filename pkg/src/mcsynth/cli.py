"""``mcsynth`` command line: phantom, preprocess, train, infer, evaluate, report, run.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__

logger = logging.getLogger("mcsynth")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config_hash: str
    seed: Optional[int]
    inputs: dict
    outputs: dict
    versions: dict = field(default_factory=dict)
    parent: Optional[str] = None
    started: str = ""
    finished: str = ""

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _versions():
    import scipy
    import torch

    return {"mcsynth": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__, "python": platform.python_version()}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _shape(text, n):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
    if len(vals) != n or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected {n} positive integers, got {text!r}")
    return vals


def _manifest(args, argv, config, inputs, outputs, parent=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        config_hash=_hash(config),
        seed=getattr(args, "seed", None),
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        versions=_versions(),
        parent=str(parent) if parent else None,
        started=args._started,
        finished=_now(),
    )


# -- subcommands -----------------------------------------------------------------


def cmd_phantom(args, argv):
    from .phantom import generate_dataset

    if args.seed is None:
        args.seed = 0

    manifest = generate_dataset(args.n, args.region, args.seed, args.out, shape=args.size)
    config = {"n": args.n, "region": args.region, "seed": args.seed, "size": args.size}
    _manifest(args, argv, config, {}, {"dataset": args.out, "phantom_manifest": manifest}).write(
        Path(args.out) / args.region / MANIFEST_NAME)
    logger.info("wrote %d %s phantoms to %s", args.n, args.region, args.out)


def cmd_preprocess(args, argv):
    from .preprocess import load_dataset, preprocess_case, write_preprocessed

    out = Path(args.out)
    entries = []
    for case in load_dataset(args.data, args.region):
        pc = preprocess_case(case, regenerate=not args.no_mask_regen)
        entries.append(write_preprocessed(pc, out, target_shape=args.size))
    (out / "manifest.json").write_text(json.dumps({"region": args.region, "cases": entries}, indent=2))
    config = {"region": args.region, "size": args.size, "regenerate": not args.no_mask_regen}
    _manifest(args, argv, config, {"data": args.data}, {"cache": out}).write(out / MANIFEST_NAME)
    logger.info("preprocessed %d cases into %s", len(entries), out)


def _load_train_config(args):
    from .training import TrainConfig

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    return TrainConfig.from_dict(raw)


def cmd_train(args, argv):
    from .preprocess import load_dataset, preprocess_case
    from .training import select_from_training, train

    config = _load_train_config(args)
    cases = [preprocess_case(c) for c in load_dataset(args.data, args.region)]
    result = train(config, cases, args.region, args.out)
    val = [c for c in cases if c.case_id in set(result.val_cases)] or cases
    chosen, _ = select_from_training(args.out, val, args.region, config.target_shape)
    logger.info("selected %s (rank sum %.1f)", chosen.name, chosen.rank_sum)
    _manifest(args, argv, config.to_dict(), {"data": args.data, "config": args.config},
              {"checkpoints": Path(args.out) / "checkpoints", "selected": chosen.path,
               "log": Path(args.out) / "train_log.jsonl"}).write(Path(args.out) / MANIFEST_NAME)


def resolve_checkpoint(path) -> Path:
    """A bundle directory, or a training output whose ``selected.json`` names one."""
    path = Path(path)
    if (path / "bundle.json").exists():
        return path
    selected = path / "selected.json"
    if selected.exists():
        name = json.loads(selected.read_text())["selected"]["name"]
        return path / "checkpoints" / name
    raise FileNotFoundError(f"{path} is neither a checkpoint nor a training output")


def _case_dirs(path: Path, marker: str):
    if (path / f"{marker}.json").exists():
        return [path]
    found = sorted(p.parent for p in path.rglob(f"{marker}.json"))
    if not found:
        raise FileNotFoundError(f"no {marker}.json under {path}")
    return found


def cmd_infer(args, argv):
    from .inference import predict_case, write_intermediates
    from .nn_fabric import ModelBundle
    from .preprocess import load_case, preprocess_case
    from .volume_core import write_volume

    ckpt = resolve_checkpoint(args.checkpoint)
    bundle = ModelBundle.load(ckpt)
    target = args.size
    if target is None:
        ts = bundle.metadata.get("train_config", {}).get("target_shape")
        target = tuple(ts) if ts else None
    case_dirs = _case_dirs(Path(args.case), "cbct")
    single = len(case_dirs) == 1 and case_dirs[0] == Path(args.case)
    outputs = {}
    for case_dir in case_dirs:
        case = load_case(case_dir, args.region)
        pc = preprocess_case(case, regenerate=False)
        sct, sct_bundle = predict_case(pc, bundle, args.region, args.base, target, return_bundle=True)
        dest = Path(args.out) if single else Path(args.out) / case.case_id
        write_volume(sct, dest / "sct")
        if args.emit_intermediates:
            write_intermediates(sct_bundle, dest)
        outputs[case.case_id] = dest / "sct.json"
    parent = Path(args.checkpoint) / MANIFEST_NAME
    _manifest(args, argv, {"base": args.base, "region": args.region, "checkpoint": str(ckpt)},
              {"case": args.case, "checkpoint": ckpt}, outputs,
              parent=parent if parent.exists() else None).write(Path(args.out) / MANIFEST_NAME)
    logger.info("wrote %d sCT volume(s) to %s", len(outputs), args.out)


def _region_of(path: Path, fallback):
    for part in reversed(path.parts):
        if part in ("brain", "pelvis"):
            return part
    return fallback or "unknown"


def cmd_evaluate(args, argv):
    from .metrics import GammaParams, MetricsReport, evaluate_case, gamma_pass_rate, metric_config
    from .volume_core import read_volume

    gt_dirs = {p.name: p for p in _case_dirs(Path(args.gt), "ct")}
    pred_dirs = {p.name: p for p in _case_dirs(Path(args.pred), "sct")}
    mask_dirs = {p.name: p for p in _case_dirs(Path(args.mask), "mask")}
    if len(pred_dirs) == 1 and len(gt_dirs) == 1:
        only = next(iter(gt_dirs))
        pred_dirs = {only: next(iter(pred_dirs.values()))}
        mask_dirs = {only: next(iter(mask_dirs.values()))}
    rows = []
    for case_id in sorted(pred_dirs):
        if case_id not in gt_dirs or case_id not in mask_dirs:
            raise FileNotFoundError(f"case {case_id}: missing ground truth or mask")
        gt = read_volume(gt_dirs[case_id] / "ct")
        pred = read_volume(pred_dirs[case_id] / "sct")
        mask = read_volume(mask_dirs[case_id] / "mask")
        rows.append(evaluate_case(case_id, _region_of(gt_dirs[case_id], args.region), gt, pred, mask))
    report = MetricsReport(rows, config=metric_config())
    report.recompute_aggregate()
    if args.gamma:
        params = GammaParams(args.dose_diff, args.dta, args.cutoff)
        rate, _ = gamma_pass_rate(read_volume(args.gamma[0]), read_volume(args.gamma[1]), params)
        report.gamma = {"pass_rate_pct": rate, **asdict(params)}
    report.write(args.out, args.csv)
    _manifest(args, argv, {"gamma": args.gamma}, {"gt": args.gt, "pred": args.pred, "mask": args.mask},
              {"report": args.out}).write(Path(args.out).with_suffix(".manifest.json"))
    logger.info("evaluated %d case(s): %s", len(rows), args.out)


def cmd_report(args, argv):
    from .metrics import MetricsReport

    rows, config = [], {}
    for path in args.inputs:
        rep = MetricsReport.from_dict(json.loads(Path(path).read_text()))
        rows.extend(rep.per_case)
        config = config or rep.config
    merged = MetricsReport(rows, config=config)
    merged.recompute_aggregate()
    merged.write(args.out, args.csv)
    for name, agg in merged.aggregate.items():
        print(f"{name:>8s}  MAE {agg['mae']['mean']:.2f} ± {agg['mae']['std']:.2f} HU  "
              f"PSNR {agg['psnr']['mean']:.2f} ± {agg['psnr']['std']:.2f} dB  "
              f"SSIM {agg['ssim']['mean']:.3f} ± {agg['ssim']['std']:.3f}")


def cmd_run(args, argv):
    from .pipeline import resolve_config, run_pipeline

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    result = run_pipeline(raw, args.out)
    _manifest(args, argv, resolve_config(raw), {"config": args.config},
              {"report": Path(args.out) / "report.json"}).write(Path(args.out) / MANIFEST_NAME)
    print(result.report.to_json())


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p, default):
        p.add_argument("--seed", type=int, default=default, help="random seed (recorded in the run manifest)")
        p.add_argument("--verbose", "-v", action="store_true", default=default or False, help="debug logging")
        p.add_argument("--threads", type=int, default=default, help="torch intra-op threads")

    parser = _Parser(prog="mcsynth", description="Multi-channel cycleGAN CBCT-to-sCT pipeline")
    global_flags(parser, None)
    # repeated after the subcommand without defaults, so they don't clobber the top-level values
    common = _Parser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    region = dict(choices=("brain", "pelvis"), required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate phantom cases")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--region", **region)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=lambda s: _shape(s, 3), default=None, help="z,y,x")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="write preprocessed slice cache")
    p.add_argument("--region", **region)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=lambda s: _shape(s, 2), default=None, help="y,x")
    p.add_argument("--no-mask-regen", action="store_true", help="keep the supplied masks")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a site-specific model")
    p.add_argument("--region", **region)
    p.add_argument("--data", required=True, help="dataset root holding <region>/<case>/ folders")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="training config JSON (see docs/train_config.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="generate sCTs")
    p.add_argument("--checkpoint", required=True, help="model bundle or training output directory")
    p.add_argument("--region", **region)
    p.add_argument("--case", required=True, help="one case directory or a directory of cases")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-intermediates", action="store_true", help="also write the denormalized channels and fused image")
    p.add_argument("--base", choices=("auto", "ch1", "fused"), default="auto", help="recombination base image")
    p.add_argument("--size", type=lambda s: _shape(s, 2), default=None, help="y,x")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="compute image metrics")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--region", choices=("brain", "pelvis"), default=None)
    p.add_argument("--gamma", nargs=2, metavar=("REF_DOSE", "EVAL_DOSE"), default=None, help="also compute the gamma pass rate of two dose volumes")
    p.add_argument("--dose-diff", type=float, default=2.0, help="percent of max reference dose")
    p.add_argument("--dta", type=float, default=2.0, help="distance to agreement, mm")
    p.add_argument("--cutoff", type=float, default=10.0, help="low-dose cutoff, percent of max")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="merge metric reports")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", parents=[common], help="end-to-end pipeline")
    p.add_argument("--config", default=None, help="pipeline config JSON (see docs/pipeline_config.json)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    args._started = _now()
    try:
        args.func(args, argv)
    except (ValueError, TypeError, FileNotFoundError, FileExistsError, KeyError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
