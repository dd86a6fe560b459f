"""
cli.py — Command-line surface.

Commands:
  prepare     materialise the dataset, a split file, its config and the
              extended unlabeled pool
  train       train RealMix on a prepared split
  evaluate    test error of a checkpoint (EMA parameters unless --raw)
  experiment  labels | mismatch | ablation | transfer protocol
  report      re-emit CSV / HTML from a stored report.json

Exit codes: 0 success, 2 validation error, 3 runtime abort.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import config as defaults
from modules.config_data import (
    Config,
    apply_overrides,
    config_hash,
    load_config,
    load_dataset,
    load_split,
    make_label_split,
    make_mismatch_split,
    save_config,
    save_dataset,
    save_split,
    split_arrays,
    subset_dataset,
)
from modules.augmentation import cached_pool_path, load_or_extend
from modules.demo_data import make_synthetic_dataset
from modules.errors import ConfigError, DataError, RealMixError, TrainingAborted
from modules.experiments import (
    ExperimentData,
    emit_report,
    load_report,
    run_ablation,
    run_label_sweep,
    run_mismatch_sweep,
    run_transfer,
)
from modules.model_training import (
    evaluate_ema,
    evaluate_raw,
    latest_checkpoint,
    load_checkpoint,
    pool_source_checksum,
    train,
)
from modules.tensor_io import read_meta, sha256_bytes

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s | %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    level = logging.WARNING if verbosity < 0 else logging.DEBUG if verbosity > 0 else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# ── Run manifest ─────────────────────────────────────────────────────

@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config_hash: Optional[str]
    out_dir: str
    started: str
    finished: Optional[str] = None
    exit_status: Optional[int] = None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(manifest: RunManifest) -> Path:
    path = Path(manifest.out_dir) / defaults.RUN_MANIFEST_FILE
    _write_atomic(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


# ── Shared helpers ───────────────────────────────────────────────────

def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return apply_overrides(cfg, args.override or [])


def _load_data(args) -> ExperimentData:
    """Training and test parts from --data, or the synthetic desk dataset."""
    if getattr(args, "synthetic", False):
        train_set, test_set = make_synthetic_dataset(seed=args.data_seed)
        return ExperimentData(train_set, test_set)
    if not args.data:
        raise DataError("pass --data DIR or --synthetic")
    return ExperimentData(load_dataset(args.data, "train"), load_dataset(args.data, "test"))


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("arguments", f"expected a comma-separated list of integers, got {text!r}")


def _guard_results_dir(out: Path, marker: str, force: bool) -> None:
    """Refuse to reuse a directory that already holds finished results."""
    if (out / marker).exists() and not force:
        raise DataError(f"{out / marker} already exists; pass --force to reuse {out}")


def _write_or_verify(path: Path, write, force: bool) -> Path:
    """Write an artifact; an existing one must be identical unless --force."""
    if not path.exists() or force:
        return write(path)
    tmp = path.with_name(path.name + ".new")
    write(tmp)
    same = tmp.read_bytes() == path.read_bytes()
    tmp.unlink()
    if not same:
        raise DataError(f"{path} exists with different content; pass --force to overwrite")
    return path


def _file_checksum(path: Path) -> str:
    return sha256_bytes(path.read_bytes())


# ── Commands ─────────────────────────────────────────────────────────

def cmd_prepare(args) -> int:
    out = Path(args.out)
    cfg = _resolve_config(args)

    data_dir = Path(args.data) if args.data else out / "data"
    if args.synthetic:
        train_set, test_set = make_synthetic_dataset(seed=args.data_seed)
        if not (data_dir / defaults.MANIFEST_FILE).exists() or args.force:
            save_dataset(train_set, data_dir, "train")
            save_dataset(test_set, data_dir, "test")
    train_set = load_dataset(data_dir, "train")
    print(f"dataset      {data_dir}  sha256={train_set.checksum()}")

    if args.mismatch is not None:
        labeled_classes = _int_list(args.labeled_classes) or sorted(
            max(train_set.class_groups.values(), key=len) if train_set.class_groups
            else range(train_set.num_classes - defaults.MISMATCH_UNLABELED_CLASSES))
        split = make_mismatch_split(train_set, labeled_classes, args.labels_per_class, args.mismatch,
                                    cfg.seed, args.unlabeled_per_class)
        gamma = args.gamma if args.gamma is not None else defaults.MISMATCH_GAMMA[args.mismatch]
        cfg = cfg.replace(gamma=gamma, num_classes=len(labeled_classes))
    else:
        n_labels = args.labels or defaults.DEFAULT_LABEL_COUNTS[0]
        split = make_label_split(train_set, n_labels, cfg.seed)
        cfg = cfg.replace(num_classes=train_set.num_classes)
        if args.gamma is not None:
            cfg = cfg.replace(gamma=args.gamma)
    if args.extend_copies is not None:
        cfg = cfg.replace(extend_copies=args.extend_copies)
    cfg = cfg.replace(cache_dir=cfg.cache_dir or str(out / "cache"))

    split_path = _write_or_verify(out / "split.json", lambda p: save_split(split, p), args.force)
    config_path = _write_or_verify(out / "config.json", lambda p: save_config(cfg, p), args.force)
    print(f"split        {split_path}  labeled={len(split.labeled_indices)} "
          f"unlabeled={len(split.unlabeled_indices)}  sha256={_file_checksum(split_path)}")
    print(f"config       {config_path}  hash={config_hash(cfg)}")

    if cfg.use_unlabeled and split.unlabeled_indices:
        _, _, x_u = split_arrays(train_set, split)
        source = pool_source_checksum(train_set, split)
        pool = load_or_extend(x_u, cfg.extend_copies, cfg.extend_policy, cfg.seed, source,
                              cfg.cache_dir, cfg.workers)
        pool_path = cached_pool_path(cfg.cache_dir, source, cfg.extend_policy, cfg.extend_copies, cfg.seed)
        print(f"pool         {pool_path}  rows={len(pool)}  sha256={read_meta(pool_path)['sha256']}")
    return defaults.EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    if not args.resume:
        _guard_results_dir(out, defaults.METRICS_CSV, args.force)
    cfg = _resolve_config(args)
    data = _load_data(args)
    split = load_split(args.split)

    state, history = train(cfg, split, data.train, data.test, run_dir=out, resume=args.resume,
                           progress=not args.no_progress)
    error = history[-1]["test_error_ema"] if history else evaluate_ema(
        state, subset_dataset(data.test, split.classes), cfg.eval_batch_size)
    result = {"step": state.step, "test_error_ema": error, "config_hash": state.config_hash}
    _write_atomic(out / "result.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"test_error_ema={100 * error:.2f}%")
    return defaults.EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    data = _load_data(args)
    split = load_split(args.split) if args.split else None
    classes = split.classes if split is not None else None
    test = subset_dataset(data.test, classes)

    path = Path(args.checkpoint)
    if path.is_dir():
        path = latest_checkpoint(path)
        if path is None:
            raise DataError(f"no checkpoint under {args.checkpoint}")
    state, _ = load_checkpoint(path, cfg, data.train.image_shape)
    error = evaluate_raw(state, test, cfg.eval_batch_size) if args.raw else evaluate_ema(
        state, test, cfg.eval_batch_size)
    mode = "raw" if args.raw else "ema"
    print(f"step={state.step} test_error_{mode}={100 * error:.2f}%")
    return defaults.EXIT_OK


def cmd_experiment(args) -> int:
    out = Path(args.out)
    _guard_results_dir(out, "report.json", args.force)
    cfg = _resolve_config(args)
    data = _load_data(args)
    seeds = _int_list(args.seeds) or ([args.seed] if args.seed is not None else list(defaults.DEFAULT_SEEDS))
    run_root = out / "runs" if args.keep_runs else None

    if args.kind == "labels":
        report = run_label_sweep(cfg, data, _int_list(args.counts) or list(defaults.DEFAULT_LABEL_COUNTS),
                                 seeds, jobs=args.jobs, run_root=run_root)
    elif args.kind == "mismatch":
        report = run_mismatch_sweep(
            cfg, data, _int_list(args.levels) or list(defaults.MISMATCH_LEVELS), seeds,
            labeled_classes=_int_list(args.labeled_classes),
            labels_per_class=args.labels_per_class,
            unlabeled_per_class=args.unlabeled_per_class,
            gamma_zero_control=not args.no_control,
            jobs=args.jobs, run_root=run_root)
    elif args.kind == "ablation":
        variants = [v for v in (args.variants or "").split(",") if v]
        if args.mismatch is not None:
            protocol = {"kind": "mismatch", "mismatch": args.mismatch,
                        "labels_per_class": args.labels_per_class,
                        "labeled_classes": _int_list(args.labeled_classes),
                        "unlabeled_per_class": args.unlabeled_per_class}
        else:
            protocol = {"kind": "labels", "labels": (_int_list(args.counts) or [25 * data.train.num_classes])[0]}
        report = run_ablation(cfg, data, variants, seeds, protocol, jobs=args.jobs, run_root=run_root)
    else:
        source = _int_list(args.source_classes)
        target = _int_list(args.target_classes)
        if not source or not target:
            raise ConfigError("arguments", "transfer needs --source-classes and --target-classes")
        counts = _int_list(args.counts)
        report = run_transfer(cfg, data, source, target, seeds, n_labels=counts[0] if counts else None,
                              pretrain_steps=args.pretrain_steps, jobs=args.jobs, run_root=run_root)

    paths = emit_report(report, out)
    for result in report.conditions:
        std = "" if result.std is None else f" ± {100 * result.std:.2f}"
        print(f"{result.arm:<20} {json.dumps(result.condition, sort_keys=True):<40} "
              f"{100 * result.mean:.2f}%{std}")
    print(f"report       {paths['json']}")
    return defaults.EXIT_OK


def cmd_report(args) -> int:
    report = load_report(args.report)
    source = Path(args.report)
    out = Path(args.out) if args.out else (source.parent if source.is_file() else source)
    for name, path in emit_report(report, out).items():
        print(f"{name:<12} {path}")
    return defaults.EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


# ── Argument parsing ─────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--out", help="output directory (default: results)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable (dotted keys allowed)")
    common.add_argument("--force", action="store_true", help="reuse an existing results directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (train_*/test_* tensors + manifest.json)")
    data.add_argument("--synthetic", action="store_true", help="use the synthetic desk dataset")
    data.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--labeled-classes", help="comma-separated labeled class ids (mismatch)")
    split.add_argument("--labels-per-class", type=int, default=defaults.DEFAULT_MISMATCH_LABELS_PER_CLASS)
    split.add_argument("--unlabeled-per-class", type=int)

    parser = argparse.ArgumentParser(prog="realmix", description="Semi-supervised training with RealMix.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common, data, split], help="materialise splits and pool")
    p.add_argument("--labels", type=int, help="total labeled samples, class-balanced")
    p.add_argument("--mismatch", type=int, choices=defaults.MISMATCH_LEVELS,
                   help="percent of unlabeled classes outside the labeled set")
    p.add_argument("--gamma", type=float, help="OOD mask fraction stored in the emitted config")
    p.add_argument("--extend-copies", type=int)

    p = sub.add_parser("train", parents=[common, data], help="train on a prepared split")
    p.add_argument("--split", required=True, help="split.json from prepare")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("evaluate", parents=[common, data], help="test error of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--split", help="split.json; restricts the test set to its classes")
    p.add_argument("--raw", action="store_true", help="use the raw parameters instead of the EMA")

    p = sub.add_parser("experiment", parents=[common, data, split], help="run an experiment protocol")
    p.add_argument("kind", choices=("labels", "mismatch", "ablation", "transfer"))
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--counts", help="comma-separated label counts")
    p.add_argument("--levels", help="comma-separated mismatch percentages")
    p.add_argument("--mismatch", type=int, choices=defaults.MISMATCH_LEVELS, help="ablation at this mismatch level")
    p.add_argument("--variants", help="comma-separated ablation presets")
    p.add_argument("--no-control", action="store_true", help="skip the γ=0 control arm")
    p.add_argument("--source-classes")
    p.add_argument("--target-classes")
    p.add_argument("--pretrain-steps", type=int, default=defaults.DEFAULT_PRETRAIN_STEPS)
    p.add_argument("--keep-runs", action="store_true", help="keep per-arm metrics and checkpoints")

    p = sub.add_parser("report", parents=[common], help="re-emit tables and figure from report.json")
    p.add_argument("report", help="report.json or the directory holding it")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(-1 if args.quiet else args.verbose)
    if args.out is None and args.command != "report":
        args.out = "results"

    manifest = None
    status = defaults.EXIT_RUNTIME
    try:
        if args.command != "report":
            cfg_hash = config_hash(_resolve_config(args))
            manifest = RunManifest(args.command, args.config, cfg_hash, str(args.out), _now())
            write_manifest(manifest)
        status = COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        logger.error("validation_failed | command=%s | error=%s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        status = defaults.EXIT_VALIDATION
    except TrainingAborted as exc:
        logger.error("training_aborted | step=%d | last_checkpoint=%s", exc.step, exc.last_checkpoint)
        print(f"aborted: {exc}", file=sys.stderr)
        status = defaults.EXIT_RUNTIME
    except RealMixError as exc:
        logger.error("runtime_error | command=%s | error=%s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        status = defaults.EXIT_RUNTIME
    finally:
        if manifest is not None:
            manifest.finished = _now()
            manifest.exit_status = status
            write_manifest(manifest)
    return status
