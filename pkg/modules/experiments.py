"""
experiments.py — Desk-scale experiment protocols and their reports.

  • run_label_sweep      error vs number of labels, with labeled-only and
                         fully-supervised baselines
  • run_mismatch_sweep   error vs fraction of out-of-set unlabeled classes,
                         γ chosen per level, optional γ=0 control
  • run_ablation         named config deltas against an unmodified control
  • run_transfer         supervised pretraining on source classes, then
                         fine-tuning / RealMix on target classes

All arms of one experiment share splits and seeds; only the declared delta
differs.  Arms are independent, so they may run in parallel processes;
report assembly happens here, in order.
"""

import json
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import torch

from config import (
    ABLATION_PRESETS,
    DEFAULT_MISMATCH_LABELS_PER_CLASS,
    DEFAULT_PRETRAIN_STEPS,
    MISMATCH_GAMMA,
    REPORT_SCHEMA_VERSION,
)
from modules.config_data import (
    Config,
    Dataset,
    SplitSpec,
    apply_overrides,
    config_hash,
    make_label_split,
    make_mismatch_split,
    subset_dataset,
)
from modules.errors import ConfigError, DataError
from modules.model_training import evaluate_ema, init_state, train
from modules.tensor_io import sha256_bytes

logger = logging.getLogger(__name__)


# ── Data model ───────────────────────────────────────────────────────

@dataclass
class ConditionResult:
    """One arm under one condition, over all seeds."""
    condition: Dict[str, object]
    arm: str
    seeds: List[int]
    errors: List[float]
    mean: float
    std: Optional[float]                 # only with two or more seeds
    unlabeled_batches: List[int] = field(default_factory=list)


@dataclass
class ExperimentReport:
    kind: str
    conditions: List[ConditionResult]
    baseline_error: Optional[float]
    config_hash: str
    dataset_checksum: str
    seeds: List[int]
    wall_clock_seconds: float
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        data = dict(data)
        data["conditions"] = [ConditionResult(**c) for c in data["conditions"]]
        return cls(**data)

    def find(self, arm: str, **condition) -> ConditionResult:
        for result in self.conditions:
            if result.arm == arm and all(result.condition.get(k) == v for k, v in condition.items()):
                return result
        raise KeyError(f"no result for arm={arm} condition={condition}")


@dataclass
class ExperimentData:
    train: Dataset
    test: Dataset


@dataclass
class ArmSpec:
    """Everything one training run needs; picklable for worker processes."""
    arm: str
    condition: Dict[str, object]
    seed: int
    config: Config
    split: SplitSpec
    init_from: Optional[str] = None          # arm key of a pretraining run
    keep_weights: bool = False

    def key(self) -> str:
        split = json.dumps([self.split.labeled_indices, self.split.unlabeled_indices, self.split.classes])
        blob = "|".join([config_hash(self.config), sha256_bytes(split.encode()), self.init_from or ""])
        return sha256_bytes(blob.encode())[:20]


@dataclass
class ArmOutcome:
    error: float
    unlabeled_batches: int
    weights: Optional[Dict[str, torch.Tensor]] = None


# ── Arm execution ────────────────────────────────────────────────────

def summarize(errors: Sequence[float]) -> Tuple[float, Optional[float]]:
    mean = float(np.mean(errors))
    std = float(np.std(errors, ddof=1)) if len(errors) >= 2 else None
    return mean, std


def run_arm(spec: ArmSpec, data: ExperimentData, init_weights=None, run_root=None) -> ArmOutcome:
    run_dir = None
    if run_root is not None:
        run_dir = Path(run_root) / f"{spec.arm}-{spec.key()}"
    state, _ = train(spec.config, spec.split, data.train, run_dir=run_dir, init_from=init_weights,
                     resume=run_dir is not None)
    test = subset_dataset(data.test, spec.split.classes)
    error = evaluate_ema(state, test, spec.config.eval_batch_size)
    weights = None
    if spec.keep_weights:
        weights = {k: v.detach().cpu().clone() for k, v in state.ema_model.state_dict().items()}
    logger.info("arm_done | arm=%s | condition=%s | seed=%d | error=%.4f",
                spec.arm, spec.condition, spec.seed, error)
    return ArmOutcome(error, state.unlabeled_batches_touched, weights)


def _run_all(specs: List[ArmSpec], data: ExperimentData, jobs: int, run_root=None,
             weights: Optional[Dict[str, dict]] = None) -> Dict[str, ArmOutcome]:
    """Run each distinct arm once; identical (config, split, init) arms share a result."""
    unique: Dict[str, ArmSpec] = {}
    for spec in specs:
        unique.setdefault(spec.key(), spec)
    weights = weights or {}
    keys = list(unique)
    inits = [weights.get(unique[k].init_from) if unique[k].init_from else None for k in keys]

    if jobs > 1 and len(keys) > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            futures = [pool.submit(run_arm, unique[k], data, init, run_root) for k, init in zip(keys, inits)]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [run_arm(unique[k], data, init, run_root) for k, init in zip(keys, inits)]
    return dict(zip(keys, outcomes))


def _assemble(specs: List[ArmSpec], outcomes: Dict[str, ArmOutcome]) -> List[ConditionResult]:
    grouped: Dict[str, ConditionResult] = {}
    for spec in specs:
        gkey = json.dumps([spec.arm, spec.condition], sort_keys=True)
        outcome = outcomes[spec.key()]
        if gkey not in grouped:
            grouped[gkey] = ConditionResult(dict(spec.condition), spec.arm, [], [], math.nan, None)
        result = grouped[gkey]
        result.seeds.append(spec.seed)
        result.errors.append(outcome.error)
        result.unlabeled_batches.append(outcome.unlabeled_batches)
    for result in grouped.values():
        result.mean, result.std = summarize(result.errors)
    return list(grouped.values())


def _report(kind, results, baseline, base: Config, data: ExperimentData, seeds, started) -> ExperimentReport:
    return ExperimentReport(
        kind=kind,
        conditions=results,
        baseline_error=baseline,
        config_hash=config_hash(base),
        dataset_checksum=data.train.checksum(),
        seeds=list(seeds),
        wall_clock_seconds=round(time.perf_counter() - started, 3),
    )


def _baseline(results: List[ConditionResult], arm: str) -> Optional[float]:
    errors = [e for r in results if r.arm == arm for e in r.errors]
    return float(np.mean(errors)) if errors else None


def _all_labeled(dataset: Dataset, seed: int, classes=None) -> SplitSpec:
    if classes is None:
        indices = list(range(len(dataset)))
    else:
        indices = [int(i) for i in np.flatnonzero(np.isin(dataset.labels, list(classes)))]
    return SplitSpec(indices, [], seed, None if classes is None else list(classes), dataset.checksum())


def _class_label_split(dataset: Dataset, classes: Sequence[int], n_labels: int, seed: int) -> SplitSpec:
    """Class-balanced label split restricted to *classes*, in full-dataset indices."""
    members = np.flatnonzero(np.isin(dataset.labels, list(classes)))
    sub = subset_dataset(dataset, classes)
    split = make_label_split(sub, n_labels, seed)
    return SplitSpec(
        labeled_indices=[int(members[i]) for i in split.labeled_indices],
        unlabeled_indices=[int(members[i]) for i in split.unlabeled_indices],
        seed=seed,
        classes=list(classes),
        source_checksum=dataset.checksum(),
    )


# ── Protocols ────────────────────────────────────────────────────────

def run_label_sweep(base: Config, data: ExperimentData, label_counts: Sequence[int],
                    seeds: Sequence[int], jobs: int = 1, run_root=None) -> ExperimentReport:
    """RealMix and a labeled-only baseline per label count; fully-supervised baseline."""
    started = time.perf_counter()
    k = data.train.num_classes
    base = base.replace(num_classes=k)
    for count in label_counts:
        if count >= len(data.train) or count % k:
            raise DataError(f"label count {count} is infeasible for {len(data.train)} samples / {k} classes")

    specs = []
    for seed in seeds:
        cfg = base.replace(seed=seed)
        supervised = cfg.replace(use_unlabeled=False)
        specs.append(ArmSpec("fully_supervised", {"labels": len(data.train)}, seed, supervised,
                             _all_labeled(data.train, seed)))
        for count in label_counts:
            split = make_label_split(data.train, count, seed)
            specs.append(ArmSpec("realmix", {"labels": count}, seed, cfg, split))
            specs.append(ArmSpec("labeled_only", {"labels": count}, seed, supervised, split))

    results = _assemble(specs, _run_all(specs, data, jobs, run_root))
    return _report("labels", results, _baseline(results, "fully_supervised"), base, data, seeds, started)


def _default_labeled_classes(dataset: Dataset) -> List[int]:
    if dataset.class_groups:
        return sorted(max(dataset.class_groups.values(), key=len))
    return list(range(dataset.num_classes - 4))


def run_mismatch_sweep(
    base: Config,
    data: ExperimentData,
    mismatch_levels: Sequence[int],
    seeds: Sequence[int],
    gamma_schedule: Optional[Mapping[int, float]] = None,
    labeled_classes: Optional[Sequence[int]] = None,
    labels_per_class: int = DEFAULT_MISMATCH_LABELS_PER_CLASS,
    unlabeled_per_class: Optional[int] = None,
    gamma_zero_control: bool = True,
    jobs: int = 1,
    run_root=None,
) -> ExperimentReport:
    """Per level: mismatch split, γ from the schedule, RealMix vs labeled-only baseline."""
    started = time.perf_counter()
    gamma_schedule = dict(MISMATCH_GAMMA if gamma_schedule is None else gamma_schedule)
    missing = [lvl for lvl in mismatch_levels if lvl not in gamma_schedule]
    if missing:
        raise ConfigError("gamma_schedule", f"no γ for mismatch levels {missing}")
    labeled_classes = sorted(labeled_classes or _default_labeled_classes(data.train))
    base = base.replace(num_classes=len(labeled_classes))

    specs = []
    for seed in seeds:
        cfg = base.replace(seed=seed)
        for level in mismatch_levels:
            split = make_mismatch_split(data.train, labeled_classes, labels_per_class, level, seed,
                                        unlabeled_per_class)
            gamma = float(gamma_schedule[level])
            specs.append(ArmSpec("realmix", {"mismatch": level, "gamma": gamma}, seed,
                                 cfg.replace(gamma=gamma), split))
            if gamma_zero_control:
                specs.append(ArmSpec("gamma0_control", {"mismatch": level, "gamma": 0.0}, seed,
                                     cfg.replace(gamma=0.0), split))
            if level == mismatch_levels[0]:
                specs.append(ArmSpec("labeled_only", {"mismatch": "baseline"}, seed,
                                     cfg.replace(use_unlabeled=False), split))

    results = _assemble(specs, _run_all(specs, data, jobs, run_root))
    return _report("mismatch", results, _baseline(results, "labeled_only"), base, data, seeds, started)


def resolve_variant(base: Config, variant: Union[str, Mapping[str, object]]) -> Config:
    """Apply a preset name or an explicit {key: value} delta to *base*."""
    if isinstance(variant, str):
        if variant not in ABLATION_PRESETS:
            raise ConfigError("variants", f"unknown ablation preset {variant!r}")
        variant = ABLATION_PRESETS[variant]
    items = []
    for key, value in variant.items():
        if value == "half" and key == "extend_copies":
            value = max(1, base.extend_copies // 2)
        items.append(f"{key}={json.dumps(value)}")
    return apply_overrides(base, items)


def run_ablation(
    base: Config,
    data: ExperimentData,
    variants: Union[Sequence[str], Mapping[str, Mapping[str, object]]],
    seeds: Sequence[int],
    protocol: Optional[Mapping[str, object]] = None,
    jobs: int = 1,
    run_root=None,
) -> ExperimentReport:
    """Train the control and each variant on identical splits and seeds.

    *protocol* picks the setting: {"kind": "labels", "labels": 250} or
    {"kind": "mismatch", "mismatch": 75, "labels_per_class": ..., "labeled_classes": [...]}.
    """
    started = time.perf_counter()
    protocol = dict(protocol or {"kind": "labels", "labels": 25 * data.train.num_classes})
    named = dict(variants) if isinstance(variants, Mapping) else {v: v for v in variants}

    if protocol.get("kind") == "mismatch":
        level = int(protocol.get("mismatch", 75))
        labeled_classes = sorted(protocol.get("labeled_classes") or _default_labeled_classes(data.train))
        base = base.replace(num_classes=len(labeled_classes), gamma=MISMATCH_GAMMA.get(level, base.gamma))

        def make_split(seed):
            return make_mismatch_split(data.train, labeled_classes,
                                       int(protocol.get("labels_per_class", DEFAULT_MISMATCH_LABELS_PER_CLASS)),
                                       level, seed, protocol.get("unlabeled_per_class"))
        condition = {"mismatch": level}
    elif protocol.get("kind") == "labels":
        count = int(protocol["labels"])
        base = base.replace(num_classes=data.train.num_classes)

        def make_split(seed):
            return make_label_split(data.train, count, seed)
        condition = {"labels": count}
    else:
        raise ConfigError("protocol", f"unknown ablation protocol {protocol.get('kind')!r}")

    configs = {name: resolve_variant(base, delta) for name, delta in named.items()}
    specs = []
    for seed in seeds:
        split = make_split(seed)
        specs.append(ArmSpec("control", {**condition, "variant": "control"}, seed, base.replace(seed=seed), split))
        for name, cfg in configs.items():
            specs.append(ArmSpec(name, {**condition, "variant": name}, seed, cfg.replace(seed=seed), split))

    results = _assemble(specs, _run_all(specs, data, jobs, run_root))
    return _report("ablation", results, _baseline(results, "control"), base, data, seeds, started)


def run_transfer(
    base: Config,
    data: ExperimentData,
    source_classes: Sequence[int],
    target_classes: Sequence[int],
    seeds: Sequence[int],
    n_labels: Optional[int] = None,
    pretrain_steps: int = DEFAULT_PRETRAIN_STEPS,
    jobs: int = 1,
    run_root=None,
) -> ExperimentReport:
    """Four arms: pretrain on source, fine-tune on target labels, RealMix from
    scratch, RealMix from the pretrained backbone."""
    started = time.perf_counter()
    k = data.train.num_classes
    source_classes, target_classes = sorted(set(source_classes)), sorted(set(target_classes))
    for cls in source_classes + target_classes:
        if not 0 <= cls < k:
            raise DataError(f"class {cls} is not in the dataset")
    if len(source_classes) < 2 or len(target_classes) < 2:
        raise DataError("source and target need at least two classes each")
    n_labels = n_labels or 25 * len(target_classes)
    target_cfg = base.replace(num_classes=len(target_classes))

    pretrain_specs, weights = [], {}
    for seed in seeds:
        cfg = base.replace(seed=seed, num_classes=len(source_classes), use_unlabeled=False,
                           total_steps=max(pretrain_steps, 1))
        pretrain_specs.append(ArmSpec("pretrain_source", {"classes": "source"}, seed, cfg,
                                      _all_labeled(data.train, seed, source_classes), keep_weights=True))

    if pretrain_steps > 0:
        pre_outcomes = _run_all(pretrain_specs, data, jobs, run_root)
    else:
        # No pretraining: the "pretrained" weights are the untouched initialisation.
        pre_outcomes = {}
        for spec in pretrain_specs:
            state = init_state(spec.config, data.train.image_shape)
            test = subset_dataset(data.test, spec.split.classes)
            pre_outcomes[spec.key()] = ArmOutcome(
                evaluate_ema(state, test, spec.config.eval_batch_size), 0,
                {k_: v.clone() for k_, v in state.ema_model.state_dict().items()})
    for spec in pretrain_specs:
        weights[spec.key()] = pre_outcomes[spec.key()].weights

    specs = []
    for spec in pretrain_specs:
        seed = spec.seed
        cfg = target_cfg.replace(seed=seed)
        split = _class_label_split(data.train, target_classes, n_labels, seed)
        condition = {"labels": n_labels}
        specs.append(ArmSpec("finetune", condition, seed, cfg.replace(use_unlabeled=False), split,
                             init_from=spec.key()))
        specs.append(ArmSpec("realmix_scratch", condition, seed, cfg, split))
        specs.append(ArmSpec("realmix_pretrained", condition, seed, cfg, split, init_from=spec.key()))

    outcomes = _run_all(specs, data, jobs, run_root, weights)
    outcomes.update(pre_outcomes)
    results = _assemble(pretrain_specs + specs, outcomes)
    return _report("transfer", results, _baseline(results, "finetune"), target_cfg, data, seeds, started)


# ── Report output ────────────────────────────────────────────────────

_X_TITLES = {
    "labels": "labeled samples",
    "mismatch": "mismatch (%)",
    "ablation": "variant",
    "transfer": "labeled samples",
}


def _x_value(result: ConditionResult):
    for key in ("variant", "mismatch", "labels", "classes"):
        if key in result.condition:
            return result.condition[key]
    return result.arm


def summary_frame(report: ExperimentReport) -> pd.DataFrame:
    rows = []
    for r in report.conditions:
        rows.append({
            "kind": report.kind,
            "condition": json.dumps(r.condition, sort_keys=True),
            "arm": r.arm,
            "n_seeds": len(r.seeds),
            "mean": r.mean,
            "std": r.std,
            "errors": " ".join(f"{e:.6f}" for e in r.errors),
        })
    return pd.DataFrame(rows, columns=["kind", "condition", "arm", "n_seeds", "mean", "std", "errors"])


def series_frame(report: ExperimentReport) -> pd.DataFrame:
    rows = [{"x": _x_value(r), "arm": r.arm, "mean": r.mean, "std": r.std} for r in report.conditions]
    return pd.DataFrame(rows, columns=["x", "arm", "mean", "std"])


def _figure(report: ExperimentReport, series: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for arm, rows in series.groupby("arm", sort=False):
        fig.add_trace(go.Scatter(
            x=[str(x) for x in rows["x"]],
            y=100 * rows["mean"],
            error_y={"type": "data", "array": 100 * rows["std"].fillna(0.0), "visible": True},
            mode="lines+markers",
            name=arm,
        ))
    if report.baseline_error is not None:
        fig.add_hline(y=100 * report.baseline_error, line_dash="dash", annotation_text="baseline")
    fig.update_layout(
        title=f"{report.kind} experiment",
        xaxis_title=_X_TITLES.get(report.kind, "condition"),
        yaxis_title="test error (%)",
        template="plotly_white",
    )
    return fig


def emit_report(report: ExperimentReport, out_dir) -> Dict[str, Path]:
    """Write report.json, summary.csv, series.csv and figure.html into *out_dir*."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out_dir / "report.json",
            "summary": out_dir / "summary.csv",
            "series": out_dir / "series.csv",
            "figure": out_dir / "figure.html",
        }
        paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        summary_frame(report).to_csv(paths["summary"], index=False, float_format="%.6f")
        series = series_frame(report)
        series.to_csv(paths["series"], index=False, float_format="%.6f")
        _figure(report, series).write_html(paths["figure"], include_plotlyjs="cdn")
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}")
    logger.info("report_written | kind=%s | dir=%s | conditions=%d", report.kind, out_dir, len(report.conditions))
    return paths


def load_report(path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        return ExperimentReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise DataError(f"report not found: {path}")
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"cannot read report {path}: {exc}")
