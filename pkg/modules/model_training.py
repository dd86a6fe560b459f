"""
model_training.py — The RealMix training loop.

One step, in order:
  1. Augment the labeled batch
  2. Generate sharpened targets for the unlabeled batch (two Augment views)
  3. Shuffle the labeled ∪ unlabeled union and MixUp each side against it
  4. Cross-entropy on the mixed labeled part (TSA-masked when enabled),
     MSE on the mixed unlabeled part (OOD-masked), L = L_sup + λ_t·L_unsup
  5. AdamW step with decoupled weight decay, then the EMA update

Every random draw is keyed by (seed, stream, step), so a run resumed from a
checkpoint continues exactly as the uninterrupted run would have.
"""

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from config import CHECKPOINT_DIR, LATEST_POINTER, METRICS_COLUMNS, METRICS_CSV
from modules.augmentation import RngStream, augment_batch, load_or_extend
from modules.config_data import (
    Config,
    Dataset,
    SplitSpec,
    config_hash,
    seeded_generator,
    split_arrays,
    subset_dataset,
)
from modules.errors import ConfigError, DataError, NonFiniteLoss, TrainingAborted
from modules.networks import build_model
from modules.ssl_core import (
    TsaState,
    generate_targets,
    images_to_tensor,
    mean_over_kept,
    mixup_batch,
    one_hot,
    ood_confidence,
    ood_mask,
    rampup_weight,
    scalar,
    supervised_loss,
    total_loss,
    tsa_mask,
    tsa_threshold,
    unsupervised_loss,
)

logger = logging.getLogger(__name__)


# ── Data model ───────────────────────────────────────────────────────

class LabeledBatch(NamedTuple):
    images: np.ndarray          # N×H×W×C
    labels: np.ndarray          # N class indices


class UnlabeledBatch(NamedTuple):
    images: np.ndarray


@dataclass
class StepMetrics:
    sup_loss: float
    unsup_loss: float
    total_loss: float
    tsa_threshold: float
    ood_kept_fraction: float
    lambda_t: float


@dataclass
class StepInputs:
    """Mixed tensors of one step; targets carry no gradient."""
    labeled_inputs: torch.Tensor
    labeled_targets: torch.Tensor
    labeled_classes: torch.Tensor
    unlabeled_inputs: Optional[torch.Tensor] = None
    unlabeled_targets: Optional[torch.Tensor] = None
    confidences: Optional[torch.Tensor] = None


@dataclass
class TrainState:
    """θ (model), θ' (ema_model), optimizer moments and the step counter."""
    model: nn.Module
    ema_model: nn.Module
    optimizer: torch.optim.Optimizer
    step: int
    seed: int
    config_hash: str
    unlabeled_batches_touched: int = 0
    last_checkpoint: Optional[str] = None
    interval: Dict[str, float] = field(default_factory=dict)

    @property
    def params(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    @property
    def ema_params(self) -> Dict[str, torch.Tensor]:
        return dict(self.ema_model.named_parameters())


# ── Models & EMA ─────────────────────────────────────────────────────

def build_reference_model(num_classes: int, width: int, seed: int, image_shape=(32, 32, 3),
                          name: str = "convnet") -> nn.Module:
    return build_model(name, num_classes, width, seed, image_shape)


def predict(model: nn.Module, inputs: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
    """Forward pass in the requested mode; the model's previous mode is restored."""
    was_training = model.training
    model.train(train_mode)
    try:
        return model(inputs)
    finally:
        model.train(was_training)


def ema_update(params: Dict[str, torch.Tensor], shadow: Dict[str, torch.Tensor], decay: float) -> Dict[str, torch.Tensor]:
    """shadow' = decay·shadow + (1 − decay)·params, elementwise."""
    if params.keys() != shadow.keys():
        raise DataError("parameter and shadow collections differ")
    out = {}
    for name, value in params.items():
        if value.shape != shadow[name].shape:
            raise DataError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(shadow[name].shape)}")
        out[name] = decay * shadow[name] + (1.0 - decay) * value.detach()
    return out


@torch.no_grad()
def update_ema_model(model: nn.Module, ema_model: nn.Module, decay: float) -> None:
    """In-place EMA of parameters; buffers (BN statistics) are copied."""
    for p, p_ema in zip(model.parameters(), ema_model.parameters()):
        p_ema.mul_(decay).add_((1.0 - decay) * p.detach())
    for b, b_ema in zip(model.buffers(), ema_model.buffers()):
        b_ema.copy_(b)


def _make_optimizer(model: nn.Module, cfg: Config) -> torch.optim.Optimizer:
    # AdamW shrinks by lr·wd per step; dividing by lr makes the per-step
    # decoupled shrink factor exactly (1 − cfg.weight_decay).
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay / cfg.learning_rate)


def copy_matching(source: Dict[str, torch.Tensor], model: nn.Module) -> int:
    """Copy backbone tensors whose name and shape match; return how many.

    The classification head is never copied, even when the class counts agree.
    """
    target = model.state_dict()
    copied = 0
    for name, value in source.items():
        if name.startswith("head."):
            continue
        if name in target and target[name].shape == value.shape:
            target[name] = value.detach().clone().to(target[name].dtype)
            copied += 1
    model.load_state_dict(target)
    return copied


def init_state(cfg: Config, image_shape, init_from: Optional[Dict[str, torch.Tensor]] = None,
               dtype=torch.float32, device="cpu") -> TrainState:
    model = build_reference_model(cfg.num_classes, cfg.model_width, cfg.seed, image_shape, cfg.model)
    model = model.to(device=device, dtype=dtype)
    if init_from is not None:
        copied = copy_matching(init_from, model)
        logger.info("init_from_pretrained | tensors=%d", copied)
    ema_model = build_reference_model(cfg.num_classes, cfg.model_width, cfg.seed, image_shape, cfg.model)
    ema_model = ema_model.to(device=device, dtype=dtype)
    ema_model.load_state_dict(model.state_dict())
    for p in ema_model.parameters():
        p.requires_grad_(False)
    return TrainState(
        model=model,
        ema_model=ema_model,
        optimizer=_make_optimizer(model, cfg),
        step=0,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
    )


# ── Samplers ─────────────────────────────────────────────────────────

def batch_indices(n: int, batch_size: int, step: int, seed: int, stream: str) -> np.ndarray:
    """Indices of batch *step* when cycling a fresh permutation of n items per pass."""
    if n == 0:
        raise DataError(f"cannot sample batches from an empty {stream} set")
    positions = step * batch_size + np.arange(batch_size)
    passes, offsets = np.divmod(positions, n)
    out = np.empty(batch_size, dtype=np.int64)
    for p in np.unique(passes):
        perm = seeded_generator(seed, stream, int(p)).permutation(n)
        sel = passes == p
        out[sel] = perm[offsets[sel]]
    return out


# ── One step ─────────────────────────────────────────────────────────

def prepare_step(state: TrainState, labeled: LabeledBatch, unlabeled: Optional[UnlabeledBatch],
                 cfg: Config) -> StepInputs:
    """Augment, guess targets and MixUp; everything before the loss."""
    step, seed = state.step, state.seed
    ref = next(state.model.parameters())
    dtype, device = ref.dtype, ref.device

    x_l = images_to_tensor(
        augment_batch(labeled.images, cfg.augment_policy, RngStream(seed, "labeled_aug").generator(step)),
        dtype, device)
    classes = torch.as_tensor(labeled.labels, dtype=torch.long, device=device)
    y_l = one_hot(classes, cfg.num_classes, dtype)

    if unlabeled is None:
        x_all, y_all = x_l, y_l
        x_u = q = confidences = None
    else:
        state.model.train()
        x_u, q = generate_targets(state.model, unlabeled.images, cfg.augment_policy, cfg.temperature,
                                  RngStream(seed, "target_aug"), draw=step, dtype=dtype, device=device)
        confidences = ood_confidence(q)
        x_all, y_all = torch.cat([x_l, x_u]), torch.cat([y_l, q])

    if not cfg.mixup_enabled:
        return StepInputs(x_l, y_l, classes, x_u, q, confidences)

    gen = RngStream(seed, "mixup").generator(step)
    order = torch.as_tensor(gen.permutation(len(x_all)), device=device)
    partners_x, partners_y = x_all[order], y_all[order]
    n_l = len(x_l)
    mixed_x_l, mixed_y_l, _ = mixup_batch(x_l, y_l, partners_x[:n_l], partners_y[:n_l], cfg.alpha, gen)
    if unlabeled is None:
        return StepInputs(mixed_x_l, mixed_y_l, classes)
    mixed_x_u, mixed_y_u, _ = mixup_batch(x_u, q, partners_x[n_l:], partners_y[n_l:], cfg.alpha, gen)
    return StepInputs(mixed_x_l, mixed_y_l, classes, mixed_x_u, mixed_y_u, confidences)


def step_loss(model: nn.Module, inputs: StepInputs, cfg: Config, step: int) -> Tuple[torch.Tensor, StepMetrics]:
    """Composite loss of one prepared step; differentiable in the model parameters only."""
    probs_l = model(inputs.labeled_inputs)
    per_sup, sup_mean = supervised_loss(probs_l, inputs.labeled_targets)

    threshold = 1.0
    if cfg.tsa_enabled:
        threshold = tsa_threshold(TsaState(step, cfg.total_steps, cfg.tsa_schedule, cfg.num_classes))
        masked, kept = tsa_mask(per_sup, probs_l, inputs.labeled_classes, threshold)
        sup_mean = mean_over_kept(masked, kept)

    if inputs.unlabeled_inputs is None:
        unsup_mean = torch.zeros((), dtype=probs_l.dtype, device=probs_l.device)
        kept_fraction, lambda_t = 1.0, 0.0
    else:
        probs_u = model(inputs.unlabeled_inputs)
        per_unsup = unsupervised_loss(probs_u, inputs.unlabeled_targets)
        masked_u, kept_u = ood_mask(per_unsup, inputs.confidences, cfg.gamma)
        unsup_mean = masked_u.sum() / len(masked_u)
        kept_fraction = scalar(kept_u.sum()) / len(kept_u)
        lambda_t = rampup_weight(step, cfg.lambda_max, cfg.lambda_rampup_steps)

    loss = total_loss(sup_mean, unsup_mean, lambda_t)
    return loss, StepMetrics(
        sup_loss=scalar(sup_mean),
        unsup_loss=scalar(unsup_mean),
        total_loss=scalar(loss),
        tsa_threshold=threshold,
        ood_kept_fraction=kept_fraction,
        lambda_t=lambda_t,
    )


def train_step(state: TrainState, labeled: LabeledBatch, unlabeled: Optional[UnlabeledBatch],
               cfg: Config) -> Tuple[TrainState, StepMetrics]:
    """Advance *state* by one optimisation step (the state is updated in place)."""
    if cfg.use_unlabeled and unlabeled is None:
        raise DataError("an unlabeled batch is required unless use_unlabeled is false")
    if not cfg.use_unlabeled:
        unlabeled = None

    inputs = prepare_step(state, labeled, unlabeled, cfg)
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    try:
        loss, metrics = step_loss(state.model, inputs, cfg, state.step)
    except NonFiniteLoss as exc:
        raise TrainingAborted(state.step, exc.diagnostics, state.last_checkpoint) from exc

    loss.backward()
    state.optimizer.step()
    update_ema_model(state.model, state.ema_model, cfg.ema_decay)
    state.step += 1
    if unlabeled is not None:
        state.unlabeled_batches_touched += 1
    return state, metrics


# ── Evaluation ───────────────────────────────────────────────────────

def iterate_batches(images: np.ndarray, labels: np.ndarray, batch_size: int) -> Iterator[LabeledBatch]:
    for start in range(0, len(labels), batch_size):
        yield LabeledBatch(images[start:start + batch_size], labels[start:start + batch_size])


@torch.no_grad()
def evaluate(model: nn.Module, batches: Iterable[LabeledBatch]) -> float:
    """Fraction of argmax misclassifications, in eval mode, without augmentation."""
    ref = next(model.parameters())
    wrong = total = 0
    for batch in batches:
        probs = predict(model, images_to_tensor(batch.images, ref.dtype, ref.device), train_mode=False)
        labels = torch.as_tensor(batch.labels, device=probs.device)
        wrong += int((probs.argmax(dim=1) != labels).sum())
        total += len(labels)
    if total == 0:
        raise DataError("cannot evaluate on an empty test set")
    return wrong / total


def evaluate_ema(state: TrainState, dataset: Dataset, batch_size: int) -> float:
    return evaluate(state.ema_model, iterate_batches(dataset.images, dataset.labels, batch_size))


def evaluate_raw(state: TrainState, dataset: Dataset, batch_size: int) -> float:
    """Error of the raw (non-averaged) parameters; reported only on request."""
    return evaluate(state.model, iterate_batches(dataset.images, dataset.labels, batch_size))


# ── Checkpoints ──────────────────────────────────────────────────────

def save_checkpoint(state: TrainState, run_dir, history: List[dict]) -> Path:
    ckpt_dir = Path(run_dir) / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"step_{state.step:08d}.pt"
    payload = {
        "model": state.model.state_dict(),
        "ema": state.ema_model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "seed": state.seed,
        "config_hash": state.config_hash,
        "unlabeled_batches_touched": state.unlabeled_batches_touched,
        "interval": dict(state.interval),
        "history": history,
    }
    tmp = path.with_suffix(".pt.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    (ckpt_dir / LATEST_POINTER).write_text(path.name + "\n", encoding="utf-8")
    state.last_checkpoint = str(path)
    logger.info("checkpoint_saved | step=%d | path=%s", state.step, path)
    return path


def latest_checkpoint(run_dir) -> Optional[Path]:
    pointer = Path(run_dir) / CHECKPOINT_DIR / LATEST_POINTER
    if not pointer.exists():
        return None
    path = pointer.parent / pointer.read_text(encoding="utf-8").strip()
    return path if path.exists() else None


def load_checkpoint(path, cfg: Config, image_shape, device="cpu") -> Tuple[TrainState, List[dict]]:
    path = Path(path)
    if path.is_dir():
        found = latest_checkpoint(path.parent if path.name == CHECKPOINT_DIR else path)
        if found is None:
            raise DataError(f"no checkpoint found under {path}")
        path = found
    payload = torch.load(path, map_location=device, weights_only=True)
    if payload["config_hash"] != config_hash(cfg):
        raise ConfigError("config", f"checkpoint {path} was written with a different config")

    state = init_state(cfg, image_shape, device=device)
    state.model.load_state_dict(payload["model"])
    state.ema_model.load_state_dict(payload["ema"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = int(payload["step"])
    state.unlabeled_batches_touched = int(payload["unlabeled_batches_touched"])
    state.interval = dict(payload["interval"])
    state.last_checkpoint = str(path)
    logger.info("checkpoint_loaded | step=%d | path=%s", state.step, path)
    return state, list(payload["history"])


def write_metrics_csv(history: List[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(history, columns=METRICS_COLUMNS).to_csv(path, index=False, float_format="%.8f")
    return path


# ── Training loop ────────────────────────────────────────────────────

def pool_source_checksum(dataset: Dataset, split: SplitSpec) -> str:
    """Cache identity of the unlabeled subset a split draws from a dataset."""
    digest = hashlib.sha256(dataset.checksum().encode())
    digest.update(np.asarray(split.unlabeled_indices, dtype="<i8").tobytes())
    return digest.hexdigest()


def _accumulate(interval: Dict[str, float], metrics: StepMetrics) -> None:
    for key in ("sup_loss", "unsup_loss", "ood_kept_fraction"):
        interval[key] = interval.get(key, 0.0) + getattr(metrics, key)
    interval["count"] = interval.get("count", 0) + 1
    interval["tsa_threshold"] = metrics.tsa_threshold
    interval["lambda_t"] = metrics.lambda_t


def _metrics_row(state: TrainState, train_set: Dataset, test_set: Optional[Dataset], cfg: Config) -> dict:
    n = max(state.interval.get("count", 0), 1)
    row = {
        "step": state.step,
        "sup_loss": state.interval.get("sup_loss", 0.0) / n,
        "unsup_loss": state.interval.get("unsup_loss", 0.0) / n,
        "tsa_threshold": state.interval.get("tsa_threshold", 1.0),
        "ood_kept_fraction": state.interval.get("ood_kept_fraction", 0.0) / n,
        "lambda_t": state.interval.get("lambda_t", 0.0),
        "train_error": evaluate_ema(state, train_set, cfg.eval_batch_size),
        "test_error_ema": evaluate_ema(state, test_set, cfg.eval_batch_size) if test_set is not None else math.nan,
    }
    state.interval = {}
    return row


def train(
    cfg: Config,
    split: SplitSpec,
    dataset: Dataset,
    test_set: Optional[Dataset] = None,
    run_dir=None,
    resume: bool = False,
    init_from: Optional[Dict[str, torch.Tensor]] = None,
    stop_at: Optional[int] = None,
    progress: bool = False,
    device="cpu",
) -> Tuple[TrainState, List[dict]]:
    """Run steps [state.step, stop_at) of the RealMix loop; stop_at defaults to total_steps.

    Returns the final state and one metrics row per evaluation interval.
    Evaluation always uses the EMA parameters.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    x_l, y_l, x_u = split_arrays(dataset, split)
    k = len(split.classes) if split.classes is not None else dataset.num_classes
    if cfg.num_classes != k:
        raise ConfigError("num_classes", f"config says {cfg.num_classes} but the split has {k} classes")
    if len(y_l) == 0:
        raise DataError("split has no labeled samples")
    if test_set is not None:
        test_set = subset_dataset(test_set, split.classes)
    train_set = Dataset(x_l, y_l, [str(c) for c in range(k)])
    image_shape = dataset.image_shape
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    history: List[dict] = []
    state = None
    if resume and run_dir is not None and latest_checkpoint(run_dir) is not None:
        state, history = load_checkpoint(latest_checkpoint(run_dir), cfg, image_shape, device)
    if state is None:
        state = init_state(cfg, image_shape, init_from=init_from, device=device)
    if state.step >= end:
        return state, history

    pool = None
    if cfg.use_unlabeled:
        if len(x_u) == 0:
            raise DataError("split has no unlabeled samples; set use_unlabeled=false for a labeled-only run")
        cache_dir = cfg.cache_dir or (str(Path(run_dir) / "cache") if run_dir is not None else "")
        pool = load_or_extend(x_u, cfg.extend_copies, cfg.extend_policy, cfg.seed,
                              pool_source_checksum(dataset, split), cache_dir, cfg.workers)

    metrics_path = Path(run_dir) / METRICS_CSV if run_dir is not None else None
    logger.info("train_start | step=%d | end=%d | labeled=%d | pool=%d | config=%s",
                state.step, end, len(y_l), 0 if pool is None else len(pool), state.config_hash[:12])

    bar = tqdm(range(state.step, end), initial=state.step, total=end, disable=not progress, desc="train")
    for step in bar:
        idx = batch_indices(len(y_l), cfg.batch_size, step, cfg.seed, "labeled_sampler")
        labeled = LabeledBatch(x_l[idx], y_l[idx])
        unlabeled = None
        if pool is not None:
            u_idx = batch_indices(len(pool), cfg.effective_unlabeled_batch_size, step, cfg.seed,
                                  "unlabeled_sampler")
            unlabeled = UnlabeledBatch(pool[u_idx])

        state, metrics = train_step(state, labeled, unlabeled, cfg)
        _accumulate(state.interval, metrics)
        bar.set_postfix(loss=f"{metrics.total_loss:.4f}", refresh=False)

        if state.step % cfg.eval_every == 0 or state.step == cfg.total_steps:
            row = _metrics_row(state, train_set, test_set, cfg)
            history.append(row)
            logger.info("metric | " + " | ".join(f"{c}={row[c]:.6g}" for c in METRICS_COLUMNS))
            if metrics_path is not None:
                write_metrics_csv(history, metrics_path)
        if run_dir is not None and cfg.checkpoint_every and (
                state.step % cfg.checkpoint_every == 0 or state.step == end):
            save_checkpoint(state, run_dir, history)

    logger.info("train_done | step=%d | unlabeled_batches=%d", state.step, state.unlabeled_batches_touched)
    return state, history

