"""
ssl_core.py — The RealMix mathematics.

Sharpening, MixUp, target generation, out-of-distribution masking, training
signal annealing and loss composition.  Every function is pure given its
explicit RNG stream; none keeps state between calls.

Distributions are torch tensors whose last dimension is the class axis.
"""

import math
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
import torch

from config import LOG_EPSILON, TSA_SCALE, TSA_SCHEDULES
from modules.augmentation import RngStream, augment_batch
from modules.config_data import AugmentPolicy
from modules.errors import ConfigError, DataError, NonFiniteLoss

Classifier = Callable[[torch.Tensor], torch.Tensor]

_SUM_TOLERANCE = 1e-6


# ── Distributions ────────────────────────────────────────────────────

def check_distribution(p: torch.Tensor, name: str = "distribution") -> None:
    """Raise DataError unless every row is nonnegative and sums to 1."""
    if p.numel() == 0:
        return
    if not torch.isfinite(p).all() or (p < 0).any():
        raise DataError(f"{name} has negative or non-finite entries")
    sums = p.sum(dim=-1)
    tol = max(_SUM_TOLERANCE, 10 * torch.finfo(p.dtype).eps * p.shape[-1])
    if ((sums - 1).abs() > tol).any():
        raise DataError(f"{name} rows must sum to 1 (worst {sums.sub(1).abs().max().item():.3g})")


def one_hot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    return torch.nn.functional.one_hot(labels.long(), num_classes).to(dtype)


def sharpen(p: torch.Tensor, temperature: Union[float, torch.Tensor]) -> torch.Tensor:
    """p_i^(1/T) / Σ_k p_k^(1/T), computed in log space so small T cannot underflow.

    `temperature` is a scalar or a tensor broadcastable against `p`, e.g. one
    value per row with shape (N, 1).
    """
    if isinstance(temperature, torch.Tensor):
        if not (temperature > 0).all():
            raise ConfigError("temperature", "must be > 0")
        temperature = temperature.to(p.dtype)
    elif not temperature > 0:
        raise ConfigError("temperature", "must be > 0")
    if (p.sum(dim=-1) <= 0).any():
        raise DataError("cannot sharpen an all-zero distribution")
    if not isinstance(temperature, torch.Tensor) and temperature == 1.0:
        return p.clone()
    return torch.softmax(torch.log(p) / temperature, dim=-1)


# ── MixUp ────────────────────────────────────────────────────────────

def mixup_weight(phi):
    """φ' = max(φ, 1 − φ): the mix always leans towards the first argument."""
    if isinstance(phi, np.ndarray):
        return np.maximum(phi, 1.0 - phi)
    return max(phi, 1.0 - phi)


def interpolate(x_a, y_a, x_b, y_b, weight):
    """x = w·x_a + (1−w)·x_b and the same for y; *weight* is scalar or per-row."""
    w = torch.as_tensor(weight, dtype=x_a.dtype, device=x_a.device)
    wx = w.reshape(-1, *([1] * (x_a.dim() - 1))) if w.dim() else w
    wy = w.reshape(-1, *([1] * (y_a.dim() - 1))) if w.dim() else w
    return wx * x_a + (1 - wx) * x_b, wy * y_a + (1 - wy) * y_b


def mixup(
    a: Tuple[torch.Tensor, torch.Tensor],
    b: Tuple[torch.Tensor, torch.Tensor],
    alpha: float,
    rng: RngStream,
    draw: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mix one pair with φ ~ Beta(α, α) from draw *draw* of *rng*."""
    (x_a, y_a), (x_b, y_b) = a, b
    if x_a.shape != x_b.shape or y_a.shape != y_b.shape:
        raise DataError(f"mixup shape mismatch: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    if not alpha > 0:
        raise ConfigError("alpha", "must be > 0")
    phi = float(rng.generator(draw).beta(alpha, alpha))
    return interpolate(x_a, y_a, x_b, y_b, mixup_weight(phi))


def mixup_batch(x_a, y_a, x_b, y_b, alpha: float, gen: np.random.Generator):
    """Row-wise MixUp with an independent φ per row; returns (x, y, φ')."""
    if x_a.shape != x_b.shape or y_a.shape != y_b.shape:
        raise DataError(f"mixup shape mismatch: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    if not alpha > 0:
        raise ConfigError("alpha", "must be > 0")
    weights = mixup_weight(gen.beta(alpha, alpha, size=len(x_a)))
    x, y = interpolate(x_a, y_a, x_b, y_b, weights)
    return x, y, weights


# ── Target generation ────────────────────────────────────────────────

def images_to_tensor(images: np.ndarray, dtype=torch.float32, device="cpu") -> torch.Tensor:
    """N×H×W×C numpy → N×C×H×W torch."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(device=device, dtype=dtype)


@torch.no_grad()
def generate_targets(
    model: Classifier,
    batch: np.ndarray,
    policy: AugmentPolicy,
    temperature: float,
    rng: RngStream,
    draw: int = 0,
    dtype=torch.float32,
    device="cpu",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average the predictions on two Augment views and sharpen the result.

    Returns (first augmented view, targets).  Runs without autograd, so the
    targets are constants for the loss that consumes them.
    """
    gen = rng.generator(draw)
    view1 = images_to_tensor(augment_batch(batch, policy, gen), dtype, device)
    view2 = images_to_tensor(augment_batch(batch, policy, gen), dtype, device)
    p1, p2 = model(view1), model(view2)
    check_distribution(p1, "model output")
    check_distribution(p2, "model output")
    return view1, sharpen((p1 + p2) / 2, temperature).detach()


# ── Out-of-distribution masking ──────────────────────────────────────

def ood_confidence(targets: torch.Tensor) -> torch.Tensor:
    """Per-sample confidence used for masking: the largest target probability."""
    return targets.max(dim=-1).values


def masked_count(gamma: float, n: int) -> int:
    """floor(γ·N), rounded first so 0.29·100 counts as 29."""
    return int(math.floor(round(gamma * n, 9)))


def ood_mask(
    per_sample_losses: torch.Tensor,
    confidences: torch.Tensor,
    gamma: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Zero the losses of the floor(γN) least confident samples of this batch.

    Ties go to the lower index first.  Returns (masked losses, kept mask).
    """
    if per_sample_losses.shape != confidences.shape:
        raise DataError("losses and confidences must be aligned")
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma", "must satisfy 0 <= gamma < 1")
    n = per_sample_losses.shape[0]
    m = masked_count(gamma, n)
    kept = torch.ones(n, dtype=torch.bool, device=per_sample_losses.device)
    if m:
        order = torch.sort(confidences.detach(), stable=True).indices
        kept[order[:m]] = False
    masked = torch.where(kept, per_sample_losses, torch.zeros_like(per_sample_losses))
    return masked, kept


# ── Training signal annealing ────────────────────────────────────────

@dataclass(frozen=True)
class TsaState:
    step: int
    total_steps: int
    schedule: str
    num_classes: int

    def __post_init__(self):
        if self.schedule not in TSA_SCHEDULES:
            raise ConfigError("tsa_schedule", f"must be one of {TSA_SCHEDULES}")
        if self.total_steps < 1:
            raise ConfigError("total_steps", "must be >= 1")
        if not 0 <= self.step <= self.total_steps:
            raise ConfigError("step", f"must lie in [0, {self.total_steps}], got {self.step}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")


def tsa_threshold(state: TsaState) -> float:
    """Confidence above which a labeled sample stops contributing, in [1/K, 1]."""
    if state.schedule == "none":
        return 1.0
    progress = state.step / state.total_steps
    if state.schedule == "linear":
        alpha_t = progress
    elif state.schedule == "log":
        alpha_t = 1.0 - math.exp(-TSA_SCALE * progress)
    else:
        alpha_t = math.exp(TSA_SCALE * (progress - 1.0))
    k = state.num_classes
    return 1.0 / k + alpha_t * (1.0 - 1.0 / k)


def tsa_mask(
    sup_losses: torch.Tensor,
    predicted_probs: torch.Tensor,
    labels: torch.Tensor,
    threshold: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Drop samples whose predicted probability of the true class exceeds *threshold*.

    Returns (masked losses, kept mask); reduce with `mean_over_kept`.
    """
    k = predicted_probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    if sup_losses.shape[0] != labels.shape[0] or predicted_probs.shape[0] != labels.shape[0]:
        raise DataError("tsa inputs must be aligned")
    correct = predicted_probs.detach().gather(1, labels.long().view(-1, 1)).squeeze(1)
    kept = correct <= threshold
    return torch.where(kept, sup_losses, torch.zeros_like(sup_losses)), kept


def mean_over_kept(losses: torch.Tensor, kept: torch.Tensor) -> torch.Tensor:
    count = kept.sum()
    if count == 0:
        return losses.sum() * 0.0
    return losses.sum() / count


# ── Losses ───────────────────────────────────────────────────────────

def _aligned(predicted: torch.Tensor, targets: torch.Tensor) -> None:
    if predicted.shape != targets.shape:
        raise DataError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(targets.shape)}")


def supervised_loss(predicted: torch.Tensor, targets: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy against soft targets: (per-sample, mean)."""
    _aligned(predicted, targets)
    per_sample = -(targets * torch.log(predicted.clamp_min(LOG_EPSILON))).sum(dim=-1)
    return per_sample, per_sample.mean()


def unsupervised_loss(predicted: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared error over the K classes."""
    _aligned(predicted, targets)
    return (predicted - targets).pow(2).mean(dim=-1)


def rampup_weight(step: int, lambda_max: float, rampup_steps: int) -> float:
    """λ_t = λ_max · min(1, step / rampup_steps); no ramp when rampup_steps is 0."""
    if rampup_steps <= 0:
        return float(lambda_max)
    return float(lambda_max) * min(1.0, step / rampup_steps)


def scalar(value) -> float:
    """Python float of a 0-d tensor or number, detached from the graph."""
    if isinstance(value, torch.Tensor):
        return value.detach().item()
    return float(value)


def total_loss(sup_mean, unsup_mean, lambda_t: float):
    """L = L_sup + λ_t · L_unsup; raises NonFiniteLoss on NaN or inf."""
    loss = sup_mean + lambda_t * unsup_mean
    if not math.isfinite(scalar(loss)):
        raise NonFiniteLoss({
            "sup_loss": scalar(sup_mean),
            "unsup_loss": scalar(unsup_mean),
            "lambda_t": lambda_t,
        })
    return loss
