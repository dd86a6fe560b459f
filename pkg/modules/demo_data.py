"""
demo_data.py — Synthetic desk-scale image dataset.

Used when no real dataset has been imported.  Produces ten classes split
into an "animal" group of six and a "transport" group of four, matching the
class partition the mismatch protocol needs.  Classes inside a group share a
low-frequency base pattern and differ in finer structure, so in-group
confusion is harder than cross-group confusion.

Returns the same `Dataset` type as `config_data.load_dataset`, so the rest
of the code does not branch on where data came from.
"""

from typing import Tuple

import numpy as np

from config import (
    DESK_CHANNELS,
    DESK_CLASS_GROUPS,
    DESK_CLASS_NAMES,
    DESK_IMAGE_SIZE,
    DESK_TEST_PER_CLASS,
    DESK_TRAIN_PER_CLASS,
)
from modules.config_data import Dataset, seeded_generator

_NOISE_STD = 0.35
_MAX_SHIFT = 3


# ── Helpers ──────────────────────────────────────────────────────────

def _wave(rng: np.random.Generator, size: int, channels: int, max_freq: float) -> np.ndarray:
    """Sum of three random plane waves per channel, H×W×C in [-1, 1]."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((size, size, channels), dtype=np.float64)
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.uniform(-max_freq, max_freq, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[..., c] += np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
    return out / 3.0


def _prototypes(seed: int, size: int, channels: int) -> np.ndarray:
    """One prototype per class: group base pattern + class-specific detail."""
    protos = np.zeros((len(DESK_CLASS_NAMES), size, size, channels))
    for g, members in enumerate(DESK_CLASS_GROUPS.values()):
        base = _wave(seeded_generator(seed, "synthetic", 0, g), size, channels, max_freq=1.5)
        for cls in members:
            detail = _wave(seeded_generator(seed, "synthetic", 1, cls), size, channels, max_freq=4.0)
            protos[cls] = 0.5 * base + 0.5 * detail
    return protos


def _render(protos: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    images = protos[labels].copy()
    for i in range(len(images)):
        dy, dx = rng.integers(-_MAX_SHIFT, _MAX_SHIFT + 1, size=2)
        images[i] = np.roll(images[i], (dy, dx), axis=(0, 1))
        if rng.random() < 0.5:
            images[i] = images[i][:, ::-1]
        images[i] *= rng.uniform(0.6, 1.0)
    images += rng.normal(0.0, _NOISE_STD, size=images.shape)
    return np.clip(images, -1.0, 1.0).astype(np.float32)


# ── Public API ───────────────────────────────────────────────────────

def make_synthetic_dataset(
    seed: int = 0,
    train_per_class: int = DESK_TRAIN_PER_CLASS,
    test_per_class: int = DESK_TEST_PER_CLASS,
    image_size: int = DESK_IMAGE_SIZE,
    channels: int = DESK_CHANNELS,
) -> Tuple[Dataset, Dataset]:
    """Return (train, test) datasets; a pure function of the arguments."""
    protos = _prototypes(seed, image_size, channels)
    k = len(DESK_CLASS_NAMES)
    groups = {name: list(ids) for name, ids in DESK_CLASS_GROUPS.items()}

    parts = []
    for part, per_class in ((2, train_per_class), (3, test_per_class)):
        labels = np.repeat(np.arange(k, dtype=np.int64), per_class)
        rng = seeded_generator(seed, "synthetic", part)
        labels = labels[rng.permutation(len(labels))]
        parts.append(Dataset(
            images=_render(protos, labels, rng),
            labels=labels,
            class_names=list(DESK_CLASS_NAMES),
            class_groups=groups,
        ))
    return parts[0], parts[1]
