"""
augmentation.py — The two stochastic augmentation stages.

  • Augment(x): online flip → translate → cutout, drawn fresh every step
  • Extend(x):  offline expansion of the unlabeled pool into `copies`
                independently augmented versions, computed once before
                training and cached on disk

All randomness comes from an explicit RngStream, so the output is a pure
function of (input, policy, seed).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from config import STREAM_CODES
from modules.config_data import AugmentPolicy, seeded_generator
from modules.errors import DataError
from modules.tensor_io import PathLike, load_tensor, save_tensor

logger = logging.getLogger(__name__)


# ── Random streams ───────────────────────────────────────────────────

@dataclass(frozen=True)
class RngStream:
    """Seeded stream for one purpose; draw index `i` is reproducible on its own."""
    seed: int
    stream_id: str

    def __post_init__(self):
        if self.stream_id not in STREAM_CODES:
            raise DataError(f"unknown random stream {self.stream_id!r}")

    def generator(self, *index: int) -> np.random.Generator:
        return seeded_generator(self.seed, self.stream_id, *index)


# ── Augment ──────────────────────────────────────────────────────────

def augment_batch(images: np.ndarray, policy: AugmentPolicy, gen: np.random.Generator) -> np.ndarray:
    """Augment an N×H×W×C batch, each sample with its own draws.

    The same number of values is drawn whatever the policy, so turning one
    operation off does not change the draws seen by the others.
    """
    if images.ndim != 4:
        raise DataError(f"expected N×H×W×C images, got shape {images.shape}")
    n, h, w, _ = images.shape
    if policy.cutout_size > min(h, w):
        raise DataError(f"cutout_size {policy.cutout_size} exceeds image side {min(h, w)}")

    flip = gen.random(n) < policy.flip_probability
    t = policy.translate_max
    shift = gen.integers(-t, t + 1, size=(n, 2))
    center_y = gen.integers(0, h, size=n)
    center_x = gen.integers(0, w, size=n)

    out = np.array(images, dtype=np.float32, copy=True)
    if policy.horizontal_flip and flip.any():
        out[flip] = out[flip, :, ::-1]

    if t > 0:
        padded = np.pad(out, ((0, 0), (t, t), (t, t), (0, 0)))
        rows = np.arange(h)[None, :] + t + shift[:, 0:1]
        cols = np.arange(w)[None, :] + t + shift[:, 1:2]
        out = padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]

    s = policy.cutout_size
    if s > 0:
        top = np.clip(center_y - s // 2, 0, h)
        bottom = np.clip(center_y - s // 2 + s, 0, h)
        left = np.clip(center_x - s // 2, 0, w)
        right = np.clip(center_x - s // 2 + s, 0, w)
        ys, xs = np.arange(h)[None, :], np.arange(w)[None, :]
        in_rows = (ys >= top[:, None]) & (ys < bottom[:, None])
        in_cols = (xs >= left[:, None]) & (xs < right[:, None])
        out[in_rows[:, :, None] & in_cols[:, None, :]] = policy.fill_value
    return out


def augment(image: np.ndarray, policy: AugmentPolicy, rng: RngStream, draw: int = 0) -> np.ndarray:
    """Augment a single H×W×C image using draw number *draw* of *rng*."""
    if image.ndim != 3:
        raise DataError(f"expected an H×W×C image, got shape {image.shape}")
    return augment_batch(image[None], policy, rng.generator(draw))[0]


# ── Extend ───────────────────────────────────────────────────────────

def extend(
    unlabeled: np.ndarray,
    copies: int,
    policy: AugmentPolicy,
    rng: RngStream,
    workers: int = 1,
) -> np.ndarray:
    """Return `copies` augmented versions of the pool, copy-major.

    Row `c * N + i` is copy `c` of sample `i`.  Copies use independent
    substreams, so fanning out over threads keeps the output identical.
    """
    if copies < 1:
        raise DataError("copies must be >= 1")

    def one_copy(c: int) -> np.ndarray:
        return augment_batch(unlabeled, policy, rng.generator(c))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_copy, range(copies)))
    else:
        parts = [one_copy(c) for c in range(copies)]
    return np.concatenate(parts, axis=0)


def extend_cache_key(source_checksum: str, policy: AugmentPolicy, copies: int, seed: int) -> str:
    return f"ext-{source_checksum[:16]}-{policy.policy_hash()[:12]}-c{copies}-s{seed}"


def cached_pool_path(cache_dir: PathLike, source_checksum: str, policy: AugmentPolicy,
                     copies: int, seed: int) -> Path:
    return Path(cache_dir) / extend_cache_key(source_checksum, policy, copies, seed) / "pool_images.bin"


def load_or_extend(
    unlabeled: np.ndarray,
    copies: int,
    policy: AugmentPolicy,
    seed: int,
    source_checksum: str,
    cache_dir: Optional[PathLike] = None,
    workers: int = 1,
) -> np.ndarray:
    """Build the extended pool, or reuse it from `cache_dir/<key>/pool_images.bin`."""
    rng = RngStream(seed, "extend")
    if not cache_dir:
        return extend(unlabeled, copies, policy, rng, workers)

    key = extend_cache_key(source_checksum, policy, copies, seed)
    path = cached_pool_path(cache_dir, source_checksum, policy, copies, seed)
    if path.exists():
        try:
            pool = load_tensor(path)
        except DataError as exc:
            logger.warning("extend_cache_stale | key=%s | error=%s", key, exc)
        else:
            if pool.shape == (copies * len(unlabeled),) + unlabeled.shape[1:]:
                logger.info("extend_cache_hit | key=%s", key)
                return pool
            logger.warning("extend_cache_stale | key=%s | shape=%s", key, pool.shape)

    pool = extend(unlabeled, copies, policy, rng, workers)
    try:
        checksum = save_tensor(path, pool)
    except OSError as exc:
        raise DataError(f"cannot cache extended pool at {path}: {exc}")
    logger.info("extend_cached | key=%s | rows=%d | sha256=%s", key, len(pool), checksum[:12])
    return pool
