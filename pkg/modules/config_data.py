"""
config_data.py — Hyperparameters, datasets and reproducible splits.

Covers:
  • Config / AugmentPolicy dataclasses, validated on construction
  • flat-JSON config files, `key=value` overrides and the config hash
  • the on-disk Dataset container (tensor files + manifest)
  • seeded label-discard and distribution-mismatch splits, and the split file

Everything here is a pure function of its inputs; nothing keeps state.
"""

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import config as defaults
from modules.errors import ChecksumError, ConfigError, DataError
from modules.tensor_io import PathLike, load_tensor, save_tensor, sha256_bytes

logger = logging.getLogger(__name__)


# ── Seeded generators ────────────────────────────────────────────────

def seeded_generator(seed: int, stream_id: str, *index: int) -> np.random.Generator:
    """Generator for (seed, stream, index...); identical inputs give identical draws."""
    try:
        code = defaults.STREAM_CODES[stream_id]
    except KeyError:
        raise ConfigError("stream_id", f"unknown random stream {stream_id!r}")
    entropy = [int(seed) % 2**64, code, *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ── Augmentation policy ──────────────────────────────────────────────

@dataclass(frozen=True)
class AugmentPolicy:
    """Flip → translate → cutout, applied in that order."""
    horizontal_flip: bool = True
    flip_probability: float = defaults.DEFAULT_FLIP_PROBABILITY
    translate_max: int = defaults.DEFAULT_TRANSLATE_MAX
    cutout_size: int = 0
    fill_value: float = defaults.DEFAULT_FILL_VALUE

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability", "must lie in [0, 1]")
        if self.translate_max < 0:
            raise ConfigError("translate_max", "must be >= 0")
        if self.cutout_size < 0:
            raise ConfigError("cutout_size", "must be >= 0")
        if not math.isfinite(self.fill_value):
            raise ConfigError("fill_value", "must be finite")

    @property
    def is_identity(self) -> bool:
        flips = self.horizontal_flip and self.flip_probability > 0
        return not flips and self.translate_max == 0 and self.cutout_size == 0

    def policy_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_augment_policy() -> AugmentPolicy:
    return AugmentPolicy()


def default_extend_policy() -> AugmentPolicy:
    return AugmentPolicy(cutout_size=defaults.DEFAULT_CUTOUT_SIZE)


# ── Config ───────────────────────────────────────────────────────────

# Fields that change how a run executes but never what it computes.
_RUNTIME_ONLY = {"cache_dir", "workers"}

_POLICY_FIELDS = ("extend_policy", "augment_policy")


@dataclass(frozen=True)
class Config:
    """Every hyperparameter of a run.  Invalid values raise ConfigError."""
    alpha: float = defaults.DEFAULT_ALPHA
    gamma: float = defaults.DEFAULT_GAMMA
    lambda_max: float = defaults.DEFAULT_LAMBDA_MAX
    lambda_rampup_steps: int = defaults.DEFAULT_LAMBDA_RAMPUP_STEPS
    temperature: float = defaults.DEFAULT_TEMPERATURE
    tsa_enabled: bool = defaults.DEFAULT_TSA_ENABLED
    tsa_schedule: str = defaults.DEFAULT_TSA_SCHEDULE
    extend_copies: int = defaults.DEFAULT_EXTEND_COPIES
    extend_policy: AugmentPolicy = field(default_factory=default_extend_policy)
    augment_policy: AugmentPolicy = field(default_factory=default_augment_policy)
    ema_decay: float = defaults.DEFAULT_EMA_DECAY
    batch_size: int = defaults.DEFAULT_BATCH_SIZE
    unlabeled_batch_size: int = 0          # 0 → same as batch_size
    total_steps: int = defaults.DEFAULT_TOTAL_STEPS
    weight_decay: float = defaults.DEFAULT_WEIGHT_DECAY
    learning_rate: float = defaults.DEFAULT_LEARNING_RATE
    num_classes: int = 10
    seed: int = 0
    mixup_enabled: bool = True
    use_unlabeled: bool = True
    model: str = defaults.DEFAULT_MODEL
    model_width: int = defaults.DEFAULT_MODEL_WIDTH
    eval_every: int = defaults.DEFAULT_EVAL_EVERY
    checkpoint_every: int = defaults.DEFAULT_CHECKPOINT_EVERY
    eval_batch_size: int = defaults.DEFAULT_EVAL_BATCH_SIZE
    cache_dir: str = ""
    workers: int = defaults.DEFAULT_WORKERS

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha", "must be > 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must satisfy 0 <= gamma < 1")
        if self.lambda_max < 0:
            raise ConfigError("lambda_max", "must be >= 0")
        if self.lambda_rampup_steps < 0:
            raise ConfigError("lambda_rampup_steps", "must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be > 0")
        if self.tsa_schedule not in defaults.TSA_SCHEDULES:
            raise ConfigError("tsa_schedule", f"must be one of {defaults.TSA_SCHEDULES}")
        if self.extend_copies < 1:
            raise ConfigError("extend_copies", "must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay", "must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.unlabeled_batch_size < 0:
            raise ConfigError("unlabeled_batch_size", "must be >= 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps", "must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed", "must fit in 64 bits")
        if self.model not in defaults.MODEL_CHOICES:
            raise ConfigError("model", f"must be one of {defaults.MODEL_CHOICES}")
        if self.model_width < 1:
            raise ConfigError("model_width", "must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")

    @property
    def effective_unlabeled_batch_size(self) -> int:
        return self.unlabeled_batch_size or self.batch_size

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES: Dict[str, type] = {f.name: f.type for f in dataclasses.fields(Config)}
_POLICY_TYPES: Dict[str, type] = {f.name: f.type for f in dataclasses.fields(AugmentPolicy)}


def _coerce(name: str, value, kind: type):
    """Convert a JSON value to the declared field type, or raise ConfigError."""
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected true/false, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int):
            return value
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(name, f"expected a number, got {value!r}")
    if kind is str:
        if isinstance(value, str):
            return value
        raise ConfigError(name, f"expected a string, got {value!r}")
    raise ConfigError(name, f"unsupported field type {kind}")


def _policy_from(name: str, base: AugmentPolicy, values: dict) -> AugmentPolicy:
    changes = {}
    for key, value in values.items():
        if key not in _POLICY_TYPES:
            raise ConfigError(f"{name}.{key}", "unknown augmentation policy field")
        changes[key] = _coerce(f"{name}.{key}", value, _POLICY_TYPES[key])
    return dataclasses.replace(base, **changes)


def config_from_dict(values: dict, base: Optional[Config] = None) -> Config:
    """Build a Config from a flat (dotted) or nested dict on top of *base*.

    Unknown keys are logged and ignored.
    """
    base = base or Config()
    scalar: Dict[str, object] = {}
    policy: Dict[str, dict] = {name: {} for name in _POLICY_FIELDS}

    for key, value in values.items():
        head, _, tail = key.partition(".")
        if head in _POLICY_FIELDS:
            if tail:
                policy[head][tail] = value
            elif isinstance(value, dict):
                policy[head].update(value)
            else:
                raise ConfigError(key, "expected an object of policy fields")
        elif tail or key not in _FIELD_TYPES:
            logger.warning("config_unknown_key | key=%s", key)
        else:
            scalar[key] = _coerce(key, value, _FIELD_TYPES[key])

    for name in _POLICY_FIELDS:
        if policy[name]:
            scalar[name] = _policy_from(name, getattr(base, name), policy[name])
    return dataclasses.replace(base, **scalar)


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: Config) -> str:
    """sha256 of the canonical JSON of every field that affects results."""
    payload = {k: v for k, v in config_to_dict(cfg).items() if k not in _RUNTIME_ONLY}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: PathLike) -> Config:
    """Read a flat JSON config file; missing keys take documented defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("path", f"config file not found: {path}")
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("path", f"cannot parse {path}: {exc}")
    if not isinstance(values, dict):
        raise ConfigError("path", f"{path} must contain a JSON object")
    cfg = config_from_dict(values)
    logger.info("config_loaded | path=%s | hash=%s", path, config_hash(cfg)[:12])
    return cfg


def save_config(cfg: Config, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def parse_override(item: str) -> Tuple[str, object]:
    """`key=value` → (key, value); value is JSON when it parses, else a string."""
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError("override", f"expected key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(cfg: Config, overrides: Iterable[str]) -> Config:
    """Apply `key=value` overrides; unlike config files, unknown keys are errors."""
    values = {}
    for item in overrides:
        key, value = parse_override(item)
        head = key.partition(".")[0]
        if head not in _FIELD_TYPES:
            raise ConfigError(key, "unknown config key")
        values[key] = value
    return config_from_dict(values, base=cfg)


# ── Dataset ──────────────────────────────────────────────────────────

@dataclass
class Dataset:
    """N images (N×H×W×C float32 in [-1, 1]) with class-index labels."""
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    class_groups: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N×H×W×C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise DataError("images must be scaled to [-1, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(sha256_bytes(self.images.tobytes()).encode())
        digest.update(sha256_bytes(self.labels.astype("<i8").tobytes()).encode())
        digest.update(json.dumps(self.class_names).encode())
        return digest.hexdigest()

    def class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)


def save_dataset(dataset: Dataset, directory: PathLike, part: str = "train") -> Path:
    """Write `{part}_images.bin`, `{part}_labels.bin` (+ sidecars) and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / f"{part}_images.bin", dataset.images)
    save_tensor(directory / f"{part}_labels.bin", dataset.labels)
    manifest = {
        "class_names": dataset.class_names,
        "class_groups": dataset.class_groups,
        "format_version": defaults.TENSOR_FORMAT_VERSION,
    }
    (directory / defaults.MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory: PathLike, part: str = "train") -> Dataset:
    directory = Path(directory)
    manifest_path = directory / defaults.MANIFEST_FILE
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"dataset manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"corrupted dataset manifest {manifest_path}: {exc}")
    return Dataset(
        images=load_tensor(directory / f"{part}_images.bin"),
        labels=load_tensor(directory / f"{part}_labels.bin"),
        class_names=list(manifest["class_names"]),
        class_groups={k: list(v) for k, v in manifest.get("class_groups", {}).items()},
    )


def subset_dataset(dataset: Dataset, classes: Optional[Sequence[int]]) -> Dataset:
    """Keep only *classes*, relabelled to their position in the list."""
    if classes is None:
        return dataset
    classes = list(classes)
    remap = np.full(dataset.num_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    keep = remap[dataset.labels] >= 0
    return Dataset(
        images=dataset.images[keep],
        labels=remap[dataset.labels[keep]],
        class_names=[dataset.class_names[c] for c in classes],
    )


# ── Splits ───────────────────────────────────────────────────────────

@dataclass
class SplitSpec:
    """Which training indices are labeled and which are unlabeled."""
    labeled_indices: List[int]
    unlabeled_indices: List[int]
    seed: int
    classes: Optional[List[int]] = None      # class subset the model is trained on
    source_checksum: str = ""

    def validate(self, dataset: Dataset) -> None:
        labeled, unlabeled = set(self.labeled_indices), set(self.unlabeled_indices)
        if len(labeled) != len(self.labeled_indices) or len(unlabeled) != len(self.unlabeled_indices):
            raise DataError("split contains duplicate indices")
        if labeled & unlabeled:
            raise DataError("labeled and unlabeled index sets overlap")
        n = len(dataset)
        if any(not 0 <= i < n for i in labeled | unlabeled):
            raise DataError(f"split indices must lie in [0, {n})")
        if self.source_checksum and self.source_checksum != dataset.checksum():
            raise ChecksumError("split was made for a different dataset")


def make_label_split(dataset: Dataset, n_labels: int, seed: int) -> SplitSpec:
    """Class-balanced label discard: n_labels/K labeled per class, rest unlabeled."""
    k = dataset.num_classes
    if n_labels < 1:
        raise DataError("n_labels must be positive")
    if n_labels > len(dataset):
        raise DataError(f"n_labels={n_labels} exceeds dataset size {len(dataset)}")
    if n_labels % k:
        raise DataError(f"n_labels={n_labels} is not divisible by {k} classes")

    per_class = n_labels // k
    order = seeded_generator(seed, "split", 0).permutation(len(dataset))
    shuffled_labels = dataset.labels[order]
    labeled: List[int] = []
    for cls in range(k):
        members = order[shuffled_labels == cls]
        if len(members) < per_class:
            raise DataError(f"class {cls} has {len(members)} samples, {per_class} required")
        labeled.extend(int(i) for i in members[:per_class])

    chosen = set(labeled)
    return SplitSpec(
        labeled_indices=sorted(labeled),
        unlabeled_indices=[i for i in range(len(dataset)) if i not in chosen],
        seed=seed,
        source_checksum=dataset.checksum(),
    )


def make_mismatch_split(
    dataset: Dataset,
    labeled_classes: Iterable[int],
    labels_per_class: int,
    mismatch_pct: int,
    seed: int,
    unlabeled_per_class: Optional[int] = None,
) -> SplitSpec:
    """Labeled set from *labeled_classes*; unlabeled pool from four classes of
    which round(4·pct/100) lie outside the labeled set.

    The labeled selection and the class orderings depend on the seed only,
    so the levels of one sweep share the same labeled data and nest their
    unlabeled classes.
    """
    if mismatch_pct not in defaults.MISMATCH_LEVELS:
        raise DataError(f"mismatch_pct must be one of {defaults.MISMATCH_LEVELS}")
    labeled_classes = sorted(set(int(c) for c in labeled_classes))
    if any(not 0 <= c < dataset.num_classes for c in labeled_classes):
        raise DataError("labeled_classes contains an unknown class")
    n_pool = defaults.MISMATCH_UNLABELED_CLASSES
    out_of_set = [c for c in range(dataset.num_classes) if c not in labeled_classes]
    if len(out_of_set) < n_pool:
        raise DataError(f"need at least {n_pool} classes outside the labeled set")
    if len(labeled_classes) < n_pool:
        raise DataError(f"need at least {n_pool} labeled classes")

    labeled: List[int] = []
    for cls in labeled_classes:
        members = seeded_generator(seed, "split", 1, cls).permutation(dataset.class_indices(cls))
        if len(members) < labels_per_class:
            raise DataError(f"class {cls} has {len(members)} samples, {labels_per_class} required")
        labeled.extend(int(i) for i in members[:labels_per_class])
    taken = set(labeled)

    n_out = round(n_pool * mismatch_pct / 100)
    order_rng = seeded_generator(seed, "split", 2)
    in_order = order_rng.permutation(labeled_classes)
    out_order = order_rng.permutation(out_of_set)
    pool_classes = sorted(int(c) for c in list(in_order[:n_pool - n_out]) + list(out_order[:n_out]))

    pools = []
    for cls in pool_classes:
        members = seeded_generator(seed, "split", 3, cls).permutation(dataset.class_indices(cls))
        pools.append([int(i) for i in members if int(i) not in taken])
    size = min(len(p) for p in pools)
    if unlabeled_per_class is not None:
        size = min(size, unlabeled_per_class)
    if size == 0:
        raise DataError("insufficient samples left for the unlabeled pool")

    unlabeled = sorted(i for pool in pools for i in pool[:size])
    logger.debug("mismatch_split | pct=%d | pool_classes=%s | per_class=%d",
                 mismatch_pct, pool_classes, size)
    return SplitSpec(
        labeled_indices=sorted(labeled),
        unlabeled_indices=unlabeled,
        seed=seed,
        classes=labeled_classes,
        source_checksum=dataset.checksum(),
    )


def split_arrays(dataset: Dataset, split: SplitSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(labeled images, labeled labels, unlabeled images); labels remapped to split.classes."""
    split.validate(dataset)
    lab = np.asarray(split.labeled_indices, dtype=np.int64)
    unl = np.asarray(split.unlabeled_indices, dtype=np.int64)
    labels = dataset.labels[lab]
    if split.classes is not None:
        remap = np.full(dataset.num_classes, -1, dtype=np.int64)
        remap[split.classes] = np.arange(len(split.classes))
        labels = remap[labels]
        if (labels < 0).any():
            raise DataError("labeled indices fall outside split.classes")
    return dataset.images[lab], labels, dataset.images[unl]


def _split_payload(split: SplitSpec) -> dict:
    return {
        "labeled": [int(i) for i in split.labeled_indices],
        "unlabeled": [int(i) for i in split.unlabeled_indices],
        "seed": int(split.seed),
        "classes": None if split.classes is None else [int(c) for c in split.classes],
        "source_checksum": split.source_checksum,
    }


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_split(split: SplitSpec, path: PathLike) -> Path:
    """Write the split as canonical JSON; equal specs give byte-identical files."""
    path = Path(path)
    payload = _split_payload(split)
    payload["checksum"] = sha256_bytes(_canonical(payload).encode())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_canonical(payload) + "\n", encoding="utf-8")
    return path


def load_split(path: PathLike) -> SplitSpec:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"split file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"corrupted split file {path}: {exc}")

    recorded = payload.pop("checksum", None) if isinstance(payload, dict) else None
    if recorded is None or sha256_bytes(_canonical(payload).encode()) != recorded:
        raise ChecksumError(f"checksum mismatch in split file {path}")
    return SplitSpec(
        labeled_indices=list(payload["labeled"]),
        unlabeled_indices=list(payload["unlabeled"]),
        seed=payload["seed"],
        classes=payload["classes"],
        source_checksum=payload["source_checksum"],
    )
