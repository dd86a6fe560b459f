"""
Configuration constants for the RealMix semi-supervised learning toolkit.

Every documented default lives here. `modules.config_data.Config` reads its
field defaults from these names, so changing a value here changes the
default of every command.
"""

# ── Core hyperparameters ─────────────────────────────────────────────
DEFAULT_ALPHA = 0.75                # Beta(α, α) parameter for MixUp
DEFAULT_GAMMA = 0.0                 # fraction of unlabeled samples masked per batch
DEFAULT_LAMBDA_MAX = 75.0           # unsupervised loss weight after ramp-up
DEFAULT_LAMBDA_RAMPUP_STEPS = 16_384
DEFAULT_TEMPERATURE = 0.5           # sharpening temperature
DEFAULT_TSA_ENABLED = False
DEFAULT_TSA_SCHEDULE = "linear"
TSA_SCHEDULES = ("linear", "log", "exp", "none")
TSA_SCALE = 5.0                     # exponent scale of the log / exp schedules

# ── Optimisation ─────────────────────────────────────────────────────
DEFAULT_LEARNING_RATE = 0.002
DEFAULT_WEIGHT_DECAY = 0.02 * DEFAULT_LEARNING_RATE   # decoupled, per step
DEFAULT_EMA_DECAY = 0.999
DEFAULT_BATCH_SIZE = 64
DEFAULT_TOTAL_STEPS = 20_000        # desk-scale budget (full scale: 500k)
LOG_EPSILON = 1e-12                 # clamp before log in cross-entropy

# ── Augmentation ─────────────────────────────────────────────────────
# Augment(x): online flip + translate.  Extend(x): same plus CutOut.
DEFAULT_FLIP_PROBABILITY = 0.5
DEFAULT_TRANSLATE_MAX = 4           # pixels, zero padded
DEFAULT_CUTOUT_SIZE = 8             # pixels, 0 disables
DEFAULT_FILL_VALUE = 0.0
DEFAULT_EXTEND_COPIES = 8           # desk-scale (full scale: 50)
FULL_SCALE_EXTEND_COPIES = 50

# ── Models ───────────────────────────────────────────────────────────
MODEL_CHOICES = ("convnet", "wrn28_2", "linear")
DEFAULT_MODEL = "convnet"
DEFAULT_MODEL_WIDTH = 16            # first-stage channels of the desk convnet

# ── Training loop cadence ────────────────────────────────────────────
DEFAULT_EVAL_EVERY = 1_000          # steps per "epoch" row in the metrics CSV
DEFAULT_CHECKPOINT_EVERY = 1_000
DEFAULT_EVAL_BATCH_SIZE = 256
DEFAULT_WORKERS = 1

# ── Random stream tags ───────────────────────────────────────────────
# Each purpose draws from its own seeded stream so adding draws in one
# place never shifts the sequence seen by another.
STREAM_CODES = {
    "extend":            1,
    "target_aug":        2,
    "labeled_aug":       3,
    "mixup":             4,
    "init":              5,
    "split":             6,
    "labeled_sampler":   7,
    "unlabeled_sampler": 8,
    "synthetic":         9,
}

# ── Desk-scale dataset ───────────────────────────────────────────────
DESK_IMAGE_SIZE = 16
DESK_CHANNELS = 3
DESK_TRAIN_PER_CLASS = 600
DESK_TEST_PER_CLASS = 100
DESK_CLASS_NAMES = [
    "bird", "cat", "deer", "dog", "frog", "horse",          # "animal" group
    "airplane", "automobile", "ship", "truck",               # "transport" group
]
DESK_CLASS_GROUPS = {
    "animal":    [0, 1, 2, 3, 4, 5],
    "transport": [6, 7, 8, 9],
}

# ── Experiment protocols ─────────────────────────────────────────────
DEFAULT_SEEDS = [0, 1, 2]
DEFAULT_LABEL_COUNTS = [250, 500, 1000, 4000]
MISMATCH_LEVELS = [0, 25, 50, 75, 100]
MISMATCH_UNLABELED_CLASSES = 4
# γ per mismatch level, set to the expected fraction of out-of-set data.
MISMATCH_GAMMA = {0: 0.0, 25: 0.20, 50: 0.40, 75: 0.60, 100: 0.85}
DEFAULT_MISMATCH_LABELS_PER_CLASS = 400
DEFAULT_PRETRAIN_STEPS = 5_000

# Named config deltas for `experiment ablation --variants ...`.
# "copies_25" is resolved against the control config (half its copies).
ABLATION_PRESETS = {
    "simple_aug": {"extend_policy.cutout_size": 0},
    "copies_25":  {"extend_copies": "half"},
    "no_mask":    {"gamma": 0.0},
    "gamma_0.3":  {"gamma": 0.3},
    "gamma_0.6":  {"gamma": 0.6},
    "no_tsa":     {"tsa_enabled": False},
    "no_mixup":   {"mixup_enabled": False},
}

# ── Files & formats ──────────────────────────────────────────────────
REPORT_SCHEMA_VERSION = 1
TENSOR_FORMAT_VERSION = 1
METRICS_CSV = "metrics.csv"
METRICS_COLUMNS = [
    "step", "sup_loss", "unsup_loss", "tsa_threshold",
    "ood_kept_fraction", "lambda_t", "train_error", "test_error_ema",
]
CHECKPOINT_DIR = "checkpoints"
LATEST_POINTER = "latest"
MANIFEST_FILE = "manifest.json"
RUN_MANIFEST_FILE = "run_manifest.json"

# ── Exit codes ───────────────────────────────────────────────────────
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
