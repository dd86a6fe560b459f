"""
Convert the CIFAR-10 python archive (cifar-10-batches-py/) into the dataset
container the toolkit reads: float32 NHWC images in [-1, 1], int64 labels,
manifest.json with class names and the animal / transport grouping.

    python scripts/import_cifar10.py path/to/cifar-10-batches-py data/cifar10
"""

import pickle
import sys
from pathlib import Path

import numpy as np

root = Path(__file__).resolve().parents[1]
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

from modules.config_data import Dataset, save_dataset

CLASS_NAMES = ["airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck"]
CLASS_GROUPS = {"animal": [2, 3, 4, 5, 6, 7], "transport": [0, 1, 8, 9]}


def read_batches(paths) -> Dataset:
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        images.append(np.asarray(batch[b"data"], dtype=np.uint8))
        labels.extend(batch[b"labels"])
    raw = np.concatenate(images).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(
        images=(raw.astype(np.float32) / 127.5 - 1.0),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=list(CLASS_NAMES),
        class_groups={k: list(v) for k, v in CLASS_GROUPS.items()},
    )


def convert(source: Path, target: Path) -> None:
    train_paths = [source / f"data_batch_{i}" for i in range(1, 6)]
    missing = [p for p in train_paths + [source / "test_batch"] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"Missing CIFAR-10 batch files: {', '.join(map(str, missing))}")

    train = read_batches(train_paths)
    test = read_batches([source / "test_batch"])
    save_dataset(train, target, "train")
    save_dataset(test, target, "test")
    print(f"train {len(train)}  sha256={train.checksum()}")
    print(f"test  {len(test)}  sha256={test.checksum()}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        print(__doc__)
        sys.exit(2)
    convert(Path(sys.argv[1]), Path(sys.argv[2]))
    print(f"Dataset written: {sys.argv[2]}")
