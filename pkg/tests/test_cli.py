"""End-to-end command checks on the tiny dataset."""

import json
from pathlib import Path

import pandas as pd
import pytest

from modules.cli import main
from modules.config_data import load_config, load_split, save_dataset
from modules.tensor_io import sha256_bytes

FAST = ["--override", "batch_size=8", "--override", "model_width=4", "--override", "total_steps=4",
        "--override", "eval_every=2", "--override", "checkpoint_every=2", "--no-progress"]


@pytest.fixture
def data_dir(tmp_path, tiny_data):
    train, test = tiny_data
    save_dataset(train, tmp_path / "data", "train")
    save_dataset(test, tmp_path / "data", "test")
    return tmp_path / "data"


@pytest.fixture
def prepared(tmp_path, data_dir):
    out = tmp_path / "prep"
    assert main(["prepare", "--data", str(data_dir), "--labels", "50", "--seed", "1",
                 "--extend-copies", "1", "--out", str(out)]) == 0
    return out


def _last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


class TestPrepare:

    def test_split_file(self, prepared):
        split = load_split(prepared / "split.json")
        assert len(split.labeled_indices) == 50 and split.seed == 1
        assert list((prepared / "cache").glob("ext-*/pool_images.bin"))

    def test_rerun_is_stable(self, prepared, data_dir, capsys):
        before = (prepared / "split.json").read_bytes()
        capsys.readouterr()
        assert main(["prepare", "--data", str(data_dir), "--labels", "50", "--seed", "1",
                     "--extend-copies", "1", "--out", str(prepared)]) == 0
        assert (prepared / "split.json").read_bytes() == before

    def test_refuses_to_overwrite(self, prepared, data_dir):
        args = ["prepare", "--data", str(data_dir), "--labels", "50", "--seed", "2",
                "--extend-copies", "1", "--out", str(prepared)]
        assert main(args) == 2
        assert main(args + ["--force"]) == 0
        assert load_split(prepared / "split.json").seed == 2

    def test_mismatch_stores_gamma(self, tmp_path):
        out = tmp_path / "mm"
        assert main(["prepare", "--synthetic", "--mismatch", "100", "--gamma", "0.85",
                     "--labels-per-class", "5", "--unlabeled-per-class", "5",
                     "--extend-copies", "1", "--out", str(out)]) == 0
        cfg = load_config(out / "config.json")
        assert cfg.gamma == 0.85 and cfg.num_classes == 6
        assert (out / "data" / "manifest.json").exists()

    def test_prints_pool_checksum(self, tmp_path, data_dir, capsys):
        out = tmp_path / "p"
        assert main(["prepare", "--data", str(data_dir), "--labels", "50", "--extend-copies", "1",
                     "--out", str(out)]) == 0
        pool_line = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("pool"))
        pool_path = Path(pool_line.split()[1])
        assert pool_path.name == "pool_images.bin"
        assert pool_line.endswith("sha256=" + sha256_bytes(pool_path.read_bytes()))

    def test_invalid_labels(self, tmp_path, data_dir):
        assert main(["prepare", "--data", str(data_dir), "--labels", "55", "--out", str(tmp_path / "x")]) == 2


class TestTrain:

    def _train(self, prepared, data_dir, out, *extra):
        return main(["train", "--config", str(prepared / "config.json"), "--split", str(prepared / "split.json"),
                     "--data", str(data_dir), "--out", str(out), *FAST, *extra])

    def test_final_line_matches_metrics(self, tmp_path, prepared, data_dir, capsys):
        assert self._train(prepared, data_dir, tmp_path / "run") == 0
        line = _last_line(capsys)
        last = pd.read_csv(tmp_path / "run" / "metrics.csv").iloc[-1]
        assert line == f"test_error_ema={100 * last.test_error_ema:.2f}%"
        manifest = json.loads((tmp_path / "run" / "run_manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["exit_status"] == 0

    def test_supervised_only_override(self, tmp_path, prepared, data_dir):
        assert self._train(prepared, data_dir, tmp_path / "run", "--override", "lambda_max=0") == 0

    def test_existing_results_need_force(self, tmp_path, prepared, data_dir):
        assert self._train(prepared, data_dir, tmp_path / "run") == 0
        assert self._train(prepared, data_dir, tmp_path / "run") == 2
        assert self._train(prepared, data_dir, tmp_path / "run", "--resume") == 0
        assert self._train(prepared, data_dir, tmp_path / "run", "--force") == 0

    def test_identical_invocations_identical_csv(self, tmp_path, prepared, data_dir):
        for name in ("a", "b"):
            assert self._train(prepared, data_dir, tmp_path / name) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_bad_override(self, tmp_path, prepared, data_dir):
        assert self._train(prepared, data_dir, tmp_path / "run", "--override", "gamma=1.5") == 2
        assert self._train(prepared, data_dir, tmp_path / "run", "--override", "nonsense=1") == 2

    def test_evaluate_checkpoint(self, tmp_path, prepared, data_dir, capsys):
        assert self._train(prepared, data_dir, tmp_path / "run") == 0
        trained = _last_line(capsys)
        args = ["evaluate", "--config", str(prepared / "config.json"), "--data", str(data_dir),
                "--checkpoint", str(tmp_path / "run"), "--out", str(tmp_path / "eval"), *FAST[:-1]]
        assert main(args) == 0
        assert _last_line(capsys) == "step=4 " + trained
        assert main(args + ["--raw"]) == 0
        assert _last_line(capsys).startswith("step=4 test_error_raw=")


class TestExperimentAndReport:

    def test_labels_then_report(self, tmp_path, data_dir, capsys):
        out = tmp_path / "exp"
        args = ["experiment", "labels", "--data", str(data_dir), "--counts", "50", "--seeds", "0",
                "--out", str(out), "--override", "extend_copies=1", *FAST[:-1]]
        assert main(args) == 0
        report = json.loads((out / "report.json").read_text())
        assert {c["arm"] for c in report["conditions"]} == {"realmix", "labeled_only", "fully_supervised"}
        assert main(args) == 2

        assert main(["report", str(out / "report.json"), "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "figure.html").exists()
        assert (tmp_path / "again" / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()

    def test_seed_flag_selects_single_seed(self, tmp_path, data_dir):
        out = tmp_path / "seeded"
        assert main(["experiment", "labels", "--data", str(data_dir), "--counts", "50", "--seed", "7",
                     "--out", str(out), "--override", "extend_copies=1", *FAST[:-1]]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["seeds"] == [7]
        assert all(c["seeds"] == [7] for c in report["conditions"])

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["experiment", "bogus", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_transfer_needs_classes(self, tmp_path, data_dir):
        assert main(["experiment", "transfer", "--data", str(data_dir), "--out", str(tmp_path / "t")]) == 2
