"""Desk-scale paired experiments on the synthetic dataset.

These train real models for thousands of steps per arm and take hours on a
CPU.  They run only with REALMIX_RUN_SLOW=1; REALMIX_DESK_STEPS and
REALMIX_JOBS scale the budget.
"""

import os

import numpy as np
import pytest

import config as defaults
from modules.config_data import Config
from modules.demo_data import make_synthetic_dataset
from modules.experiments import ExperimentData, run_ablation, run_label_sweep, run_mismatch_sweep, run_transfer

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("REALMIX_RUN_SLOW") != "1", reason="set REALMIX_RUN_SLOW=1"),
]

STEPS = int(os.environ.get("REALMIX_DESK_STEPS", defaults.DEFAULT_TOTAL_STEPS))
JOBS = int(os.environ.get("REALMIX_JOBS", "1"))
SEEDS = list(defaults.DEFAULT_SEEDS)


@pytest.fixture(scope="module")
def desk():
    return ExperimentData(*make_synthetic_dataset(seed=0))


@pytest.fixture(scope="module")
def base():
    return Config(total_steps=STEPS, lambda_rampup_steps=min(defaults.DEFAULT_LAMBDA_RAMPUP_STEPS, STEPS),
                  eval_every=STEPS, checkpoint_every=0)


def _paired(report, arm_a, arm_b, **condition):
    a = np.array(report.find(arm_a, **condition).errors)
    b = np.array(report.find(arm_b, **condition).errors)
    return a, b


def test_ssl_gain_over_labeled_only(base, desk):
    report = run_label_sweep(base, desk, [250], SEEDS, jobs=JOBS)
    realmix, labeled_only = _paired(report, "realmix", "labeled_only", labels=250)
    assert realmix.mean() <= 0.8 * labeled_only.mean()
    assert report.find("labeled_only", labels=250).unlabeled_batches == [0] * len(SEEDS)


def test_error_nonincreasing_in_label_count(base, desk):
    counts = list(defaults.DEFAULT_LABEL_COUNTS)
    report = run_label_sweep(base, desk, counts, SEEDS, jobs=JOBS)
    means = [report.find("realmix", labels=n).mean for n in counts]
    for fewer, more in zip(means, means[1:]):
        assert more <= fewer + 0.01


def test_mismatch_robustness(base, desk):
    report = run_mismatch_sweep(base, desk, defaults.MISMATCH_LEVELS, SEEDS, jobs=JOBS)
    at_full = np.array(report.find("realmix", mismatch=100).errors)
    assert at_full.mean() <= report.baseline_error + 0.01

    def spread(arm):
        means = [report.find(arm, mismatch=level).mean for level in defaults.MISMATCH_LEVELS]
        return max(means) - min(means)

    assert spread("realmix") < spread("gamma0_control")


def test_removing_ood_mask_hurts(base, desk):
    report = run_ablation(base, desk, ["no_mask"], SEEDS, protocol={"kind": "mismatch", "mismatch": 75},
                          jobs=JOBS)
    control, no_mask = _paired(report, "control", "no_mask")
    assert (no_mask - control).mean() > 0


def test_weaker_extension_does_not_help(base, desk):
    report = run_ablation(base, desk, ["simple_aug", "copies_25"], SEEDS,
                          protocol={"kind": "labels", "labels": 250}, jobs=JOBS)
    control = report.find("control").mean
    assert report.find("simple_aug").mean >= control - 0.003
    assert report.find("copies_25").mean >= control - 0.003


def test_pretraining_complements_realmix(base, desk):
    animals, transport = (list(defaults.DESK_CLASS_GROUPS[g]) for g in ("animal", "transport"))
    report = run_transfer(base, desk, animals, transport, SEEDS, n_labels=100,
                          pretrain_steps=min(defaults.DEFAULT_PRETRAIN_STEPS, STEPS), jobs=JOBS)
    pretrained, scratch = _paired(report, "realmix_pretrained", "realmix_scratch")
    assert pretrained.mean() <= scratch.mean()
