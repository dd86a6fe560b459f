"""Property suite for the RealMix mathematics.

Randomised checks use 10k cases each; worked examples are evaluated by hand.
"""

import math
import warnings

import numpy as np
import pytest
import torch

from modules.augmentation import RngStream
from modules.config_data import AugmentPolicy
from modules.errors import ConfigError, DataError, NonFiniteLoss
from modules.ssl_core import (
    TsaState,
    generate_targets,
    interpolate,
    masked_count,
    mixup,
    mixup_batch,
    mixup_weight,
    ood_confidence,
    ood_mask,
    one_hot,
    rampup_weight,
    scalar,
    sharpen,
    supervised_loss,
    total_loss,
    tsa_mask,
    tsa_threshold,
    unsupervised_loss,
)

CASES = 10_000


def _random_distributions(rng, n=CASES, k=None, dtype=torch.float64):
    k = k or int(rng.integers(2, 11))
    raw = rng.dirichlet(np.full(k, 0.5), size=n) + 1e-9
    return torch.as_tensor(raw / raw.sum(axis=1, keepdims=True), dtype=dtype)


class TestSharpen:

    def test_worked_example(self):
        out = sharpen(torch.tensor([[0.6, 0.4]], dtype=torch.float64), 0.5)
        torch.testing.assert_close(out, torch.tensor([[0.36 / 0.52, 0.16 / 0.52]], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy()[0], [0.6923, 0.3077], atol=1e-4)

    def test_identity_at_unit_temperature(self):
        p = _random_distributions(np.random.default_rng(0))
        assert torch.equal(sharpen(p, 1.0), p)

    def test_normalization_and_argmax(self):
        rng = np.random.default_rng(1)
        p = _random_distributions(rng, k=10)
        temperatures = torch.as_tensor(rng.uniform(0.05, 3.0, size=(CASES, 1)))
        out = sharpen(p, temperatures)
        torch.testing.assert_close(out.sum(dim=1), torch.ones(CASES, dtype=torch.float64))
        assert torch.equal(out.argmax(dim=1), p.argmax(dim=1))
        for i in rng.choice(CASES, size=20, replace=False):
            torch.testing.assert_close(out[i:i + 1], sharpen(p[i:i + 1], float(temperatures[i])))
        full = sharpen(p, 0.5)
        torch.testing.assert_close(full.sum(dim=1), torch.ones(CASES, dtype=torch.float64))
        assert torch.equal(full.argmax(dim=1), p.argmax(dim=1))

    def test_one_hot_fixed_point(self):
        p = one_hot(torch.tensor([0, 2, 1]), 3, torch.float64)
        for t in (0.1, 0.5, 2.0):
            torch.testing.assert_close(sharpen(p, t), p)

    def test_low_temperature_approaches_one_hot(self):
        p = torch.tensor([[0.5, 0.3, 0.2]], dtype=torch.float64)
        out = sharpen(p, 0.01)
        assert out[0, 0] > 1 - 1e-12

    def test_invalid(self):
        with pytest.raises(ConfigError):
            sharpen(torch.tensor([[0.5, 0.5]]), 0.0)
        with pytest.raises(ConfigError):
            sharpen(torch.full((2, 2), 0.5), torch.tensor([[0.5], [0.0]]))
        with pytest.raises(DataError):
            sharpen(torch.zeros(1, 3), 0.5)


class TestMixup:

    def test_weight_bias(self):
        assert mixup_weight(0.3) == 0.7
        assert mixup_weight(0.8) == 0.8

    def test_worked_example(self):
        x_a, x_b = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
        y_a, y_b = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
        x, y = interpolate(x_a, y_a, x_b, y_b, mixup_weight(0.3))
        torch.testing.assert_close(x, torch.tensor([[0.7, 0.3]]))
        torch.testing.assert_close(y, torch.tensor([[0.7, 0.3]]))

    def test_equal_points_fixed(self):
        x = torch.randn(5, 3, generator=torch.Generator().manual_seed(0))
        y = torch.softmax(x, dim=1)
        out_x, out_y = mixup((x, y), (x, y), 0.75, RngStream(0, "mixup"), draw=3)
        torch.testing.assert_close(out_x, x)
        torch.testing.assert_close(out_y, y)

    def test_weights_lean_to_first_argument(self):
        rng = np.random.default_rng(0)
        means = []
        for alpha in (0.2, 0.75, 2.0, 8.0):
            w = mixup_weight(rng.beta(alpha, alpha, size=CASES))
            assert (w >= 0.5).all() and (w <= 1.0).all()
            means.append(w.mean())
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_batch_rows_independent(self):
        x_a, x_b = torch.zeros(CASES, 1, dtype=torch.float64), torch.ones(CASES, 1, dtype=torch.float64)
        y_a, y_b = one_hot(torch.zeros(CASES, dtype=torch.long), 2, torch.float64), \
            one_hot(torch.ones(CASES, dtype=torch.long), 2, torch.float64)
        x, y, w = mixup_batch(x_a, y_a, x_b, y_b, 0.75, np.random.default_rng(4))
        torch.testing.assert_close(x[:, 0], torch.as_tensor(1 - w))
        torch.testing.assert_close(y[:, 0], torch.as_tensor(w))
        assert len(np.unique(w)) > CASES // 2

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            mixup((torch.zeros(2, 3), torch.zeros(2, 2)), (torch.zeros(2, 4), torch.zeros(2, 2)),
                  0.75, RngStream(0, "mixup"))


class _Constant(torch.nn.Module):
    def __init__(self, q):
        super().__init__()
        self.q = torch.as_tensor(q, dtype=torch.float64)

    def forward(self, x):
        return self.q.expand(len(x), -1)


class _Sequence(torch.nn.Module):
    """Returns the given distributions on successive calls."""

    def __init__(self, outputs):
        super().__init__()
        self.outputs = [torch.as_tensor(o, dtype=torch.float64) for o in outputs]

    def forward(self, x):
        return self.outputs.pop(0).expand(len(x), -1)


class TestGenerateTargets:
    batch = np.zeros((4, 4, 4, 3), dtype=np.float32)
    policy = AugmentPolicy(cutout_size=2)

    def test_constant_model(self):
        q = [0.5, 0.3, 0.2]
        view, targets = generate_targets(_Constant(q), self.batch, self.policy, 0.5,
                                         RngStream(0, "target_aug"), dtype=torch.float64)
        expected = sharpen(torch.tensor([q], dtype=torch.float64), 0.5).expand(4, -1)
        torch.testing.assert_close(targets, expected)
        assert view.shape == (4, 3, 4, 4)

    def test_average_then_sharpen(self):
        model = _Sequence([[0.8, 0.2], [0.6, 0.4]])
        _, targets = generate_targets(model, self.batch, self.policy, 0.5,
                                      RngStream(0, "target_aug"), dtype=torch.float64)
        np.testing.assert_allclose(targets.numpy()[0], [0.49 / 0.58, 0.09 / 0.58], rtol=1e-12)
        np.testing.assert_allclose(targets.numpy()[0], [0.8448, 0.1552], atol=1e-4)
        torch.testing.assert_close(targets.sum(dim=1), torch.ones(4, dtype=torch.float64))

    def test_no_gradient(self):
        _, targets = generate_targets(_Constant([0.5, 0.5]), self.batch, self.policy, 0.5,
                                      RngStream(0, "target_aug"), dtype=torch.float64)
        assert not targets.requires_grad


class TestOodMask:

    def test_no_masking(self):
        losses = torch.tensor([1.0, 2.0, 3.0])
        out, kept = ood_mask(losses, torch.tensor([0.1, 0.9, 0.5]), 0.0)
        assert torch.equal(out, losses) and kept.all()

    def test_worked_example(self):
        losses = torch.tensor([1.0, 2.0, 3.0, 4.0])
        out, kept = ood_mask(losses, torch.tensor([0.9, 0.8, 0.5, 0.2]), 0.5)
        assert torch.equal(out, torch.tensor([1.0, 2.0, 0.0, 0.0]))
        assert kept.tolist() == [True, True, False, False]

    def test_quarter_of_four(self):
        _, kept = ood_mask(torch.ones(4), torch.tensor([0.3, 0.6, 0.9, 0.4]), 0.25)
        assert (~kept).sum() == 1 and not kept[0]

    def test_ties_go_to_lower_index(self):
        _, kept = ood_mask(torch.ones(4), torch.tensor([0.5, 0.5, 0.5, 0.9]), 0.5)
        assert kept.tolist() == [False, False, True, True]

    def test_kept_fraction_with_high_gamma(self):
        _, kept = ood_mask(torch.ones(64), torch.rand(64, generator=torch.Generator().manual_seed(0)), 0.99)
        assert kept.sum() == 64 - math.floor(0.99 * 64) == 1

    def test_randomised_against_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(CASES // 10):
            n = int(rng.integers(1, 40))
            gamma = float(rng.uniform(0, 0.99))
            conf = torch.as_tensor(rng.random(n))
            losses = torch.as_tensor(rng.random(n))
            out, kept = ood_mask(losses, conf, gamma)
            m = masked_count(gamma, n)
            assert (~kept).sum() == m == math.floor(round(gamma * n, 9))
            order = np.argsort(conf.numpy(), kind="stable")
            assert set(np.flatnonzero(~kept.numpy())) == set(order[:m])
            if m and m < n:
                assert conf[~kept].max() <= conf[kept].min()
            assert torch.equal(out[kept], losses[kept]) and (out[~kept] == 0).all()

    def test_confidence_is_max_probability(self):
        t = torch.tensor([[0.2, 0.8], [0.6, 0.4]])
        torch.testing.assert_close(ood_confidence(t), torch.tensor([0.8, 0.6]))

    def test_invalid_gamma(self):
        with pytest.raises(ConfigError):
            ood_mask(torch.ones(2), torch.ones(2), 1.0)


class TestTsa:

    def test_linear_endpoints(self):
        assert tsa_threshold(TsaState(0, 100, "linear", 10)) == pytest.approx(0.1)
        assert tsa_threshold(TsaState(100, 100, "linear", 10)) == pytest.approx(1.0)

    def test_exp_endpoint(self):
        assert tsa_threshold(TsaState(100, 100, "exp", 4)) == pytest.approx(1.0)

    def test_none_schedule(self):
        assert tsa_threshold(TsaState(0, 100, "none", 10)) == 1.0

    @pytest.mark.parametrize("schedule", ["linear", "log", "exp"])
    def test_bounds_and_monotonicity(self, schedule):
        rng = np.random.default_rng(11)
        for _ in range(CASES // 100):
            k = int(rng.integers(2, 11))
            total = int(rng.integers(1, 1000))
            steps = np.sort(rng.integers(0, total + 1, size=100))
            values = [tsa_threshold(TsaState(int(s), total, schedule, k)) for s in steps]
            assert min(values) >= 1 / k - 1e-12 and max(values) <= 1 + 1e-12
            assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))

    def test_mask_confident_sample(self):
        probs = torch.tensor([[0.9, 0.1], [0.3, 0.7]])
        out, kept = tsa_mask(torch.tensor([1.0, 2.0]), probs, torch.tensor([0, 0]), 0.8)
        assert kept.tolist() == [False, True]
        assert out.tolist() == [0.0, 2.0]

    def test_threshold_one_keeps_all(self):
        probs = torch.tensor([[1.0, 0.0], [0.5, 0.5]])
        _, kept = tsa_mask(torch.ones(2), probs, torch.tensor([0, 1]), 1.0)
        assert kept.all()

    def test_invalid_state(self):
        with pytest.raises(ConfigError):
            TsaState(5, 4, "linear", 10)
        with pytest.raises(ConfigError):
            TsaState(0, 4, "cosine", 10)


class TestLosses:

    def test_perfect_prediction(self):
        y = one_hot(torch.tensor([1, 0]), 3, torch.float64)
        per, mean = supervised_loss(y, y)
        assert torch.equal(per, torch.zeros(2, dtype=torch.float64)) and mean == 0

    def test_uniform_prediction(self):
        k = 7
        per, _ = supervised_loss(torch.full((1, k), 1 / k, dtype=torch.float64),
                                 one_hot(torch.tensor([3]), k, torch.float64))
        assert per.item() == pytest.approx(math.log(k), abs=1e-12)

    def test_cross_entropy_matches_brute_force(self):
        rng = np.random.default_rng(2)
        p, y = _random_distributions(rng, k=5), _random_distributions(rng, k=5)
        per, mean = supervised_loss(p, y)
        brute = np.array([-sum(y[i, j].item() * math.log(p[i, j].item()) for j in range(5))
                          for i in range(0, CASES, 50)])
        np.testing.assert_allclose(per.numpy()[::50], brute, atol=1e-9)
        assert mean.item() == pytest.approx(per.numpy().mean(), abs=1e-9)

    def test_squared_error(self):
        loss = unsupervised_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]))
        assert loss.tolist() == [1.0]

    def test_squared_error_matches_brute_force_and_is_symmetric(self):
        rng = np.random.default_rng(3)
        p, q = _random_distributions(rng, k=4), _random_distributions(rng, k=4)
        brute = ((p.numpy() - q.numpy()) ** 2).mean(axis=1)
        np.testing.assert_allclose(unsupervised_loss(p, q).numpy(), brute, atol=1e-12)
        assert torch.equal(unsupervised_loss(p, q), unsupervised_loss(q, p))
        assert (unsupervised_loss(p, p) == 0).all()

    def test_total(self):
        assert total_loss(torch.tensor(1.0), torch.tensor(0.5), 75.0).item() == pytest.approx(38.5)
        assert total_loss(torch.tensor(1.3), torch.tensor(9.0), 0.0).item() == pytest.approx(1.3)

    def test_total_is_linear_in_unsup(self):
        values = [total_loss(torch.tensor(0.4, dtype=torch.float64), torch.tensor(u, dtype=torch.float64), 3.0).item()
                  for u in (0.0, 1.0, 2.0)]
        assert values[2] - values[1] == pytest.approx(values[1] - values[0])

    def test_graph_tensors_convert_without_warning(self):
        sup = torch.tensor(1.0, requires_grad=True)
        unsup = torch.tensor(0.5, requires_grad=True)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            loss = total_loss(sup * 1.0, unsup * 1.0, 2.0)
            assert scalar(loss) == pytest.approx(2.0)
        assert loss.requires_grad

    def test_non_finite(self):
        with pytest.raises(NonFiniteLoss) as info:
            total_loss(torch.tensor(float("nan")), torch.tensor(0.0), 1.0)
        assert "sup_loss" in info.value.diagnostics

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            supervised_loss(torch.ones(2, 3) / 3, torch.ones(2, 2) / 2)

    def test_rampup(self):
        assert rampup_weight(0, 75, 100) == 0
        assert rampup_weight(50, 75, 100) == pytest.approx(37.5)
        assert rampup_weight(500, 75, 100) == 75
        assert rampup_weight(0, 75, 0) == 75
