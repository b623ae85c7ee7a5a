import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphdepth import tensorcore as tc
from graphdepth.errors import ConfigurationError, UsageError
from graphdepth.objective import (LossWeights, bad_pixel_rate, compute_metrics, depth_loss, l1_and_gradient_loss,
                                  total_loss, uncertainty_loss)
from graphdepth.tensorcore import Tensor, grad_check


def loss_oracle(D, Y, S, M):
    """Pixel loops over the masked terms."""
    B, H, W = D.shape
    n = M.sum()
    l1 = sum(abs(D[b, i, j] - Y[b, i, j]) for b in range(B) for i in range(H) for j in range(W) if M[b, i, j]) / n
    g = 0.0
    for b in range(B):
        for i in range(H):
            for j in range(W):
                e = D[b, i, j] - Y[b, i, j]
                if j + 1 < W and M[b, i, j] and M[b, i, j + 1]:
                    g += abs((D[b, i, j + 1] - Y[b, i, j + 1]) - e)
                if i + 1 < H and M[b, i, j] and M[b, i + 1, j]:
                    g += abs((D[b, i + 1, j] - Y[b, i + 1, j]) - e)
    unc = sum(abs(D[b, i, j] - Y[b, i, j]) * np.exp(-S[b, i, j]) + S[b, i, j]
              for b in range(B) for i in range(H) for j in range(W) if M[b, i, j]) / n
    return l1, g / n, unc


def _random(seed, shape=(2, 5, 6)):
    rng = np.random.default_rng(seed)
    D = rng.uniform(0.5, 9, size=shape)
    Y = rng.uniform(0.5, 9, size=shape)
    S = rng.uniform(-2, 2, size=shape)
    M = rng.uniform(size=shape) > 0.2
    M.flat[0] = True
    return D, Y, S, M


class TestLosses:
    def test_matches_oracle(self):
        D, Y, S, M = _random(0)
        br = depth_loss(Tensor(D), Tensor(S), Y, M)
        l1, g, unc = loss_oracle(D, Y, S, M)
        np.testing.assert_allclose([br.l1.item(), br.grad.item(), br.unc.item()], [l1, g, unc], rtol=1e-12)

    def test_perfect_prediction(self):
        D, _, S, M = _random(1)
        br = depth_loss(Tensor(D), Tensor(S), D, M)
        assert br.l1.item() == 0 and br.grad.item() == 0
        np.testing.assert_allclose(br.unc.item(), S[M].mean(), rtol=1e-14)

    def test_unc_at_zero_log_var_equals_l1(self):
        D, Y, _, M = _random(2)
        l1, _ = l1_and_gradient_loss(Tensor(D), Y, M)
        unc = uncertainty_loss(Tensor(D), Tensor(np.zeros_like(D)), Y, M)
        assert abs(unc.item() - l1.item()) <= 1e-15

    def test_weights(self):
        assert LossWeights() == LossWeights(0.85, 0.15, 0.5)
        D, Y, S, M = _random(3)
        br = depth_loss(Tensor(D), Tensor(S), Y, M)
        v = br.values()
        assert abs(v["total"] - (0.85 * v["l1"] + 0.15 * v["grad"] + 0.5 * v["unc"])) <= 1e-12
        assert abs(sum(br.contributions().values()) - v["total"]) <= 1e-12
        no_unc = depth_loss(Tensor(D), None, Y, M)
        assert no_unc.unc is None and no_unc.values()["unc"] == 0.0
        assert abs(no_unc.total.item() - (0.85 * v["l1"] + 0.15 * v["grad"])) <= 1e-12

    def test_single_column_has_only_vertical_gradient(self):
        D, Y, S, M = _random(4, (1, 5, 1))
        _, g = l1_and_gradient_loss(Tensor(D), Y, M)
        np.testing.assert_allclose(g.item(), loss_oracle(D, Y, S, M)[1], rtol=1e-12)
        _, g = l1_and_gradient_loss(Tensor(np.ones((1, 1, 1))), np.ones((1, 1, 1)))
        assert g.item() == 0

    def test_gradients(self):
        D, Y, S, M = _random(5, (1, 3, 4))
        fn = lambda d, s: depth_loss(d, s, Y, M).total
        assert grad_check(fn, [Tensor(D, requires_grad=True), Tensor(S, requires_grad=True)]) < 1e-6

    def test_errors(self):
        D = Tensor(np.ones((1, 2, 2)))
        with pytest.raises(UsageError):
            depth_loss(D, None, np.ones((1, 2, 2)), np.zeros((1, 2, 2)))
        with pytest.raises(ConfigurationError):
            depth_loss(D, None, np.ones((1, 2, 3)))
        with pytest.raises(ConfigurationError):
            uncertainty_loss(D, Tensor(np.zeros((1, 2, 3))), np.ones((1, 2, 2)))
        with pytest.raises(ConfigurationError):
            LossWeights(alpha=-1)

    def test_total_from_parts(self):
        br = total_loss(Tensor(np.array(2.0)), Tensor(np.array(4.0)), Tensor(np.array(-1.0)))
        assert br.total.item() == pytest.approx(0.85 * 2 + 0.15 * 4 - 0.5)


class TestMetrics:
    def test_hand_values(self):
        pred = np.array([[1.0, 2.0], [3.0, 5.0]])
        truth = np.array([[1.0, 1.0], [3.0, 4.0]])
        m = compute_metrics(pred, truth)
        assert m["rmse"] == pytest.approx(np.sqrt((1 + 1) / 4))
        assert m["abs_rel"] == pytest.approx((1 + 0.25) / 4)
        assert m["delta1"] == pytest.approx(0.5)  # ratios 1, 2, 1, 1.25; the last is not < 1.25
        assert m["mae"] == pytest.approx(0.5)

    def test_mask_and_zero_prediction(self):
        m = compute_metrics(np.array([0.0, 2.0, 100.0]), np.array([1.0, 2.0, 1.0]), np.array([1, 1, 0]))
        assert m["delta1"] == 0.5 and m["mae"] == 0.5

    def test_errors(self):
        with pytest.raises(UsageError):
            compute_metrics(np.ones(3), np.array([1.0, 0.0, 1.0]))
        with pytest.raises(UsageError):
            compute_metrics(np.ones(3), np.ones(3), np.zeros(3))
        with pytest.raises(ConfigurationError):
            compute_metrics(np.ones(3), np.ones(4))

    def test_bad_pixel_rate(self):
        assert bad_pixel_rate(np.array([0.0, 3.0, 5.0]), np.array([0.0, 0.0, 0.0])) == pytest.approx(2 / 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
def test_total_identity_and_nonnegativity(seed, B, H, W):
    D, Y, S, M = _random(seed, (B, H, W))
    br = depth_loss(Tensor(D), Tensor(S), Y, M)
    v = br.values()
    assert abs(v["total"] - (0.85 * v["l1"] + 0.15 * v["grad"] + 0.5 * v["unc"])) <= 1e-12
    assert v["l1"] >= 0 and v["grad"] >= 0
    # |e| exp(-s) + s >= 1 + log|e| for every s, so unc is bounded below
    err = np.abs(D - Y)[M]
    assert v["unc"] >= np.mean(1 + np.log(np.maximum(err, 1e-300))) - 1e-9
