import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphdepth import tensorcore as tc
from graphdepth.errors import ConfigurationError, NumericError, UsageError
from graphdepth.tensorcore import Tape, Tensor, backward, grad_check, grad_check_report


def conv_oracle(x, k, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    B, Cin, H, W = x.shape
    Cout, _, K, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(Cin):
                        for u in range(K):
                            for v in range(K):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def bilinear_oracle(img, factor):
    """Per-pixel half-pixel-centre bilinear interpolation with edge clamping."""
    H, W = img.shape
    out = np.zeros((H * factor, W * factor))
    for i in range(H * factor):
        for j in range(W * factor):
            y = min(max((i + 0.5) / factor - 0.5, 0), H - 1)
            x = min(max((j + 0.5) / factor - 0.5, 0), W - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = ((1 - wy) * (1 - wx) * img[y0, x0] + (1 - wy) * wx * img[y0, x1]
                         + wy * (1 - wx) * img[y1, x0] + wy * wx * img[y1, x1])
    return out


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
        y = tc.conv2d(t(x), t(np.ones((1, 1, 1, 1))), t(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_constant_field_interior(self):
        c = 1.7
        y = tc.conv2d(t(np.full((1, 1, 5, 5), c)), t(np.ones((1, 1, 3, 3))), t(np.zeros(1)), padding=1)
        np.testing.assert_allclose(y.data[0, 0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-12)
        assert y.data[0, 0, 0, 0] == pytest.approx(4 * c)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(1)
        x, k, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        y = tc.conv2d(t(x), t(k), t(b), stride=stride, padding=padding)
        np.testing.assert_allclose(y.data, conv_oracle(x, k, b, stride, padding), rtol=0, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x, k, b = t(rng.standard_normal((2, 3, 5, 5))), t(rng.standard_normal((4, 3, 3, 3))), t(rng.standard_normal(4))
        err = grad_check(lambda x, k, b: tc.sum_over(tc.mul(tc.conv2d(x, k, b, 2, 1), tc.conv2d(x, k, b, 2, 1))),
                         [x, k, b], eps=1e-4)  # quadratic: no truncation error, so a wide step limits roundoff
        assert err < 1e-6

    def test_conv_relu_composite(self):
        rng = np.random.default_rng(3)
        x, k, b = t(rng.standard_normal((1, 2, 6, 6))), t(rng.standard_normal((3, 2, 3, 3))), t(rng.standard_normal(3))
        rep = grad_check_report(lambda x, k, b: tc.sum_over(tc.relu(tc.conv2d(x, k, b, 1, 1))), [x, k, b])
        assert rep.max_rel_error < 1e-5
        assert rep.checked > 0

    @pytest.mark.parametrize("shape,kernel", [((1, 2, 4, 4), (1, 3, 3, 3)), ((1, 2, 4, 4), (1, 2, 5, 5)),
                                              ((1, 2, 2, 2), (1, 2, 3, 3))])
    def test_bad_shapes(self, shape, kernel):
        with pytest.raises(ConfigurationError):
            tc.conv2d(t(np.zeros(shape)), t(np.zeros(kernel)), t(np.zeros(kernel[0])))


class TestPointwise:
    def test_relu_cases(self):
        np.testing.assert_array_equal(tc.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert tc.sigmoid(t(0.0)).item() == 0.5

    def test_exp_gradient_at_one(self):
        x = t(1.0, grad=True)
        with Tape() as tape:
            y = tc.exp(x)
        g = backward(tape, y)[x]
        fd = (math.exp(1 + 1e-6) - math.exp(1 - 1e-6)) / 2e-6
        assert g == pytest.approx(math.e, abs=1e-15)
        assert g == pytest.approx(fd, rel=1e-9)

    def test_abs_subgradient_zero(self):
        x = t([0.0, -2.0, 3.0], grad=True)
        with Tape() as tape:
            y = tc.sum_over(tc.abs_(x))
        np.testing.assert_array_equal(backward(tape, y)[x], [0, -1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            tc.add(t(np.zeros(3)), t(np.zeros(4)))

    def test_scalar_broadcast(self):
        a, s = t(np.arange(3.0), grad=True), t(2.0, grad=True)
        with Tape() as tape:
            y = tc.sum_over(tc.mul(a, s))
        g = backward(tape, y)
        np.testing.assert_array_equal(g[a], [2, 2, 2])
        assert g[s] == pytest.approx(3.0)

    def test_non_finite_is_error(self):
        with pytest.raises(NumericError) as info:
            tc.exp(t(1000.0))
        assert info.value.op == "exp"
        assert info.value.tensor_id is not None

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "softplus", "exp", "neg", "abs"])
    def test_unary_gradients(self, kind):
        x = t(np.random.default_rng(4).uniform(-2, 2, size=7))
        assert grad_check(lambda x: tc.sum_over(tc.mul(tc.pointwise(kind, x), tc.pointwise(kind, x))), [x]) < 1e-6

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_gradients(self, kind):
        rng = np.random.default_rng(5)
        a, b = t(rng.standard_normal(6)), t(rng.standard_normal(6))
        assert grad_check(lambda a, b: tc.sum_over(tc.exp(tc.pointwise(kind, a, b))), [a, b]) < 1e-6

    def test_clamp(self):
        x = t([-20.0, 0.5, 20.0], grad=True)
        with Tape() as tape:
            y = tc.sum_over(tc.clamp(x, -10, 10))
        np.testing.assert_array_equal(tc.clamp(x, -10, 10).data, [-10, 0.5, 10])
        np.testing.assert_array_equal(backward(tape, y)[x], [0, 1, 0])


class TestPoolResize:
    def test_gap_constant(self):
        y = tc.global_avg_pool(t(np.full((2, 3, 4, 5), 2.5)))
        assert y.shape == (2, 3, 1, 1)
        np.testing.assert_array_equal(y.data, 2.5)

    def test_upsample_single_sample(self):
        y = tc.upsample2x(t(np.full((1, 1, 1, 1), 3.0)))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 3.0))

    @pytest.mark.parametrize("factor", [2, 4])
    def test_upsample_matches_oracle(self, factor):
        H, W = 3, 5
        ramp = np.add.outer(0.7 * np.arange(H), -0.3 * np.arange(W)) + 1.0
        rnd = np.random.default_rng(6).standard_normal((H, W))
        for img in (ramp, rnd):
            y = tc.upsample_bilinear(t(img[None, None]), factor).data[0, 0]
            np.testing.assert_allclose(y, bilinear_oracle(img, factor), rtol=0, atol=1e-12)

    def test_upsample_constant_preserves_mean(self):
        x = t(np.full((1, 2, 3, 4), -0.25))
        up = tc.upsample2x(x)
        np.testing.assert_array_equal(up.data, -0.25)
        np.testing.assert_allclose(tc.global_avg_pool(up).data, tc.global_avg_pool(x).data, atol=1e-12)

    def test_gradients(self):
        x = t(np.random.default_rng(7).standard_normal((1, 2, 3, 3)))
        w = np.random.default_rng(8).standard_normal((1, 2, 6, 6))
        assert grad_check(lambda x: tc.sum_over(tc.mul(tc.upsample2x(x), t(w))), [x]) < 1e-7
        assert grad_check(lambda x: tc.sum_over(tc.exp(tc.global_avg_pool(x))), [x]) < 1e-7

    def test_zero_extent(self):
        with pytest.raises(ConfigurationError):
            tc.global_avg_pool(t(np.zeros((1, 1, 0, 3))))
        with pytest.raises(ConfigurationError):
            tc.pool_resize("nearest", t(np.zeros((1, 1, 2, 2))))


class TestStructural:
    def test_reshape_round_trip(self):
        x = np.arange(96.0).reshape(2, 3, 4, 4)
        flat = tc.reshape(t(x), (96,))
        np.testing.assert_array_equal(flat.data, np.arange(96.0))
        np.testing.assert_array_equal(tc.reshape(flat, (2, 3, 4, 4)).data, x)

    def test_concat_blocks(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        c = tc.concat_channels([t(a), t(b)])
        assert c.shape == (1, 5, 3, 3)
        np.testing.assert_array_equal(tc.slice_axis(c, 1, 0, 2).data, a)
        np.testing.assert_array_equal(tc.slice_axis(c, 1, 2, 5).data, b)

    def test_concat_mismatch(self):
        with pytest.raises(ConfigurationError):
            tc.concat_channels([t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 2, 4, 3)))])

    def test_matmul_gradient(self):
        rng = np.random.default_rng(10)
        a, b = t(rng.standard_normal((3, 4))), t(rng.standard_normal((4, 2)))
        assert grad_check(lambda a, b: tc.sum_over(tc.exp(tc.matmul(a, b))), [a, b]) < 1e-6

    def test_reductions_and_broadcast(self):
        rng = np.random.default_rng(11)
        x = t(rng.standard_normal((2, 3, 1, 1)))
        f = lambda x: tc.mean_over(tc.exp(tc.broadcast_to(x, (2, 3, 4, 5))), axes=(1, 2, 3))
        g = lambda x: tc.sum_over(tc.mul(f(x), f(x)))
        assert grad_check(g, [x]) < 1e-7

    def test_bad_reshape_and_broadcast(self):
        with pytest.raises(ConfigurationError):
            tc.reshape(t(np.zeros(6)), (4,))
        with pytest.raises(ConfigurationError):
            tc.broadcast_to(t(np.zeros((2, 3))), (2, 4))
        with pytest.raises(ConfigurationError):
            tc.structural("gather", t(np.zeros(2)))


class TestTape:
    def test_square(self):
        x = t(3.0, grad=True)
        with Tape() as tape:
            y = tc.mul(x, x)
        assert backward(tape, y)[x] == 6.0

    def test_dead_relu(self):
        x = t(-1.0, grad=True)
        with Tape() as tape:
            y = tc.relu(x)
        assert backward(tape, y)[x] == 0.0

    def test_fan_out_accumulates(self):
        x = t(2.0, grad=True)
        with Tape() as tape:
            y = tc.add(tc.mul(x, x), tc.scale(x, 3.0))
        assert backward(tape, y)[x] == pytest.approx(7.0)

    def test_reverse_order(self):
        x = t(np.ones(3), grad=True)
        with Tape() as tape:
            y = tc.sum_over(tc.exp(tc.scale(x, 2.0)))
        assert [r.op for r in tape.records] == ["scale", "exp", "sum"]
        assert y.tape_id == 2

    def test_non_scalar_loss(self):
        x = t(np.ones(3), grad=True)
        with Tape() as tape:
            y = tc.exp(x)
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_loss_not_on_tape(self):
        with Tape() as tape:
            pass
        with pytest.raises(UsageError):
            backward(tape, t(1.0))

    def test_outputs_read_only(self):
        y = tc.exp(t(np.zeros(2)))
        with pytest.raises(ValueError):
            y.data[0] = 1.0

    def test_untracked_outside_tape(self):
        y = tc.exp(t(np.zeros(2), grad=True))
        assert not y.requires_grad and y.tape_id is None

    def test_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(12)
            x = t(rng.standard_normal((2, 3, 6, 6)), grad=True)
            k = t(rng.standard_normal((4, 3, 3, 3)), grad=True)
            with Tape() as tape:
                y = tc.sum_over(tc.sigmoid(tc.conv2d(x, k, t(np.zeros(4)), 1, 1)))
            g = backward(tape, y)
            return y.data.tobytes(), g[x].tobytes(), g[k].tobytes()

        assert run() == run()


class TestGradCheck:
    def test_linear_is_exact(self):
        w = np.random.default_rng(13).standard_normal(5)
        assert grad_check(lambda x: tc.sum_over(tc.mul(x, t(w))), [t(np.ones(5))]) < 1e-9

    def test_sigmoid_chain(self):
        x = t(np.random.default_rng(14).standard_normal(6))
        assert grad_check(lambda x: tc.sum_over(tc.sigmoid(tc.scale(tc.sigmoid(x), 3.0))), [x]) < 1e-6

    def test_kink_is_excluded(self):
        x = t(np.array([1e-7, 1.0, -1.0]))
        rep = grad_check_report(lambda x: tc.sum_over(tc.relu(x)), [x])
        assert rep.excluded == 1 and rep.checked == 2 and rep.max_rel_error < 1e-9

    def test_eps_range_and_dtype(self):
        with pytest.raises(UsageError):
            grad_check(lambda x: tc.sum_over(x), [t(np.ones(2))], eps=1e-2)
        with pytest.raises(UsageError):
            grad_check(lambda x: tc.sum_over(x), [Tensor(np.ones(2, dtype=np.float32))])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_every_primitive_chain_matches_finite_differences(b, h, w, seed):
    rng = np.random.default_rng(seed)
    x = t(rng.standard_normal((b, 2, h, w)))
    k = t(rng.standard_normal((3, 2, 3, 3)) * 0.3)

    def f(x, k):
        y = tc.conv2d(x, k, t(np.zeros(3)), 1, 1)
        y = tc.upsample2x(tc.softplus(y))
        g = tc.sigmoid(tc.global_avg_pool(y))
        return tc.mean_over(tc.mul(tc.broadcast_to(g, y.shape), y))

    assert grad_check(f, [x, k]) < 1e-4


def test_float32_mode_preserved():
    x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    assert tc.upsample2x(x).dtype == np.float32
    assert tc.relu(x).dtype == np.float32
