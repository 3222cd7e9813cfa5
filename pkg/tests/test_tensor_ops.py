"""Forward-value and gradient tests for the tensor primitives.

Expected values are either worked out by hand (window counting, small
matrix products) or checked against central finite differences.
"""

import math

import numpy as np
import pytest

from stegograph import tensor as T
from stegograph.tensor import (
    BnState, Tape, Tensor, activation, avg_pool2d, batch_norm, concat_channels,
    conv2d, dense, global_avg_pool, grad_check, reduce_sum, softmax_cross_entropy,
    softmax_last,
)


class TestConv2d:
    def test_1x1_scaling(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = Tensor([[[[2.0]]]])
        out = conv2d(x, k, stride=1, pad=0)
        np.testing.assert_allclose(out.data, [[[2.0, 4.0], [6.0, 8.0]]])

    def test_1x1_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 7)))
        k = Tensor([[[[1.0]]]])
        out = conv2d(x, k, stride=1, pad=0)
        np.testing.assert_allclose(out.data, x.data)

    def test_3x3_ones_padded(self):
        # 4x4 plane of ones, 3x3 kernel of ones, pad 1: each output counts the
        # ones covered by its window -> 4 in corners, 6 on edges, 9 inside
        x = Tensor(np.ones((1, 4, 4)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, k, stride=1, pad=1)
        expect = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
        np.testing.assert_allclose(out.data[0], expect)

    def test_output_dims_formula(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 11, 9)))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)))
        out = conv2d(x, k, stride=2, pad=1)
        assert out.shape == (2, 4, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_same_padding_preserves_dims(self, rng):
        for kk in (1, 3, 5):
            x = Tensor(rng.normal(size=(2, 2, 8, 6)))
            k = Tensor(rng.normal(size=(3, 2, kk, kk)))
            assert conv2d(x, k, stride=1, pad=(kk - 1) // 2).shape == (2, 3, 8, 6)

    def test_bias(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        k = Tensor(np.zeros((3, 2, 1, 1)))
        b = Tensor([1.0, 2.0, 3.0])
        out = conv2d(x, k, bias=b)
        for c, v in enumerate([1.0, 2.0, 3.0]):
            np.testing.assert_allclose(out.data[:, c], v)

    def test_shape_errors(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(rng.normal(size=(1, 3, 3, 3))))  # channel mismatch
        with pytest.raises(ValueError):
            conv2d(x, Tensor(rng.normal(size=(1, 2, 2, 2))))  # even kernel
        with pytest.raises(ValueError):
            conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(rng.normal(size=(1, 1, 5, 5))))

    def test_rejects_nonfinite_input(self):
        with pytest.raises(ValueError):
            Tensor([np.inf, 1.0])
        with pytest.raises(ValueError):
            Tensor([np.nan])

    @pytest.mark.parametrize("stride,pad,kk", [(1, 1, 3), (1, 2, 5), (2, 1, 3), (2, 0, 1), (1, 0, 1)])
    def test_gradients(self, wide, rng, stride, pad, kk):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        k = Tensor(rng.normal(size=(4, 3, kk, kk)) * 0.5)
        b = Tensor(rng.normal(size=(4,)))
        assert grad_check(lambda t: reduce_sum(mulsq(conv2d(t, k, b, stride, pad))), x) < 1e-5
        assert grad_check(lambda t: reduce_sum(mulsq(conv2d(x, t, b, stride, pad))), k) < 1e-5
        assert grad_check(lambda t: reduce_sum(mulsq(conv2d(x, k, t, stride, pad))), b) < 1e-5

    def test_3d_input_matches_4d(self, rng):
        x = rng.normal(size=(3, 8, 8))
        k = Tensor(rng.normal(size=(5, 3, 3, 3)))
        out3 = conv2d(Tensor(x), k, stride=1, pad=1)
        out4 = conv2d(Tensor(x[None]), k, stride=1, pad=1)
        np.testing.assert_allclose(out3.data, out4.data[0])


def mulsq(t):
    # squares values so gradients depend on the forward result
    return T.mul(t, t)


class TestAvgPool:
    def test_padded_window(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        out = avg_pool2d(x, k=3, stride=2, pad=1)
        np.testing.assert_allclose(out.data, [[[10.0 / 9.0]]])

    def test_constant_invariance(self):
        x = Tensor(np.full((2, 3, 5, 5), 7.0))
        out = avg_pool2d(x, k=3, stride=1, pad=0)
        np.testing.assert_allclose(out.data, np.full((2, 3, 3, 3), 7.0))

    def test_global_case(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        out = avg_pool2d(Tensor(x), k=5, stride=1, pad=0)
        np.testing.assert_allclose(out.data[0, :, 0, 0], x.mean(axis=(2, 3))[0], rtol=1e-6)

    def test_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(2, 2, 6, 6)))
        assert grad_check(lambda t: reduce_sum(mulsq(avg_pool2d(t, 3, 2, 1))), x) < 1e-6


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((1, 3, 4, 4), 3.0)))
        np.testing.assert_allclose(out.data, [[3.0, 3.0, 3.0]])

    def test_mean(self):
        x = Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        np.testing.assert_allclose(global_avg_pool(x).data, [[4.0]])

    def test_zero(self):
        np.testing.assert_array_equal(global_avg_pool(Tensor(np.zeros((2, 3, 2, 2)))).data,
                                      np.zeros((2, 3)))

    def test_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert grad_check(lambda t: reduce_sum(mulsq(global_avg_pool(t))), x) < 1e-6


class TestBatchNorm:
    def test_two_value_batch(self, wide):
        s = BnState(1)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1))
        out = batch_norm(x, s, training=True)
        v = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data.ravel(), [-v, v], rtol=1e-9)

    def test_gamma_zero_gives_beta(self, rng):
        s = BnState(3)
        s.gamma.data[:] = 0.0
        s.beta.data[:] = 2.5
        out = batch_norm(Tensor(rng.normal(size=(4, 3, 2, 2))), s, training=True)
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_identity_running_stats(self, rng):
        s = BnState(2)
        x = rng.normal(size=(3, 2, 4, 4))
        out = batch_norm(Tensor(x), s, training=False)
        np.testing.assert_allclose(out.data, x, rtol=1e-4, atol=1e-5)

    def test_running_stats_ema(self, rng):
        s = BnState(1)
        x = rng.normal(size=(8, 1, 4, 4)) * 2.0 + 5.0
        batch_norm(Tensor(x), s, training=True)
        np.testing.assert_allclose(s.running_mean, 0.9 * 0.0 + 0.1 * x.mean(), rtol=1e-5)
        np.testing.assert_allclose(s.running_var, 0.9 * 1.0 + 0.1 * x.var(), rtol=1e-5)

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError):
            batch_norm(Tensor(rng.normal(size=(1, 2, 3, 3))), BnState(2), training=True)

    def test_gradients(self, wide, rng):
        s = BnState(3)
        s.gamma.data[:] = rng.normal(size=3)
        s.beta.data[:] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(4, 3, 3, 3)))
        # weight the output so the loss is not flat in x (plain sums of a
        # normalized batch barely move under single-coordinate perturbations)
        c = Tensor(rng.normal(size=(4, 3, 3, 3)))

        def loss_x(t):
            return reduce_sum(T.mul(c, batch_norm(t, s, training=True)))

        assert grad_check(loss_x, x) < 1e-6
        assert grad_check(lambda t: reduce_sum(T.mul(c, batch_norm(x, s, training=True))),
                          s.gamma) < 1e-6
        assert grad_check(lambda t: reduce_sum(T.mul(c, batch_norm(x, s, training=True))),
                          s.beta) < 1e-6
        assert grad_check(lambda t: reduce_sum(T.mul(c, batch_norm(t, s, training=False))),
                          x) < 1e-6


class TestDense:
    def test_identity(self, rng):
        x = Tensor(rng.normal(size=4))
        np.testing.assert_allclose(dense(x, Tensor(np.eye(4))).data, x.data)

    def test_row_sum(self):
        np.testing.assert_allclose(dense(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]])).data, [5.0])

    def test_matmul(self):
        out = dense(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [3.0, 7.0])

    def test_batched(self, rng):
        x = rng.normal(size=(5, 3))
        W = rng.normal(size=(2, 3))
        out = dense(Tensor(x), Tensor(W))
        np.testing.assert_allclose(out.data, x @ W.T, rtol=1e-5)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            dense(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(2, 4))))

    def test_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        W = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=2))
        assert grad_check(lambda t: reduce_sum(mulsq(dense(t, W, b))), x) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(dense(x, t, b))), W) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(dense(x, W, t))), b) < 1e-6


class TestActivation:
    def test_relu(self):
        out = activation(Tensor([-2.0, 2.0]), "relu")
        np.testing.assert_allclose(out.data, [0.0, 2.0])

    def test_leaky(self):
        out = activation(Tensor([-1.0, 1.0]), "leaky_relu")
        np.testing.assert_allclose(out.data, [-0.2, 1.0], rtol=1e-6)

    def test_elu(self, wide):
        out = activation(Tensor([-1.0, 2.0]), "elu")
        np.testing.assert_allclose(out.data, [math.exp(-1) - 1, 2.0], rtol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            activation(Tensor([1.0]), "swish")

    @pytest.mark.parametrize("mode", ["relu", "leaky_relu", "elu"])
    def test_gradients(self, wide, rng, mode):
        # keep coordinates away from the kink at 0
        vals = rng.normal(size=20)
        vals[np.abs(vals) < 0.05] = 0.5
        x = Tensor(vals)
        assert grad_check(lambda t: reduce_sum(mulsq(activation(t, mode))), x) < 1e-6


class TestConcat:
    def test_channel_count(self, rng):
        a = Tensor(rng.normal(size=(30, 4, 4)))
        b = Tensor(rng.normal(size=(30, 4, 4)))
        assert concat_channels(a, b).shape == (60, 4, 4)

    def test_first_block_recoverable(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4)))
        z = Tensor(np.zeros((2, 4, 4)))
        cat = concat_channels(x, z)
        k = np.zeros((2, 4, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = conv2d(cat, Tensor(k))
        np.testing.assert_allclose(out.data, x.data)

    def test_channel_order(self, rng):
        a = Tensor(rng.normal(size=(3, 2, 2)))
        b = Tensor(rng.normal(size=(2, 2, 2)))
        out = concat_channels(a, b)
        np.testing.assert_array_equal(out.data[3], b.data[0])

    def test_spatial_mismatch(self, rng):
        with pytest.raises(ValueError):
            concat_channels(Tensor(rng.normal(size=(1, 2, 2))), Tensor(rng.normal(size=(1, 3, 3))))

    def test_gradients(self, wide, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        b = Tensor(rng.normal(size=(1, 3, 3)))
        assert grad_check(lambda t: reduce_sum(mulsq(concat_channels(t, b))), a) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(concat_channels(a, t))), b) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform(self, wide):
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
        np.testing.assert_allclose(loss.item(), math.log(2), rtol=1e-12)

    def test_no_overflow(self, wide):
        loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert 0.0 <= loss.item() < 1e-6

    def test_value(self, wide):
        loss = softmax_cross_entropy(Tensor([[1.0, 2.0]]), [1])
        np.testing.assert_allclose(loss.item(), math.log(1 + math.exp(-1)), rtol=1e-12)

    def test_mean_over_batch(self, wide):
        l2 = softmax_cross_entropy(Tensor([[0.0, 0.0], [0.0, 0.0]]), [0, 1])
        np.testing.assert_allclose(l2.item(), math.log(2), rtol=1e-12)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(5, 2)))
        labels = np.array([0, 1, 1, 0, 1])
        assert grad_check(lambda t: softmax_cross_entropy(t, labels), x) < 1e-6


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(7, 9)) * 10)
        y = softmax_last(x)
        assert (y.data >= 0).all()
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda t: reduce_sum(mulsq(softmax_last(t))), x) < 1e-6


class TestStructuralOps:
    def test_reshape_transpose_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        y = T.transpose(T.reshape(x, (6, 4)), (1, 0))
        assert y.shape == (4, 6)
        np.testing.assert_allclose(T.transpose(y, (1, 0)).data.reshape(2, 3, 4), x.data)

    def test_structural_gradients(self, wide, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        assert grad_check(lambda t: reduce_sum(mulsq(T.transpose(t, (2, 0, 1)))), x) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(T.reshape(t, (4, 6)))), x) < 1e-6
        v = Tensor(rng.normal(size=8))
        assert grad_check(lambda t: reduce_sum(mulsq(T.slice1d(t, 2, 6))), v) < 1e-6
        m = Tensor(rng.normal(size=(2, 4, 4)))
        assert grad_check(lambda t: reduce_sum(mulsq(T.repeat_channels(t, 5))), m) < 1e-6

    def test_matmul_gradients(self, wide, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(lambda t: reduce_sum(mulsq(T.matmul(t, b))), a) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(T.matmul(a, t))), b) < 1e-6

    def test_broadcast_add_gradients(self, wide, rng):
        a = Tensor(rng.normal(size=(3, 4, 1)))
        b = Tensor(rng.normal(size=(3, 1, 4)))
        assert grad_check(lambda t: reduce_sum(mulsq(T.add(t, b))), a) < 1e-6
        assert grad_check(lambda t: reduce_sum(mulsq(T.add(a, t))), b) < 1e-6

    def test_reduce_mean_axis(self, rng):
        x = rng.normal(size=(2, 5, 3))
        out = T.reduce_mean(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data, x.mean(axis=1), rtol=1e-5)
