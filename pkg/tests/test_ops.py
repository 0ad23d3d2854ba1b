import math

import numpy as np
import pytest

from pegeqat import gradcheck, ops
from pegeqat.errors import DimensionError
from pegeqat.tensor import Tensor, backward, finite_diff_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_expansion(self):
        out = ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_gradient_value(self):
        a = leaf([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        backward(ops.sum(ops.matmul(a, b)))
        # central differences at h=1e-4 give [[3, 4]]
        num = finite_diff_grad(lambda t: ops.sum(ops.matmul(t, b)), a, h=1e-4)
        np.testing.assert_allclose(num, [[3.0, 4.0]], atol=1e-9)
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_zero_kernel(self, rng):
        out = ops.conv2d(Tensor(rng.standard_normal((2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))), 1, 1)
        assert out.shape == (2, 4, 5, 5)
        assert not out.data.any()

    def test_gradient_on_4x4(self, rng):
        x = leaf(rng.standard_normal((1, 1, 4, 4)))
        w = leaf(rng.standard_normal((1, 1, 3, 3)))
        r = Tensor(rng.standard_normal((1, 1, 2, 2)))

        def f(_):
            return ops.sum(ops.mul(ops.conv2d(x, w), r))

        backward(f(None))
        for t in (x, w):
            num = finite_diff_grad(f, t)
            assert gradcheck.rel_err(t.grad, num) < 1e-4

    def test_matches_direct_loops(self, rng):
        x = rng.standard_normal((2, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 2))
        stride, pad = 2, 1
        out = ops.conv2d(Tensor(x), Tensor(w), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (5 + 2 * pad - 3) // stride + 1
        wo = (6 + 2 * pad - 2) // stride + 1
        ref = np.zeros((2, 3, ho, wo))
        for n in range(2):
            for f in range(3):
                for i in range(ho):
                    for j in range(wo):
                        ref[n, f, i, j] = np.sum(xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 2] * w[f])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_floor_output_extent(self):
        assert ops.conv_output_size(6, 3, 2, 0) == 2
        out = ops.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, 2, 2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_subgradient_at_zero(self):
        x = leaf([-1.0, 0.0, 2.0])
        backward(ops.relu(x), np.ones(3))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_identity_on_positive(self, rng):
        a = rng.uniform(0.1, 5, 10)
        np.testing.assert_array_equal(ops.relu(Tensor(a)).data, a)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ops.cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
        assert loss.item() == pytest.approx(2.302585, abs=1e-6)

    def test_large_logits_stable(self):
        loss = ops.cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_on_4x5(self, rng):
        z = leaf(rng.standard_normal((4, 5)))
        y = np.array([0, 3, 1, 4])
        backward(ops.cross_entropy(z, y))
        num = finite_diff_grad(lambda t: ops.cross_entropy(t, y), z)
        assert gradcheck.rel_err(z.grad, num) < 1e-4

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = leaf(rng.standard_normal((3, 4)))
        y = np.array([1, 0, 3])
        backward(ops.cross_entropy(z, y))
        p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
        p[np.arange(3), y] -= 1
        np.testing.assert_allclose(z.grad, p / 3, atol=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestOtherOps:
    def test_maxpool_forward(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data, [[[[5, 7], [13, 15]]]])

    def test_global_avgpool(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(ops.global_avgpool(Tensor(x)).data, x.mean(axis=(2, 3)))

    def test_channel_shortcut(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out = ops.channel_shortcut(Tensor(x), 4, 2).data
        assert out.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(out[:, 1:3], x[:, :, ::2, ::2])
        assert not out[:, 0].any() and not out[:, 3].any()

    def test_batchnorm_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((4, 2))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
        np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5))

    def test_batchnorm_train_normalizes(self, rng):
        x = rng.standard_normal((8, 3, 4, 4)) * 3 + 2
        out = ops.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_bias_add_channel_axis(self):
        out = ops.bias_add(Tensor(np.zeros((1, 2, 2, 2))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data[0, :, 0, 0], [1, 2])

    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


@pytest.mark.parametrize("name", sorted(gradcheck.OP_CASES))
def test_finite_difference_oracle(name):
    res = gradcheck.run_op(name, instances=10, seed=7)
    assert res.passed, res.line()
