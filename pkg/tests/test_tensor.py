import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pegeqat import ops
from pegeqat.errors import ContractError, NonFiniteError
from pegeqat.tensor import Tensor, backward, finite_diff_grad, no_grad, topological_order


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(12.0).reshape(3, 4))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_fan_out_accumulates(self):
        x = leaf([1.0, -2.0, 3.0])
        backward(ops.sum(x + x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_two_backward_calls_double(self):
        x = leaf([1.0, 2.0])
        loss = ops.sum(ops.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_k_way_fan_out(self, k):
        x = leaf([0.5, -1.5])
        w = Tensor(np.array([2.0, 3.0]))
        total = ops.mul(x, w)
        for _ in range(k - 1):
            total = total + ops.mul(x, w)
        backward(ops.sum(total))
        np.testing.assert_array_equal(x.grad, k * np.array([2.0, 3.0]))

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(ops.mul(x, x))

    def test_seed_shape_checked(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(ops.mul(x, x), np.ones(3))

    def test_explicit_seed_for_vector_output(self):
        x = leaf([1.0, 2.0])
        backward(ops.mul(x, x), np.array([1.0, 10.0]))
        np.testing.assert_array_equal(x.grad, [2.0, 40.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert y.node is None and not y.requires_grad

    def test_leaf_grad_is_a_copy(self):
        x = leaf([1.0, 2.0])
        upstream = np.array([3.0, 4.0])
        backward(ops.mul(x, Tensor([1.0, 1.0])), upstream)
        upstream[0] = 99
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])

    def test_backward_fn_arity_checked(self):
        x = leaf([1.0])
        y = Tensor.from_op(x.data * 2, (x,), lambda g: (g, g), "bad")
        with pytest.raises(ContractError):
            backward(ops.sum(y))


class TestTopology:
    def test_order_is_deterministic(self):
        def build():
            a, b = leaf([1.0]), leaf([2.0])
            c = ops.mul(a, b)
            d = c + a
            return ops.sum(d + c)

        tags = [[n.node.tag if n.node else "leaf" for n in topological_order(build())] for _ in range(3)]
        assert tags[0] == tags[1] == tags[2]

    def test_parents_before_children(self):
        a = leaf([1.0])
        b = ops.mul(a, a)
        c = b + a
        order = topological_order(ops.sum(c))
        pos = {id(t): i for i, t in enumerate(order)}
        for t in order:
            if t.node is not None:
                for p in t.node.inputs:
                    assert pos[id(p)] < pos[id(t)]


class TestFiniteDiff:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        g = finite_diff_grad(lambda t: ops.sum(ops.mul(t, t)), x, h=1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_constant_function(self):
        x = leaf([1.0, 2.0, 3.0])
        c = Tensor(np.asarray(5.0))
        g = finite_diff_grad(lambda t: c, x)
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_restores_input(self):
        x = leaf([1.0, 2.0])
        before = x.data.copy()
        finite_diff_grad(lambda t: ops.sum(ops.mul(t, t)), x)
        np.testing.assert_array_equal(x.data, before)

    def test_matches_matmul_backward(self, rng):
        a = leaf(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((4, 2)))
        backward(ops.sum(ops.matmul(a, b)))
        num = finite_diff_grad(lambda t: ops.sum(ops.matmul(t, b)), a)
        assert np.linalg.norm(a.grad - num) / np.linalg.norm(num) < 1e-4


class TestFinite:
    def test_nan_is_error_state(self):
        x = leaf([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            ops.mul(x, x)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_is_error_state(self):
        x = leaf([1e200])
        with pytest.raises(NonFiniteError):
            ops.mul(x, x)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
    def test_bounded_inputs_stay_finite(self, a):
        x = leaf(a)
        y = ops.relu(ops.mul(x, x) + x)
        assert np.isfinite(y.data).all()
        assert np.isfinite(ops.cross_entropy(ops.reshape(x, (1, -1)), [0]).data)

    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-100, 100)))
    def test_grad_shape_matches_data(self, a):
        x = leaf(a)
        backward(ops.sum(ops.mul(x, x)))
        assert x.grad.shape == x.data.shape
