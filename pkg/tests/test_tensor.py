import numpy as np
import pytest

from crossing_tool.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    check_gradients,
    concat,
    einsum,
    elementwise,
    index,
    is_recording,
    mean,
    mul,
    no_grad,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    split,
    stack,
    tanh,
)


class TestElementwise:
    def test_mismatched_shapes_name_the_axis(self):
        with pytest.raises(ShapeError, match="axis 1"):
            mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_rank_mismatch_is_not_broadcast(self):
        with pytest.raises(ShapeError, match="rank"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(3))

    def test_zero_dim_operand_combines_with_any_shape(self):
        out = Tensor(np.arange(6.0).reshape(2, 3)) * Tensor(2.0)
        np.testing.assert_array_equal(out.data, np.arange(6.0).reshape(2, 3) * 2)

    def test_sigmoid_saturates_without_overflow(self):
        out = sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_relu_and_tanh_values(self):
        x = Tensor([-2.0, 0.5])
        np.testing.assert_array_equal(relu(x).data, [0.0, 0.5])
        np.testing.assert_allclose(tanh(x).data, np.tanh([-2.0, 0.5]))

    def test_dispatcher_rejects_unknown_op(self):
        with pytest.raises(ValueError, match="Unknown elementwise op"):
            elementwise("cube", Tensor(1.0))


class TestBackward:
    def test_product_rule(self):
        x, y = Tensor(3.0), Tensor(4.0)
        backward(x * y + x)
        assert x.grad == 5.0
        assert y.grad == 3.0

    def test_shared_subexpression_accumulates(self):
        x = Tensor([1.0, -2.0])
        backward(reduce_sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor(2.0)
        y = x * x
        backward(y)
        backward(y)
        assert x.grad == 8.0

    def test_non_scalar_output_is_rejected(self):
        with pytest.raises(GraphError, match="scalar"):
            backward(Tensor(np.ones(3)) * 2.0)

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(1.0)
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(y)
        assert x.grad == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0)
        with no_grad():
            assert not is_recording()
            y = x * 3.0
        assert is_recording()
        assert y.node is None


class TestShapeOps:
    def test_reduce_sum_axis_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        backward(reduce_sum(reduce_sum(x, axis=1) * Tensor([1.0, 2.0])))
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])

    def test_mean(self):
        assert mean(Tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0

    def test_reshape_rejects_bad_size(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_fancy_index_repeats_accumulate(self):
        x = Tensor([1.0, 2.0, 3.0])
        backward(reduce_sum(index(x, np.array([0, 0, 1]))))
        np.testing.assert_array_equal(x.grad, [2.0, 1.0, 0.0])

    def test_concat_and_split_are_inverse(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 5)))
        joined = concat([a, b], axis=1)
        left, right = split(joined, [3, 5], axis=1)
        np.testing.assert_array_equal(left.data, a.data)
        np.testing.assert_array_equal(right.data, b.data)

    def test_concat_rejects_empty_and_mismatched(self):
        with pytest.raises(ShapeError):
            concat([])
        with pytest.raises(ShapeError, match="axis 0"):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_split_rejects_indivisible_extent(self):
        with pytest.raises(ShapeError):
            split(Tensor(np.ones(5)), 2)

    def test_stack_gradient(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
        backward(reduce_sum(stack([a, b], axis=0) * Tensor([[1.0, 1.0], [2.0, 2.0]])))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0])


class TestEinsum:
    def test_matches_numpy(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(einsum("ij,jk->ik", a, b).data, a @ b)

    def test_requires_explicit_output(self):
        with pytest.raises(ShapeError):
            einsum("ij,jk", np.ones((2, 2)), np.ones((2, 2)))

    def test_rejects_repeated_index(self):
        with pytest.raises(ShapeError):
            einsum("ii->i", np.ones((2, 2)))

    def test_gradient_with_summed_out_index(self, rng):
        q = Tensor(rng.normal(size=(2, 3)))
        w = Tensor(rng.normal(size=(3, 3)))
        s = Tensor(rng.normal(size=(2, 4, 3)))
        err = check_gradients(lambda: reduce_sum(tanh(einsum("bd,de,bte->bt", q, w, s))), [q, w, s])
        assert err < 1e-6


def test_check_gradients_on_composite(rng):
    x = Tensor(rng.normal(size=(3, 2)))
    y = Tensor(rng.normal(size=(3, 2)))
    assert check_gradients(lambda: reduce_sum(sigmoid(x * y) * tanh(x)), [x, y]) < 1e-6
