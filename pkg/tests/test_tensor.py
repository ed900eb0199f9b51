import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsqdistill.tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mse,
    narrow,
    no_grad,
    reshape,
    soft_cross_entropy,
    softmax,
    swapaxes,
)

from helpers import central_diff, rel_err


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
        assert out.item() == 11.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        out = matmul(a, b)
        backward(out.sum())

        def value():
            with no_grad():
                return matmul(Tensor(a.data), Tensor(b.data)).sum().item()

        assert rel_err(a.grad, central_diff(value, a.data)) <= 1e-5
        assert rel_err(b.grad, central_diff(value, b.data)) <= 1e-5

    def test_batched_broadcast_gradients(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        backward(matmul(a, b).sum())

        def value():
            with no_grad():
                return matmul(Tensor(a.data), Tensor(b.data)).sum().item()

        assert rel_err(a.grad, central_diff(value, a.data)) <= 1e-5
        assert rel_err(b.grad, central_diff(value, b.data)) <= 1e-5


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3] * 3)

    def test_max_subtraction_stability(self):
        out = softmax(Tensor([1000.0, 1000.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_hand_evaluated(self):
        out = softmax(Tensor([0.0, math.log(3.0)]), axis=-1)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, row):
        out = softmax(Tensor([row]), axis=-1)
        assert (out.data >= 0).all()
        assert abs(out.data.sum() - 1.0) <= 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = rng.normal(size=(3, 5))  # random projection makes the grad non-trivial
        backward((softmax(x, axis=-1) * Tensor(w)).sum())

        def value():
            with no_grad():
                return (softmax(Tensor(x.data), axis=-1) * Tensor(w)).sum().item()

        assert rel_err(x.grad, central_diff(value, x.data)) <= 1e-3


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(0.0)).item() == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor(10.0)).item() - 10.0) <= 1e-4

    def test_hand_evaluated(self):
        assert abs(gelu(Tensor(1.0)).item() - 0.8411919906082768) <= 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        backward(gelu(x).sum())

        def value():
            with no_grad():
                return gelu(Tensor(x.data)).sum().item()

        assert rel_err(x.grad, central_diff(value, x.data)) <= 1e-3


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_row(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_affine_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        gain = Tensor(rng.normal(size=6), requires_grad=True)
        bias = Tensor(rng.normal(size=6), requires_grad=True)
        w = rng.normal(size=(3, 6))
        backward((layer_norm(x, gain, bias) * Tensor(w)).sum())

        def value():
            with no_grad():
                return (layer_norm(Tensor(x.data), Tensor(gain.data), Tensor(bias.data))
                        * Tensor(w)).sum().item()

        assert rel_err(x.grad, central_diff(value, x.data)) <= 1e-4
        assert rel_err(gain.grad, central_diff(value, gain.data)) <= 1e-4
        assert rel_err(bias.grad, central_diff(value, bias.data)) <= 1e-4


class TestMse:
    def test_equal_inputs(self):
        assert mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_hand_evaluated(self):
        assert mse(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0

    def test_symmetry(self):
        a, b = Tensor([0.5, -2.0, 3.0]), Tensor([1.5, 0.0, -1.0])
        assert mse(a, b).item() == mse(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_gradient(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        backward(mse(a, b))

        def value():
            with no_grad():
                return mse(Tensor(a.data), Tensor(b.data)).item()

        assert rel_err(a.grad, central_diff(value, a.data)) <= 1e-5
        assert rel_err(b.grad, central_diff(value, b.data)) <= 1e-5


class TestSoftCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4)))
        assert abs(soft_cross_entropy(logits, logits).item() - math.log(4)) <= 1e-12

    def test_one_hot_dominant_teacher(self):
        student = Tensor(np.array([[0.3, -0.2, 1.0]]))
        teacher = Tensor(np.array([[50.0, 0.0, 0.0]]))
        expected = cross_entropy(student, [0]).item()
        assert abs(soft_cross_entropy(student, teacher).item() - expected) <= 1e-8

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
    def test_self_entropy_bound(self, row):
        logits = Tensor([row])
        assert soft_cross_entropy(logits, logits).item() >= -1e-12

    def test_gradients(self):
        rng = np.random.default_rng(17)
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(soft_cross_entropy(s, t))

        def value():
            with no_grad():
                return soft_cross_entropy(Tensor(s.data), Tensor(t.data)).item()

        assert rel_err(s.grad, central_diff(value, s.data)) <= 1e-4
        assert rel_err(t.grad, central_diff(value, t.data)) <= 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(cross_entropy(Tensor(np.zeros((1, 2))), [0]).item() - math.log(2)) <= 1e-12

    def test_confident_true_class(self):
        assert cross_entropy(Tensor([[200.0, 0.0]]), [0]).item() <= 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 2))), [2])

    def test_matches_sce_against_one_hot_teacher(self):
        rng = np.random.default_rng(19)
        logits = Tensor(rng.normal(size=(4, 3)))
        labels = [2, 0, 1, 1]
        one_hot = np.full((4, 3), -1e4)
        one_hot[np.arange(4), labels] = 1e4
        ce = cross_entropy(logits, labels).item()
        sce = soft_cross_entropy(logits, Tensor(one_hot)).item()
        assert abs(ce - sce) <= 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(23)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = [0, 2, 1, 0]
        backward(cross_entropy(logits, labels))

        def value():
            with no_grad():
                return cross_entropy(Tensor(logits.data), labels).item()

        assert rel_err(logits.grad, central_diff(value, logits.data)) <= 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
        backward(w.sum())
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_mse_against_zero(self):
        w = Tensor([2.0], requires_grad=True)
        backward(mse(w, Tensor([0.0])))
        np.testing.assert_allclose(w.grad, [4.0])

    def test_non_scalar_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            backward(w + 1.0)

    def test_backward_twice_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        loss = (w * w).sum()
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_leaf_without_graph_rejected(self):
        with pytest.raises(GraphError):
            backward(Tensor(1.0, requires_grad=True))

    def test_shared_subexpression_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        y = w * w  # dy/dw = 2w via two paths
        backward(y.sum())
        np.testing.assert_allclose(w.grad, [6.0])

    def test_no_grad_suppresses_recording(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = (w * 2.0).sum()
        assert out._backward is None


class TestStructuralOps:
    def test_reshape_swap_narrow_concat_roundtrip(self):
        rng = np.random.default_rng(29)
        x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
        w = rng.normal(size=(2, 4, 6))
        parts = [narrow(x, 2, i * 2, 2) for i in range(3)]
        rebuilt = concat(parts, axis=2)
        shuffled = swapaxes(reshape(rebuilt, (2, 4, 3, 2)), 1, 2)
        flattened = reshape(swapaxes(shuffled, 1, 2), (2, 4, 6))
        np.testing.assert_array_equal(flattened.data, x.data)
        backward((flattened * Tensor(w)).sum())
        np.testing.assert_allclose(x.grad, w)

    def test_mean_axis(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = x.mean(axis=1)
        np.testing.assert_allclose(out.data, [1.0, 4.0])
        backward(out.sum())
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 3))


class TestDropout:
    def test_zero_rate_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert dropout(x, 0.0, None) is x

    def test_scaling_preserves_expectation(self):
        rng = np.random.default_rng(31)
        x = Tensor(np.ones(20000))
        out = dropout(x, 0.25, rng)
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 1 / 0.75)
        assert abs(out.data.mean() - 1.0) <= 0.02

    def test_mask_reused_in_backward(self):
        rng = np.random.default_rng(37)
        x = Tensor(np.ones(100), requires_grad=True)
        out = dropout(x, 0.5, rng)
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.where(out.data > 0, 2.0, 0.0))

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), 1.0, np.random.default_rng(0))


class TestEmbedding:
    def test_lookup_and_scatter(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 3]])
        out = embedding(table, ids)
        np.testing.assert_array_equal(out.data[0, 1], table.data[2])
        backward(out.sum())
        expected = np.zeros((4, 3))
        expected[0] = 1
        expected[2] = 2
        expected[3] = 1
        np.testing.assert_array_equal(table.grad, expected)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            embedding(Tensor(np.ones((4, 3))), np.array([[4]]))


class TestTensorBasics:
    def test_shape_data_consistency(self):
        t = Tensor(np.ones((3, 4)))
        assert math.prod(t.shape) == t.data.size

    def test_finiteness_check(self):
        Tensor([1.0]).check_finite()
        with pytest.raises(NonFiniteError):
            Tensor([np.nan]).check_finite()

    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(3, 4)))
            return gelu(softmax(x, axis=-1)).data
        np.testing.assert_array_equal(run(), run())
