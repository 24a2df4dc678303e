import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchagg import tensor as T
from patchagg.gradcheck import check
from patchagg.tensor import ShapeError, Tensor, no_grad, precision

finite = st.floats(-5, 5, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_defaults_to_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_scalar_broadcast(self):
        x = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal((x * 2 + 1).data, [3, 5, 7])
        np.testing.assert_array_equal((1 - x).data, [0, -1, -2])

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones(3))

    def test_division_only_by_scalars(self):
        with pytest.raises(TypeError):
            Tensor([1.0]) / Tensor([2.0])

    def test_sigmoid_is_stable(self):
        out = Tensor(np.array([-1000.0, 0.0, 1000.0])).sigmoid().data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    def test_log_exp_round_trip(self):
        x = np.random.default_rng(0).uniform(-5, 5, 100)
        with precision(np.float64):
            back = Tensor(x).exp().log().data
        np.testing.assert_allclose(back, x, atol=1e-12, rtol=0)

    def test_matmul_shape_check(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestBackward:
    def test_product_rule(self):
        a, b = leaf([2.0, 3.0]), leaf([5.0, 7.0])
        (a * b).sum().backward()
        np.testing.assert_array_equal(a.grad, [5, 7])
        np.testing.assert_array_equal(b.grad, [2, 3])

    def test_reused_node_accumulates(self):
        a = leaf([3.0])
        (a * a + a).sum().backward()
        np.testing.assert_array_equal(a.grad, [7.0])

    def test_leaf_grads_add_across_calls(self):
        a = leaf([1.0, 2.0])
        (a * 3).sum().backward()
        (a * 3).sum().backward()
        np.testing.assert_array_equal(a.grad, [6, 6])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            (leaf([1.0, 2.0]) * 2).backward()

    def test_detached_loss_rejected(self):
        with pytest.raises(RuntimeError):
            Tensor([1.0]).sum().backward()

    def test_two_backward_passes_are_bit_identical(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        loss = (x @ w).relu().sigmoid().sum()
        loss.backward()
        first = w.grad.copy()
        w.grad = None
        loss.backward()
        assert first.tobytes() == w.grad.tobytes()

    def test_no_grad_records_nothing(self):
        w = leaf(np.ones((2, 2)))
        with no_grad():
            out = (w @ w).relu().sum()
        assert out.is_leaf and not out.requires_grad
        assert w.grad is None

    def test_broadcast_to_sums_back(self):
        g = leaf(np.array([[1.0], [2.0]]))
        out = T.broadcast_to(g, (2, 3))
        (out * Tensor(np.arange(6.0).reshape(2, 3))).sum().backward()
        np.testing.assert_array_equal(g.grad, [[3.0], [12.0]])

    def test_three_layer_composition_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        with precision(np.float64):
            x = Tensor(rng.normal(size=(6, 4)))
            w1, w2, w3 = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 5))), leaf(rng.normal(size=(5, 2)))

            def loss():
                h = (x @ w1).sigmoid()
                h = (h @ w2).exp().log() * 0.5
                return ((h @ w3).sigmoid() * Tensor(rng_w)).sum()

            rng_w = rng.normal(size=(6, 2))
            assert check(loss, [w1, w2, w3]) < 1e-6

    def test_stack_rows_splits_gradient(self):
        a, b = leaf(np.ones((1, 2))), leaf(np.ones((2, 2)))
        out = T.stack_rows([a, b])
        (out * Tensor(np.arange(6.0).reshape(3, 2))).sum().backward()
        np.testing.assert_array_equal(a.grad, [[0, 1]])
        np.testing.assert_array_equal(b.grad, [[2, 3], [4, 5]])


class TestChecked:
    def test_checked_mode_raises_on_nan(self):
        with T.checked(), np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            Tensor(np.array([-1.0])).log()

    def test_unchecked_mode_propagates_nan(self):
        with np.errstate(invalid="ignore"):
            assert np.isnan(Tensor(np.array([-1.0])).log().data[0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_elementwise_gradients_match_closed_form(a, b):
    ta, tb = leaf(a), leaf(b)
    (ta * tb + ta.sigmoid() - tb * 3.0).sum().backward()
    s = 1 / (1 + np.exp(-a))
    np.testing.assert_allclose(ta.grad, b + s * (1 - s), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a - 3.0, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_reshape_transpose_preserve_gradient_layout(a):
    t = leaf(a)
    w = np.arange(12.0).reshape(4, 3)
    (t.transpose().reshape(12) * Tensor(w.reshape(12))).sum().backward()
    np.testing.assert_array_equal(t.grad, w.T)
