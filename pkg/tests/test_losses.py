import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchagg.gradcheck import check, spread
from patchagg.losses import (
    LossConfig,
    cross_entropy,
    l4,
    softermax,
    softermax_rows,
    topk_mask,
    total_loss,
)
from patchagg.network import ForwardOutputs
from patchagg.tensor import ShapeError, Tensor, precision

# 30-digit evaluations (mpmath), frozen
SOFTER_210_K2 = 0.0943442769261574704
SOFTER_210_K1 = 0.4076059644443803045
LN2 = 0.6931471805599453094

logit_rows = arrays(np.float64, (3, 6), elements=st.floats(-20, 20, allow_nan=False))


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        assert cross_entropy(f64([[0.0, 0.0]]), [1]).item() == pytest.approx(LN2, abs=1e-12)

    def test_large_logits_finite(self):
        assert cross_entropy(f64([[1000.0, 0.0]]), [1]).item() == pytest.approx(1000.0)

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            cross_entropy(f64([[0.0, 0.0]]), [2])
        with pytest.raises(ShapeError):
            cross_entropy(f64([[0.0, 0.0]]), [0, 1])


class TestSoftermax:
    def test_hand_case(self):
        assert softermax(f64([2.0, 1.0, 0.0]), 2).item() == pytest.approx(SOFTER_210_K2, abs=1e-12)

    def test_k1_is_cross_entropy_of_the_top_class(self):
        assert softermax(f64([2.0, 1.0, 0.0]), 1).item() == pytest.approx(SOFTER_210_K1, abs=1e-12)

    def test_k_equal_classes_is_exactly_zero(self):
        x = f64(np.random.default_rng(0).normal(size=(4, 5)) * 30)
        assert np.all(softermax_rows(x, 5, axis=1).data == 0.0)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            softermax(f64([1.0, 2.0]), 3)
        with pytest.raises(ValueError):
            softermax(f64([1.0, 2.0]), 0)

    def test_topk_ties_prefer_lower_index(self):
        mask = topk_mask(np.array([1.0, 3.0, 1.0, 1.0]), 2)
        np.testing.assert_array_equal(mask, [True, True, False, False])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        with precision(np.float64):
            x = f64(spread(rng, (4, 6)) * 5, grad=True)
            assert check(lambda: softermax(x, 3), [x]) < 1e-5


@settings(max_examples=60, deadline=None)
@given(logit_rows)
def test_softermax_non_increasing_in_k(x):
    vals = [softermax_rows(f64(x), k, axis=1).data for k in range(1, 7)]
    for a, b in zip(vals, vals[1:]):
        assert np.all(b <= a + 1e-12)


@settings(max_examples=60, deadline=None)
@given(logit_rows, st.integers(1, 6))
def test_softermax_bounded_by_top1_cross_entropy(x, k):
    soft = softermax_rows(f64(x), k, axis=1).data
    z = x - x.max(axis=1, keepdims=True)
    top1 = -np.log(np.exp(z).max(axis=1) / np.exp(z).sum(axis=1))
    assert np.all(soft >= -1e-12)
    assert np.all(soft <= top1 + 1e-12)


class TestL4:
    def _logits(self, seed=0):
        return f64(spread(np.random.default_rng(seed), (2, 4, 1, 5)) * 4, grad=True)

    def test_blend_of_softer_and_cross_entropy(self):
        x = self._logits()
        labels = np.array([1, 3])
        full = l4(x, labels, LossConfig(lam=0.4)).item()
        soft = l4(x, labels, LossConfig(lam=1.0)).item()
        ce = l4(x, labels, LossConfig(lam=0.0)).item()
        assert full == pytest.approx(0.4 * soft + 0.6 * ce, abs=1e-12)

    def test_cross_entropy_part_is_mean_over_patches(self):
        x = self._logits(1)
        labels = np.array([0, 2])
        per = [cross_entropy(f64(x.data[i, :, 0, :].T), [labels[i]] * 5).item() for i in range(2)]
        assert l4(x, labels, LossConfig(lam=0.0)).item() == pytest.approx(np.mean(per), abs=1e-12)

    def test_gradient(self):
        x = self._logits(2)
        with precision(np.float64):
            assert check(lambda: l4(x, [0, 1], LossConfig()), [x]) < 1e-5

    def test_requires_patch_layout(self):
        with pytest.raises(ShapeError):
            l4(f64(np.zeros((2, 4))), [0, 1], LossConfig())


class TestTotal:
    def _outputs(self, with_patches=True):
        rng = np.random.default_rng(3)
        y_gs, y_pa, y = (f64(rng.normal(size=(2, 4)), grad=True) for _ in range(3))
        patches = f64(rng.normal(size=(2, 4, 1, 4)), grad=True) if with_patches else None
        return ForwardOutputs(y=y, y_gs=y_gs, y_pa=y_pa if with_patches else None, patch_logits=patches)

    def test_weighted_sum(self):
        out = self._outputs()
        cfg = LossConfig()
        res = total_loss(out, [0, 3], cfg)
        comps = res.components
        assert all(v >= 0 for v in comps.values())
        expected = sum(w * comps[k] for w, k in zip(cfg.eta, ("L1", "L2", "L3", "L4")))
        assert res.total.item() == pytest.approx(expected, abs=1e-6)

    def test_no_l4_mode_zeroes_only_its_weight(self):
        out = self._outputs()
        with_l4 = total_loss(out, [0, 3], LossConfig()).total.item()
        without = total_loss(out, [0, 3], LossConfig(eta=(0.1, 0.1, 1.0, 0.0)))
        assert without.total.item() == pytest.approx(with_l4 - 0.1 * without.components["L4"], abs=1e-9)

    def test_missing_heads_are_skipped(self):
        res = total_loss(self._outputs(with_patches=False), [1, 2], LossConfig())
        assert res.components["L2"] == 0.0 and res.components["L4"] == 0.0

    def test_all_weights_zero_still_differentiable(self):
        out = self._outputs()
        res = total_loss(out, [0, 1], LossConfig(eta=(0, 0, 0, 0)))
        assert res.total.item() == 0.0
        res.total.backward()
        assert np.all(out.y.grad == 0)


def test_config_validation_and_aliases():
    with pytest.raises(ValueError):
        LossConfig(lam=1.5)
    with pytest.raises(ValueError):
        LossConfig(eta=(1, 1, 1))
    assert LossConfig.from_dict({"lambda": 0.0}).lam == 0.0
