import numpy as np
import pytest

from patchagg.gradcheck import check, numeric_grad, rel_error, spread
from patchagg.tensor import Tensor, make_result, precision


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_numeric_grad_of_a_cubic():
    x = np.array([0.5, -1.0, 2.0])
    g = numeric_grad(lambda: float((x ** 3).sum()), x)
    np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)
    np.testing.assert_array_equal(x, [0.5, -1.0, 2.0])  # restored


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.full(3, 1e-12)) < 1e-4
    assert rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_wrong_backward_is_caught():
    x = leaf([0.3, -0.7, 1.1])

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

    with precision(np.float64):
        assert check(lambda: bad_square(x).sum(), [x]) > 0.3
        assert check(lambda: (x * x).sum(), [x]) < 1e-8


def test_probe_on_a_kink_is_skipped():
    # one entry sits exactly on the ReLU corner; the others are smooth
    x = leaf([0.0, 0.5, -0.5, 1.5])
    with precision(np.float64):
        assert check(lambda: (x.relu() * x).sum(), [x]) < 1e-8


def test_all_kinks_raises():
    x = leaf([0.0])
    with precision(np.float64), pytest.raises(RuntimeError, match="kink-free"):
        check(lambda: x.relu().sum(), [x])


def test_spread_has_no_near_ties():
    v = np.sort(spread(np.random.default_rng(0), (4, 6)).ravel())
    assert np.all(np.diff(v) > 0)
