"""Central finite-difference verification of every differentiable op.

All checks run in float64. Inputs are drawn so that no ReLU argument or
max-pool window sits near a tie, where the derivative is not defined.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import layers as L
from .losses import LossConfig, cross_entropy, l4, softermax, total_loss
from .network import ModelConfig, build
from .tensor import Tensor, precision, record_branches

STEP = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = STEP, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated and restored).

    With ``indices`` only those flat positions are probed; others stay 0.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative difference ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are zero in exact arithmetic (a conv
    bias feeding batch norm) from turning roundoff into a 100% error.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _signature(loss_fn: Callable[[], Tensor]) -> tuple[float, list]:
    with record_branches() as log:
        value = loss_fn().item()
    return value, log


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(loss_fn, flat: np.ndarray, i: int, eps: float, base: list) -> float | None:
    """Central difference at ``flat[i]``, shrinking the step up to 100x
    until neither side crosses a kink; None if every step does."""
    orig = flat[i]
    for step in (eps, eps / 10, eps / 100):
        flat[i] = orig + step
        hi, sig_hi = _signature(loss_fn)
        flat[i] = orig - step
        lo, sig_lo = _signature(loss_fn)
        flat[i] = orig
        if _same(base, sig_hi) and _same(base, sig_lo):
            return (hi - lo) / (2 * step)
    return None


def check(loss_fn: Callable[[], Tensor], tensors: list[Tensor], max_probes: int | None = None,
          rng: np.random.Generator | None = None, eps: float = STEP) -> float:
    """Largest relative error between autodiff and finite differences over ``tensors``.

    A probe whose +/- step changes any ReLU mask, argmax or top-k set is
    discarded, since the derivative there is one-sided. With ``max_probes``
    each tensor is sampled at that many kink-free positions.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    _, base = _signature(loss_fn)
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        order = range(t.size) if max_probes is None else rng.permutation(t.size)
        limit = t.size if max_probes is None else max_probes
        ana, num = [], []
        for i in order:
            if len(num) == limit:
                break
            d = _probe(loss_fn, flat, i, eps, base)
            if d is not None:
                ana.append(t.grad.reshape(-1)[i])
                num.append(d)
        if not num:
            raise RuntimeError(f"no kink-free probe found for tensor of shape {t.shape}")
        worst = max(worst, rel_error(np.array(ana), np.array(num)))
    return worst


def spread(rng: np.random.Generator, shape, gap: float = 0.05) -> np.ndarray:
    """Random values whose pairwise gaps all exceed ``gap`` (so max/ReLU never tie)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap * 1.5 + rng.uniform(-0.2, 0.2) * gap
    return rng.permutation(vals).reshape(shape) / max(1.0, n * gap * 0.4)


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def suite(seed: int = 0) -> dict[str, float]:
    """Run every check; returns op name -> worst relative error."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name, fn):
        results[name] = fn()

    with precision(np.float64):
        # convolutions in every geometry the network uses
        for name, (cin, cout, k, s, p, hw) in {
            "conv3x3": (3, 4, (3, 3), (1, 1), (1, 1), (6, 8)),
            "conv_module7": (4, 5, (3, 3), (1, 1), (0, 1), (4, 6)),
            "conv_module8": (4, 3, (2, 3), (1, 2), (0, 1), (2, 8)),
            "conv1x1": (5, 3, (1, 1), (1, 1), (0, 0), (1, 5)),
        }.items():
            x = _param(rng.normal(size=(2, cin) + hw))
            w = _param(rng.normal(size=(cout, cin) + k))
            b = _param(rng.normal(size=cout))
            out = L.conv2d(x, w, b, s, p)
            wt = Tensor(rng.normal(size=out.shape))
            record(name, lambda x=x, w=w, b=b, s=s, p=p, wt=wt:
                   check(lambda: (L.conv2d(x, w, b, s, p) * wt).sum(), [x, w, b]))

        x = _param(rng.normal(size=(4, 3, 2, 3)))
        g = _param(rng.uniform(0.5, 1.5, 3))
        be = _param(rng.normal(size=3))
        wt = Tensor(rng.normal(size=x.shape))
        rm, rv = np.zeros(3), np.ones(3)
        record("batch_norm", lambda: check(lambda: (L.batch_norm(x, g, be, rm, rv, True) * wt).sum(), [x, g, be]))
        record("batch_norm_eval", lambda: check(
            lambda: (L.batch_norm(x, g, be, rm + 0.3, rv + 0.5, False) * wt).sum(), [x, g, be]))

        x = _param(spread(rng, (2, 3, 4, 6)))
        wt = Tensor(rng.normal(size=(2, 3, 2, 3)))
        record("maxpool2d", lambda: check(lambda: (L.maxpool2d(x) * wt).sum(), [x]))

        x = _param(rng.normal(size=(3, 4)))
        w = _param(rng.normal(size=(4, 5)))
        b = _param(rng.normal(size=5))
        wt = Tensor(rng.normal(size=(3, 5)))
        record("linear", lambda: check(lambda: (L.linear(x, w, b) * wt).sum(), [x, w, b]))

        x = _param(rng.normal(size=(2, 3, 2, 5)))
        wt = Tensor(rng.normal(size=(2, 3)))
        record("global_avg_pool", lambda: check(lambda: (L.global_avg_pool(x) * wt).sum(), [x]))
        xm = _param(spread(rng, (2, 3, 1, 5)))
        record("global_max_pool", lambda: check(lambda: (L.global_max_pool(xm) * wt).sum(), [xm]))

        x = _param(rng.normal(size=(3, 4)))
        wt = Tensor(rng.normal(size=(3, 4)))
        record("softmax", lambda: check(lambda: (L.softmax(x, 1) * wt).sum(), [x]))
        record("sigmoid", lambda: check(lambda: (x.sigmoid() * wt).sum(), [x]))
        xr = _param(spread(rng, (3, 4)))
        record("relu", lambda: check(lambda: (xr.relu() * wt).sum(), [xr]))
        xp = _param(rng.uniform(0.5, 2.0, size=(3, 4)))
        record("exp_log", lambda: check(lambda: ((xp.log() + xp.exp()) * wt).sum(), [xp]))

        labels = rng.integers(0, 4, size=3)
        record("cross_entropy", lambda: check(lambda: cross_entropy(x, labels), [x]))
        xs = _param(spread(rng, (3, 5)))
        record("softermax", lambda: check(lambda: softermax(xs, 3), [xs]))
        pl = _param(spread(rng, (2, 5, 1, 4)) * 4)
        record("l4", lambda: check(lambda: l4(pl, labels[:2], LossConfig(k=3, lam=0.4)), [pl]))

        record("fused_total", lambda: _check_network(rng))
    return results


def _check_network(rng: np.random.Generator) -> float:
    """Whole model (all five outputs, all four losses) on a tiny configuration."""
    cfg = ModelConfig(num_classes=3, channels=(2, 3, 4), branch_width=4, pa_hidden=3,
                      pa_classifier_hidden=4, scale=1.0, widths=(64,))
    model = build(cfg, seed=7).astype(np.float64)
    x = Tensor(rng.normal(size=(3, 3, 32, 64)))
    labels = np.array([0, 2, 1])
    drops = [m for m in model.modules() if isinstance(m, L.Dropout)]

    def loss():
        # identical dropout masks and batch statistics on every evaluation
        for d in drops:
            d.rng = np.random.default_rng(123)
        for m in model.modules():
            if isinstance(m, L.BatchNorm):
                m.running_mean[...] = 0
                m.running_var[...] = 1
        return total_loss(model(x), labels, LossConfig()).total

    return check(loss, model.parameters(), max_probes=6, rng=rng)


def main_report(seed: int = 0) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    res = suite(seed)
    return res, time.perf_counter() - t0
