"""End-to-end acceptance checks.

The branch and lambda ablations train fifteen desk-scale models, about
75 minutes on one core. Finished runs are cached by configuration
hash; point ``PAGG_ACCEPT_CACHE`` at a directory to keep them between
sessions (the default is a fresh temporary directory).
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from patchagg import checkpoint as ckpt_io
from patchagg import evaluator as ev
from patchagg.data import (
    AugmentConfig,
    BucketTable,
    DatasetConfig,
    flip_pair,
    generate_dataset,
    group_resize,
    resize_samples,
)
from patchagg.gradcheck import main_report
from patchagg.losses import LossConfig, softermax, softermax_rows
from patchagg.network import ModelConfig, build, patch_count
from patchagg.tensor import Tensor, no_grad
from patchagg.trainer import TrainConfig, model_from_checkpoint, train

# s0/s1 draw from a 20-glyph alphabet of which 16 are shared (80%)
ABLATION_DATA = {
    "glyph_size": [20, 12],
    "length": [3, 5],
    "shared_fraction": {"s0": 0.5, "s1": 0.5, "s2": 0.4, "s3": 0.4},
    "splits": {"train": 500, "val": 100, "test": 200},
}
ABLATION_EPOCHS = 20
SEEDS = (0, 1, 2)
# mpmath at 30 digits: -log((e^2 + e^1) / (e^2 + e^1 + e^0))
SOFTER_210_K2 = 0.0943442769261574704


def note(record_property, text):
    record_property("detail", text)


# -- 1 ---------------------------------------------------------------------

@pytest.mark.criterion(1, "finite-difference gradient suite")
def test_gradient_suite(record_property):
    results, seconds = main_report(seed=0)
    expected = {"conv3x3", "conv1x1", "batch_norm", "maxpool2d", "linear", "global_avg_pool", "global_max_pool",
                "softmax", "sigmoid", "cross_entropy", "softermax", "l4", "fused_total"}
    assert expected <= set(results)
    worst = max(results, key=results.get)
    note(record_property, f"max rel err {results[worst]:.2e} ({worst}) in {seconds:.1f}s")
    assert results[worst] < 1e-5
    assert seconds < 120


# -- 2 ---------------------------------------------------------------------

@pytest.mark.criterion(2, "softermax properties")
def test_softermax_properties(record_property):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 6)) * rng.uniform(0.1, 30, size=(500, 1))
    t = Tensor(x.astype(np.float64))
    assert np.all(softermax_rows(t, 6, axis=1).data == 0.0)
    vals = np.stack([softermax_rows(t, k, axis=1).data for k in range(1, 7)])
    assert np.all(np.diff(vals, axis=0) <= 1e-12)
    z = x - x.max(axis=1, keepdims=True)
    top1 = -(z.max(axis=1) - np.log(np.exp(z).sum(axis=1)))
    assert np.all(vals <= top1 + 1e-12)
    hand = softermax(Tensor(np.array([2.0, 1.0, 0.0])), 2).item()
    note(record_property, f"[2,1,0],k=2 -> {hand:.6f}")
    assert abs(hand - 0.09434) <= 1e-4
    assert hand == pytest.approx(SOFTER_210_K2, abs=1e-6)


# -- 3 ---------------------------------------------------------------------

@pytest.mark.criterion(3, "architecture shapes and patch probabilities")
def test_architecture_shapes(record_property):
    model = build(ModelConfig(), seed=0).eval()
    rng = np.random.default_rng(0)
    seen, min_mass = 0, np.inf
    for width, patches in zip((64, 128, 256, 512), (4, 8, 16, 32)):
        assert patch_count(width) == patches
        for _ in range(5):
            x = rng.normal(size=(50, 3, 32, width)).astype(np.float32) * rng.uniform(0.5, 3)
            with no_grad():
                out = model(x)
            assert out.patch_probs.shape[-1] == patches
            np.testing.assert_allclose(out.patch_probs.data.sum(axis=1), 1.0, atol=1e-6)
            min_mass = min(min_mass, out.q.data.sum(axis=1).min())
            seen += len(x)
    note(record_property, f"{seen} inputs, min sum of GMP vector {min_mass:.4f}")
    assert seen >= 1000
    assert min_mass >= 1.0 - 1e-6


# -- 4 ---------------------------------------------------------------------

@pytest.mark.criterion(4, "aspect-ratio bucket mapping")
def test_bucket_mapping():
    table = BucketTable.default()
    cases = {0.2: 2, 2.99: 2, 3.0: 4, 5.99: 4, 6.0: 8, 12.0: 8, 12.01: 16, 30.0: 16}
    for ratio, target in cases.items():
        assert table.target_ratio(ratio) == target, ratio
    assert group_resize(np.zeros((32, 112), np.uint8)).shape == (32, 128)  # r = 3.5


# -- 5, 6, 7: trained models -----------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cache = Path(os.environ.get("PAGG_ACCEPT_CACHE") or tmp_path_factory.mktemp("acceptance"))
    cfg = DatasetConfig.from_dict(ABLATION_DATA)
    script_set, raw = generate_dataset(cfg)
    splits = {k: resize_samples(v) for k, v in raw.items()}
    model_cfg, loss_cfg = ModelConfig(), LossConfig()
    train_cfg = TrainConfig(epochs=ABLATION_EPOCHS)
    key = hashlib.sha1(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
    branches = ev.run_ablation_suite(splits, model_cfg, loss_cfg, train_cfg, SEEDS, ("GS", "PA", "GS+PA"), cache, key)
    lambdas = ev.run_lambda_ablation(splits, model_cfg, loss_cfg, train_cfg, SEEDS, (0.0, 0.4), cache, key)
    branches.write(cache / "ablation")
    lambdas.write(cache / "lambda_ablation")
    return {
        "branches": branches, "lambdas": lambdas, "cache": cache, "key": key, "script_set": script_set,
        "data": cfg, "model": model_cfg, "loss": loss_cfg, "train": train_cfg,
        "hard_fraction": float(np.mean([s.hard for s in splits["test"]])),
    }


@pytest.mark.criterion(5, "branch ablation ordering and hard-split gain")
def test_branch_ablation(ablation, record_property):
    t = ablation["branches"]
    med = {c: t.median(c) for c in t.conditions}
    hard = {c: t.median(c, "hard_accuracy") for c in t.conditions}
    gain, hard_gain = med["GS+PA"] - med["GS"], hard["GS+PA"] - hard["GS"]
    cpu = sum(r["train_seconds"] for r in t.rows)
    note(record_property, "median " + " ".join(f"{c}={med[c]:.4f}" for c in t.conditions))
    note(record_property, "hard " + " ".join(f"{c}={hard[c]:.4f}" for c in t.conditions))
    note(record_property, f"gain {gain:.4f} hard gain {hard_gain:.4f}; hard fraction "
                          f"{ablation['hard_fraction']:.3f}; {len(t.rows)} runs trained in {cpu / 60:.1f} min")
    assert med["GS+PA"] > med["GS"]
    assert med["GS+PA"] > med["PA"]
    assert hard_gain >= 2 * gain
    assert cpu < 3600


@pytest.mark.criterion(6, "intermediate supervision ordering")
def test_lambda_ablation(ablation, record_property):
    t = ablation["lambdas"]
    med = {c: t.median(c) for c in t.conditions}
    note(record_property, " ".join(f"{c}={med[c]:.4f}" for c in t.conditions))
    assert med["lambda=0.4"] >= med["lambda=0"] >= med["no-L4"]


@pytest.mark.criterion(7, "one discriminative glyph raises the true script's GMP entry")
def test_discriminative_glyph_flip(ablation, record_property):
    a = ablation
    run = a["cache"] / ev.run_key(ModelConfig.from_dict({**a["model"].to_dict(), "variant": "GS+PA"}),
                                  a["loss"], a["train"], 0, a["key"])
    model = model_from_checkpoint(ckpt_io.load(run / "best.ckpt"))
    ss = a["script_set"]
    rng = np.random.default_rng(2024)
    pairs, rises = 40, 0
    for i in range(pairs):
        script = ss.names[i % len(ss.names)]
        short, full, meta = flip_pair(ss, script, int(rng.integers(2, 5)), rng)
        before = ev.patch_view(model, short).gmp[meta["label"]]
        after = ev.patch_view(model, full).gmp[meta["label"]]
        rises += after > before
    note(record_property, f"{rises}/{pairs} pairs rise")
    assert pairs >= 20
    assert rises >= 0.9 * pairs


# -- 8 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_lines():
    cfg = DatasetConfig(splits={"train": 16, "val": 4})
    _, raw = generate_dataset(cfg)
    return resize_samples(raw["train"]), resize_samples(raw["val"])


@pytest.mark.criterion(8, "determinism and checkpoint persistence")
def test_identical_runs_identical_logs(small_lines, tmp_path):
    for name in ("a", "b"):
        train(*small_lines, ModelConfig(), LossConfig(), TrainConfig(epochs=2), seed=3, out_dir=tmp_path / name)
    for f in ("steps.tsv", "epochs.tsv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


@pytest.mark.criterion(8, "determinism and checkpoint persistence")
def test_checkpoint_forward_bit_exact(small_lines, tmp_path):
    result = train(*small_lines, ModelConfig(), LossConfig(), TrainConfig(epochs=1), seed=4, out_dir=tmp_path)
    back = model_from_checkpoint(ckpt_io.load(tmp_path / "last.ckpt")).eval()
    model = result.model.eval()
    rng = np.random.default_rng(0)
    for width in (64, 128, 256, 512):
        x = rng.normal(size=(3, 3, 32, width)).astype(np.float32)
        with no_grad():
            a, b = model(x), back(x)
        for field in ("y", "y_gs", "y_pa", "patch_probs", "gamma"):
            assert getattr(a, field).data.tobytes() == getattr(b, field).data.tobytes(), field


# -- 9 ---------------------------------------------------------------------

@pytest.mark.criterion(9, "64-line subset is memorised within 200 epochs")
def test_overfit_small_subset(record_property):
    _, raw = generate_dataset(DatasetConfig(splits={"train": 16}, seed=9))
    lines = resize_samples(raw["train"])
    assert len(lines) == 64
    cfg = TrainConfig(epochs=200, augment=AugmentConfig.disabled().to_dict())
    result = train(lines, lines, ModelConfig(), LossConfig(), cfg, seed=0)
    hit = next((e["epoch"] for e in result.epochs if e["val_acc"] == 1.0), None)
    note(record_property, f"first perfect epoch {hit}")
    assert hit is not None and hit <= 200
