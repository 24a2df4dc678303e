"""Accuracy reports, ablation orchestration and patch-probability exports."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import group_resize
from .data.augment import to_input
from .data.io import write_pgm
from .losses import LossConfig
from .network import VARIANTS, ModelConfig, ScriptNet
from .tensor import no_grad
from .trainer import TrainConfig, predict, train

log = logging.getLogger(__name__)

PATCH_STRIDE = 16  # input columns per patch after three poolings and the stride-2 conv
HEATMAP_ROW = 8


@dataclass
class EvalReport:
    accuracy: float
    per_class: list
    confusion: np.ndarray
    support: np.ndarray
    hard_accuracy: float | None = None
    num_params: int | None = None
    latency_ms: float | None = None
    classes: list = field(default_factory=list)
    predictions: np.ndarray | None = None
    labels: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
            "hard_accuracy": self.hard_accuracy,
            "num_params": self.num_params,
            "latency_ms": self.latency_ms,
            "classes": list(self.classes),
        }

    def table(self) -> str:
        """Per-class TSV in the layout of a results table; undefined cells read ``n/a``."""
        rows = ["class\tsupport\taccuracy"]
        for name, n, acc in zip(self.classes, self.support, self.per_class):
            rows.append(f"{name}\t{int(n)}\t{'n/a' if acc is None else f'{acc:.4f}'}")
        rows.append(f"overall\t{int(self.support.sum())}\t{self.accuracy:.4f}")
        if self.hard_accuracy is not None:
            rows.append(f"hard\t-\t{self.hard_accuracy:.4f}")
        if self.num_params is not None:
            rows.append(f"params\t-\t{self.num_params}")
            rows.append(f"size_mb\t-\t{self.num_params * 4 / 2**20:.3f}")
        if self.latency_ms is not None:
            rows.append(f"latency_ms\t-\t{self.latency_ms:.3f}")
        return "\n".join(rows) + "\n"

    def write(self, out_dir, name: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.tsv").write_text(self.table())
        (out / f"{name}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if self.predictions is not None:
            lines = ["index\tlabel\tprediction"]
            lines += [f"{i}\t{int(t)}\t{int(p)}" for i, (t, p) in enumerate(zip(self.labels, self.predictions))]
            (out / f"{name}_predictions.tsv").write_text("\n".join(lines) + "\n")


def report_from_predictions(predictions, labels, num_classes: int, hard=None, classes=None) -> EvalReport:
    """Build a report from raw predictions; classes with no samples get ``None``."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
    total = int(support.sum())
    acc = float(np.trace(confusion) / total) if total else float("nan")
    hard_acc = None
    if hard is not None:
        hard = np.asarray(hard, dtype=bool)
        if hard.any():
            hard_acc = float((predictions[hard] == labels[hard]).mean())
    names = list(classes) if classes is not None else [str(c) for c in range(num_classes)]
    return EvalReport(acc, per_class, confusion, support, hard_acc, classes=names,
                      predictions=predictions, labels=labels)


def measure_latency(model: ScriptNet, image: np.ndarray, runs: int = 100, warmup: int = 10) -> float:
    """Median milliseconds for a single-image eval forward."""
    if runs < 1:
        raise ValueError("runs must be positive")
    was_training = model.training
    model.eval()
    x = to_input(image, model.config.input_channels)[None]
    times = []
    with no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    model.train(was_training)
    return float(np.median(times) * 1000)


def evaluate(model: ScriptNet | Callable, samples: Sequence, num_classes: int | None = None,
             classes=None, latency_runs: int = 0) -> EvalReport:
    """Accuracy of ``model`` on already-resized ``samples``.

    ``model`` may also be any callable mapping a sample list to predicted
    labels, which is how stub predictors are scored.
    """
    labels = np.array([s.label for s in samples], dtype=np.int64)
    hard = np.array([s.hard for s in samples], dtype=bool)
    if isinstance(model, ScriptNet):
        preds = predict(model, samples)
        k = model.config.num_classes
    else:
        preds = np.asarray(model(samples), dtype=np.int64)
        k = num_classes if num_classes is not None else int(max(labels.max(), preds.max()) + 1)
    report = report_from_predictions(preds, labels, k, hard, classes)
    if isinstance(model, ScriptNet):
        report.num_params = model.num_parameters()
        if latency_runs and samples:
            report.latency_ms = measure_latency(model, samples[0].image, runs=latency_runs)
    return report


# -- ablations -----------------------------------------------------------

def run_key(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig, seed: int, data_key: str = "") -> str:
    """Stable short hash of everything that determines a training run."""
    blob = json.dumps({"model": model_cfg.to_dict(), "loss": loss_cfg.to_dict(), "trainer": train_cfg.to_dict(),
                       "seed": int(seed), "data": data_key}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def train_and_score(train_samples, val_samples, test_samples, model_cfg: ModelConfig, loss_cfg: LossConfig,
                    train_cfg: TrainConfig, seed: int, cache_dir=None, data_key: str = "") -> dict:
    """One training run scored on the test split.

    With ``cache_dir`` the run lives in a directory named by its
    configuration hash: a finished run is read back, an interrupted one
    resumes from its last checkpoint.
    """
    out = None
    if cache_dir is not None:
        out = Path(cache_dir) / run_key(model_cfg, loss_cfg, train_cfg, seed, data_key)
        done = out / "result.json"
        if done.exists():
            return json.loads(done.read_text())
    t0 = time.perf_counter()
    result = train(train_samples, val_samples, model_cfg, loss_cfg, train_cfg, seed=seed, out_dir=out)
    report = evaluate(result.best_model(), test_samples)
    row = {"variant": model_cfg.variant, "seed": int(seed), "accuracy": report.accuracy,
           "hard_accuracy": report.hard_accuracy, "train_seconds": round(time.perf_counter() - t0, 1)}
    if out is not None:
        report.write(out, "test")
        (out / "result.json").write_text(json.dumps(row, sort_keys=True) + "\n")
    return row


@dataclass
class AblationTable:
    conditions: list
    rows: list

    def median(self, condition: str, metric: str = "accuracy") -> float:
        vals = [r[metric] for r in self.rows if r["condition"] == condition and r[metric] is not None]
        return float(np.median(vals)) if vals else float("nan")

    def to_tsv(self) -> str:
        seeds = sorted({r["seed"] for r in self.rows})
        head = ["condition"] + [f"seed{s}" for s in seeds] + ["median", "hard_median"]
        lines = ["\t".join(head)]
        for c in self.conditions:
            by_seed = {r["seed"]: r["accuracy"] for r in self.rows if r["condition"] == c}
            cells = [f"{by_seed[s]:.4f}" if s in by_seed else "-" for s in seeds]
            lines.append("\t".join([c] + cells + [f"{self.median(c):.4f}", f"{self.median(c, 'hard_accuracy'):.4f}"]))
        return "\n".join(lines) + "\n"

    def write(self, path_stem) -> None:
        stem = Path(path_stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".tsv").write_text(self.to_tsv())
        summary = {c: {"median": self.median(c), "hard_median": self.median(c, "hard_accuracy")} for c in self.conditions}
        stem.with_suffix(".json").write_text(json.dumps({"rows": self.rows, "summary": summary}, indent=2) + "\n")


def _check_seeds(seeds) -> list:
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ValueError(f"ablations need at least 3 seeds, got {len(seeds)}")
    return seeds


def run_ablation_suite(splits: dict, model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
                       seeds=(0, 1, 2), variants: Sequence[str] = VARIANTS, cache_dir=None,
                       data_key: str = "") -> AblationTable:
    """Train every branch variant under identical settings and score it."""
    seeds = _check_seeds(seeds)
    rows = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "variant": variant})
        for seed in seeds:
            row = train_and_score(splits["train"], splits.get("val", ()), splits["test"], cfg, loss_cfg,
                                  train_cfg, seed, cache_dir, data_key)
            rows.append({**row, "condition": variant})
            log.info("%s seed %d: acc %.4f hard %s", variant, seed, row["accuracy"], row["hard_accuracy"])
    return AblationTable(list(variants), rows)


def lambda_conditions(base: LossConfig, lambdas: Sequence[float] = (0.0, 0.4)) -> dict:
    """``without L4`` zeroes its weight; each lambda keeps the default weight."""
    eta = list(base.eta)
    conds = {"no-L4": LossConfig(k=base.k, lam=base.lam, eta=tuple(eta[:3] + [0.0]))}
    for lam in lambdas:
        conds[f"lambda={lam:g}"] = LossConfig(k=base.k, lam=float(lam), eta=tuple(eta))
    return conds


def run_lambda_ablation(splits: dict, model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
                        seeds=(0, 1, 2), lambdas: Sequence[float] = (0.0, 0.4), cache_dir=None,
                        data_key: str = "") -> AblationTable:
    seeds = _check_seeds(seeds)
    cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "variant": "GS+PA"})
    conds = lambda_conditions(loss_cfg, lambdas)
    rows = []
    for name, lc in conds.items():
        for seed in seeds:
            row = train_and_score(splits["train"], splits.get("val", ()), splits["test"], cfg, lc,
                                  train_cfg, seed, cache_dir, data_key)
            rows.append({**row, "condition": name})
            log.info("%s seed %d: acc %.4f", name, seed, row["accuracy"])
    return AblationTable(list(conds), rows)


# -- patch visualization -------------------------------------------------

@dataclass
class PatchView:
    probs: np.ndarray      # [K, patches]
    gmp: np.ndarray        # [K]
    y_pa: np.ndarray       # [K]
    y: np.ndarray          # [K]
    files: dict = field(default_factory=dict)


def patch_view(model: ScriptNet, image: np.ndarray) -> PatchView:
    """Eval-mode patch probabilities for one grayscale line of any width."""
    if "PA" not in model.config.variant.split("+"):
        raise ValueError(f"variant {model.config.variant} has no patch branch")
    was_training = model.training
    model.eval()
    img = group_resize(np.asarray(image, dtype=np.float32))
    with no_grad():
        out = model(to_input(img, model.config.input_channels)[None])
    model.train(was_training)
    probs = out.patch_probs.data[0, :, 0, :].astype(np.float64)
    return PatchView(probs, out.q.data[0].astype(np.float64), out.y_pa.data[0].astype(np.float64),
                     out.y.data[0].astype(np.float64))


def render_heatmap(probs: np.ndarray, cell_width: int = PATCH_STRIDE, cell_height: int = HEATMAP_ROW) -> np.ndarray:
    """One band per class, one cell per patch; brightness is probability."""
    levels = np.clip(np.round(np.asarray(probs) * 255), 0, 255).astype(np.uint8)
    return np.repeat(np.repeat(levels, cell_height, axis=0), cell_width, axis=1)


def write_probability_csv(path, probs: np.ndarray, classes: Sequence[str]) -> None:
    head = "class," + ",".join(str(i) for i in range(probs.shape[1]))
    rows = [f"{c}," + ",".join(f"{v:.9f}" for v in row) for c, row in zip(classes, probs)]
    Path(path).write_text("\n".join([head] + rows) + "\n")


def read_probability_csv(path) -> tuple[list, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    classes, rows = [], []
    for line in lines[1:]:
        name, *vals = line.split(",")
        classes.append(name)
        rows.append([float(v) for v in vals])
    return classes, np.array(rows)


def export_patch_visualization(model: ScriptNet, image: np.ndarray, out_dir, name: str = "line",
                               classes: Sequence[str] | None = None) -> PatchView:
    """Write ``name_patches.csv``, ``name_vectors.csv`` (GMP vector and
    local logits) and ``name_heatmap.pgm`` under ``out_dir``."""
    view = patch_view(model, image)
    k = view.probs.shape[0]
    classes = list(classes) if classes is not None else [str(i) for i in range(k)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / f"{name}_patches.csv"
    write_probability_csv(csv, view.probs, classes)
    vec = out / f"{name}_vectors.csv"
    vec.write_text("vector," + ",".join(classes) + "\n"
                   + "gmp," + ",".join(f"{v:.9f}" for v in view.gmp) + "\n"
                   + "y_pa," + ",".join(f"{v:.9f}" for v in view.y_pa) + "\n")
    heat = out / f"{name}_heatmap.pgm"
    write_pgm(heat, render_heatmap(read_probability_csv(csv)[1]))
    view.files = {"patches": csv, "vectors": vec, "heatmap": heat}
    return view
