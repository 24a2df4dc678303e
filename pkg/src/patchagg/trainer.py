"""Deterministic SGD training with plateau decay and learning-rate resets."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .data.augment import AugmentConfig, augment
from .data.batching import make_batches
from .layers import Dropout
from .losses import LossConfig, total_loss
from .network import ModelConfig, ScriptNet, build
from .tensor import no_grad

log = logging.getLogger(__name__)

STEP_HEADER = "step\tlr\tL1\tL2\tL3\tL4\ttotal\n"
EPOCH_HEADER = "epoch\tlr\tL1\tL2\tL3\tL4\ttotal\ttrain_acc\tval_acc\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.3
    lr_floor: float = 8e-5
    lr_reset: float = 0.01
    patience: int = 5
    min_improvement: float = 1e-4
    augment: dict = field(default_factory=lambda: AugmentConfig().to_dict())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict = field(default_factory=dict)
    best_loss: float = math.inf
    bad_epochs: int = 0

    def header(self) -> dict:
        best = None if math.isinf(self.best_loss) else self.best_loss
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "best_loss": best, "bad_epochs": self.bad_epochs}


def decays(name: str) -> bool:
    """Weight decay applies to conv and linear kernels only."""
    return name.endswith(".weight")


def sgd_step(named_params: Sequence, state: OptimState) -> None:
    """Classic momentum with the L2 term folded into the gradient:
    ``v = mu * v + (g + wd * w)``, ``w -= lr * v``."""
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if state.weight_decay and decays(name):
            g = g + p.data.dtype.type(state.weight_decay) * p.data
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = p.data.dtype.type(state.momentum) * v + g
        state.buffers[name] = v
        p.data -= p.data.dtype.type(state.lr) * v


def lr_schedule(state: OptimState, epoch_loss: float, cfg: TrainConfig) -> float:
    """Per-epoch plateau decay; a rate that falls under the floor is reset."""
    if epoch_loss < state.best_loss - cfg.min_improvement:
        state.best_loss = epoch_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= cfg.patience:
            state.lr *= cfg.lr_decay
            state.bad_epochs = 0
    if state.lr < cfg.lr_floor:
        state.lr = cfg.lr_reset
    return state.lr


# -- checkpoints ---------------------------------------------------------

def _dropouts(model: ScriptNet) -> list:
    return [m for m in model.modules() if isinstance(m, Dropout)]


def make_checkpoint(model: ScriptNet, state: OptimState, run: dict, epoch: int, step: int) -> ckpt_io.Checkpoint:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"optim/{k}": v for k, v in state.buffers.items()})
    header = {
        "format": "patchagg-checkpoint",
        "config": run,
        "optimizer": state.header(),
        "epoch": epoch,
        "step": step,
        "rng": {"dropout": [d.rng.bit_generator.state for d in _dropouts(model)]},
    }
    return ckpt_io.Checkpoint(header, tensors)


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> ScriptNet:
    cfg = ModelConfig.from_dict(ck.config["model"])
    model = build(cfg, int(ck.config.get("seed", 0)))
    load_model_state(model, ck)
    return model


def load_model_state(model: ScriptNet, ck: ckpt_io.Checkpoint) -> None:
    """Copy parameters, running stats and dropout RNG state into ``model``;
    raises on any name or shape mismatch."""
    model.load_state_dict(ck.params("model/"))
    states = ck.header.get("rng", {}).get("dropout", [])
    for d, st in zip(_dropouts(model), states):
        d.rng.bit_generator.state = st


def optim_from_checkpoint(ck: ckpt_io.Checkpoint) -> OptimState:
    h = ck.header["optimizer"]
    best = h.get("best_loss")
    return OptimState(lr=h["lr"], momentum=h["momentum"], weight_decay=h["weight_decay"],
                      buffers={k: v.copy() for k, v in ck.params("optim/").items()},
                      best_loss=math.inf if best is None else best, bad_epochs=h["bad_epochs"])


# -- loop ----------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def predict(model: ScriptNet, samples, batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax of the fused output, in sample order."""
    was_training = model.training
    model.eval()
    preds = np.empty(len(samples), dtype=np.int64)
    with no_grad():
        for b in make_batches(samples, batch_size, rng=None, train=False,
                              channels=model.config.input_channels):
            preds[b.indices] = model(b.images).y.data.argmax(axis=1)
    model.train(was_training)
    return preds


def accuracy(model: ScriptNet, samples) -> float:
    if not samples:
        return float("nan")
    labels = np.array([s.label for s in samples])
    return float((predict(model, samples) == labels).mean())


@dataclass
class TrainResult:
    model: ScriptNet
    state: OptimState
    epochs: list = field(default_factory=list)
    out_dir: Path | None = None
    best_state: dict | None = None

    def best_model(self) -> ScriptNet:
        """The model as it was at its best validation epoch (the final one without validation)."""
        if self.best_state is None:
            return self.model
        model = build(self.model.config)
        model.load_state_dict(self.best_state)
        model.eval()
        return model


def train(
    train_samples,
    val_samples=(),
    model_cfg: ModelConfig | None = None,
    loss_cfg: LossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    out_dir=None,
    resume: bool = True,
) -> TrainResult:
    """Train a freshly built model (or resume one from ``out_dir/last.ckpt``).

    Writes ``steps.tsv``, ``epochs.tsv``, ``last.ckpt`` and ``best.ckpt``
    when ``out_dir`` is given. Every logged number is a function of the
    seed, the configs and the data.
    """
    model_cfg = model_cfg or ModelConfig()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    aug_cfg = AugmentConfig.from_dict(train_cfg.augment)
    run = {"model": model_cfg.to_dict(), "loss": loss_cfg.to_dict(),
           "trainer": train_cfg.to_dict(), "seed": int(seed)}

    model = build(model_cfg, seed)
    state = OptimState(lr=train_cfg.lr, momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    start_epoch, step = 0, 0
    out = Path(out_dir) if out_dir is not None else None
    best_val = -1.0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / "last.ckpt"
        if resume and last.exists():
            ck = ckpt_io.load(last)
            if ck.config != run:
                raise ValueError(f"{last} was written by a different run configuration")
            load_model_state(model, ck)
            state = optim_from_checkpoint(ck)
            start_epoch, step = ck.header["epoch"], ck.header["step"]
            best_val = ck.header.get("best_val", -1.0)
            _truncate_logs(out, start_epoch, step)
        else:
            (out / "steps.tsv").write_text(STEP_HEADER)
            (out / "epochs.tsv").write_text(EPOCH_HEADER)
            ckpt_io.save(out / "last.ckpt", make_checkpoint(model, state, run, 0, 0))

    history = []
    best_state = None
    named = list(model.named_parameters())
    for epoch in range(start_epoch, train_cfg.epochs):
        model.train()
        order_rng = np.random.default_rng([seed, 1, epoch])

        def transform(img, idx, _epoch=epoch):
            if not aug_cfg.enabled:
                return img
            return augment(img, np.random.default_rng([seed, 2, _epoch, idx]), aug_cfg)

        sums = np.zeros(5)
        seen = correct = 0
        step_lines = []
        for batch in make_batches(train_samples, train_cfg.batch_size, order_rng, train=True,
                                  transform=transform, channels=model_cfg.input_channels):
            model.zero_grad()
            outputs = model(batch.images)
            loss = total_loss(outputs, batch.labels, loss_cfg)
            total = loss.total.item()
            if not math.isfinite(total):
                raise TrainingDiverged(f"loss became {total} at step {step} (epoch {epoch})")
            loss.total.backward()
            sgd_step(named, state)
            step += 1
            comps = [loss.components[k] for k in ("L1", "L2", "L3", "L4")] + [total]
            n = len(batch.labels)
            sums += np.array(comps) * n
            seen += n
            correct += int((outputs.y.data.argmax(axis=1) == batch.labels).sum())
            step_lines.append("\t".join([str(step), _fmt(state.lr)] + [_fmt(c) for c in comps]) + "\n")

        means = sums / max(seen, 1)
        val_acc = accuracy(model, val_samples) if len(val_samples) else float("nan")
        record = {"epoch": epoch + 1, "lr": state.lr, "L1": means[0], "L2": means[1], "L3": means[2],
                  "L4": means[3], "total": means[4], "train_acc": correct / max(seen, 1), "val_acc": val_acc}
        history.append(record)
        log.info("epoch %d lr %.5f loss %.4f train %.3f val %.3f", epoch + 1, state.lr, means[4],
                 record["train_acc"], val_acc)
        lr_schedule(state, float(means[4]), train_cfg)
        # ties go to the later epoch, which has seen more data
        if out is None and math.isfinite(val_acc) and val_acc >= best_val:
            best_val = val_acc
            best_state = {k: v.copy() for k, v in model.state_dict().items()}

        if out is not None:
            with open(out / "steps.tsv", "a") as f:
                f.writelines(step_lines)
            with open(out / "epochs.tsv", "a") as f:
                f.write("\t".join([str(epoch + 1), _fmt(record["lr"])] + [_fmt(v) for v in means]
                                  + [_fmt(record["train_acc"]), _fmt(val_acc)]) + "\n")
            ck = make_checkpoint(model, state, run, epoch + 1, step)
            if math.isfinite(val_acc) and val_acc >= best_val:
                best_val = val_acc
                ck.header["best_val"] = best_val
                ckpt_io.save(out / "best.ckpt", ck)
            ck.header["best_val"] = best_val
            ckpt_io.save(out / "last.ckpt", ck)

    if out is not None and not (out / "best.ckpt").exists():
        ckpt_io.save(out / "best.ckpt", make_checkpoint(model, state, run, start_epoch, step))
    if out is not None:
        best_state = ckpt_io.load(out / "best.ckpt").params("model/")
    return TrainResult(model, state, history, out, best_state)


def _truncate_logs(out: Path, epoch: int, step: int) -> None:
    """Drop log lines written after the checkpoint we resume from."""
    for name, keep in (("steps.tsv", step), ("epochs.tsv", epoch)):
        p = out / name
        lines = p.read_text().splitlines(keepends=True) if p.exists() else []
        header = STEP_HEADER if name == "steps.tsv" else EPOCH_HEADER
        p.write_text(header + "".join(lines[1:1 + keep]))
