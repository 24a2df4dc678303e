"""Training objectives: image-level cross-entropy on each head, plus the
patch-level term mixing top-k "softermax" with per-patch cross-entropy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import log_softmax_np
from .network import ForwardOutputs
from .tensor import ShapeError, Tensor, make_result, note_branch


@dataclass
class LossConfig:
    k: int = 3
    lam: float = 0.4
    eta: tuple[float, float, float, float] = (0.1, 0.1, 1.0, 0.1)

    def __post_init__(self):
        self.eta = tuple(float(e) for e in self.eta)
        if len(self.eta) != 4 or min(self.eta) < 0:
            raise ValueError(f"eta must be four non-negative weights, got {self.eta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = list(self.eta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy_rows(logits: Tensor, labels, axis: int = 1) -> Tensor:
    """Per-row ``-log softmax(logits)[label]``; the class axis is removed."""
    x = np.moveaxis(logits.data, axis, -1)
    k = x.shape[-1]
    lead = x.shape[:-1]
    labels = np.asarray(labels, dtype=np.int64)
    labels = np.broadcast_to(labels.reshape(labels.shape + (1,) * (len(lead) - labels.ndim)), lead)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_np(x, -1)
    out = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        grad = (grad - onehot) * g[..., None]
        return (np.moveaxis(grad, -1, axis),)

    return make_result(out, (logits,), backward, "cross_entropy")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return cross_entropy_rows(logits, labels, axis=1).mean()


def topk_mask(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Boolean mask of the k largest entries along ``axis``, ties to the lowest index."""
    xm = np.moveaxis(x, axis, -1)
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-xm, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(xm.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    note_branch(mask)
    return np.moveaxis(mask, -1, axis)


def softermax_rows(logits: Tensor, k: int, axis: int = 1) -> Tensor:
    """Per-vector softened loss ``-log(sum of top-k exp / sum of all exp)``.

    The top-k set is fixed by the forward values and treated as constant when
    differentiating.
    """
    num_classes = logits.shape[axis]
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must lie in [1, {num_classes}], got {k}")
    x = logits.data
    mask = topk_mask(x, k, axis)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    total = e.sum(axis=axis, keepdims=True)
    top = np.where(mask, e, 0).sum(axis=axis, keepdims=True)
    out = (np.log(total) - np.log(top)).squeeze(axis)
    if k == num_classes:
        out = np.zeros_like(out)

    def backward(g):
        grad = e / total - np.where(mask, e, 0) / top
        return (grad * np.expand_dims(g, axis),)

    return make_result(out, (logits,), backward, "softermax")


def softermax(logits: Tensor, k: int) -> Tensor:
    """Softened loss of one score vector [K] (or the mean over rows of [N, K])."""
    if logits.ndim == 1:
        return softermax_rows(logits, k, axis=0)
    return softermax_rows(logits, k, axis=logits.ndim - 1).mean()


def l4(patch_logits: Tensor, labels, cfg: LossConfig) -> Tensor:
    """Patch supervision: per patch ``lam * softer + (1 - lam) * CE`` against the
    image label, averaged over the image's patches and then over the batch."""
    if patch_logits.ndim != 4:
        raise ShapeError(f"l4 expects [N, K, H, W] patch logits, got {patch_logits.shape}")
    n = patch_logits.shape[0]
    labels = _check_labels(labels, n, patch_logits.shape[1])
    parts = []
    if cfg.lam > 0:
        parts.append(softermax_rows(patch_logits, cfg.k, axis=1) * cfg.lam)
    if cfg.lam < 1:
        parts.append(cross_entropy_rows(patch_logits, labels, axis=1) * (1.0 - cfg.lam))
    per_patch = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    # equal patch counts per image, so one global mean equals mean-of-means
    return per_patch.mean()


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)


def total_loss(outputs: ForwardOutputs, labels, cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of the four objectives; absent heads contribute nothing."""
    labels = np.asarray(labels, dtype=np.int64)
    eta = cfg.eta
    terms: dict[str, Tensor | None] = {
        "L1": cross_entropy(outputs.y_gs, labels) if outputs.y_gs is not None else None,
        "L2": cross_entropy(outputs.y_pa, labels) if outputs.y_pa is not None else None,
        "L3": cross_entropy(outputs.y, labels),
        "L4": l4(outputs.patch_logits, labels, cfg) if outputs.patch_logits is not None else None,
    }
    total = None
    for w, t in zip(eta, terms.values()):
        if t is None or w == 0:
            continue
        part = t * w
        total = part if total is None else total + part
    if total is None:
        # every active term has weight zero; keep the graph so backward still works
        total = outputs.y.sum() * 0.0
    components = {name: (t.item() if t is not None else 0.0) for name, t in terms.items()}
    return LossBreakdown(total=total, components=components)
