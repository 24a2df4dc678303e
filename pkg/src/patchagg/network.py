"""Dual-branch script classifier: shared VGG-style backbone, a global branch
that squeezes features by average pooling, and a patch branch that classifies
every column of the final feature map and aggregates the per-class maxima.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from .tensor import ShapeError, Tensor, broadcast_to

INPUT_HEIGHT = 32
VARIANTS = ("GS", "GS+GS", "GS+GMP", "PA", "GS+PA")


@dataclass
class ModelConfig:
    num_classes: int = 4
    channels: tuple[int, int, int] = (64, 128, 256)
    branch_width: int = 512
    pa_hidden: int = 128
    pa_classifier_hidden: int = 32
    input_channels: int = 3
    dropout: float = 0.3
    scale: float = 0.25
    variant: str = "GS+PA"
    widths: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if min(self.scaled_channels + (self.scaled_branch_width, self.scaled_pa_hidden,
                                       self.pa_classifier_hidden, self.input_channels)) < 1:
            raise ValueError("all layer widths must be at least 1")

    def _scaled(self, w: int) -> int:
        return max(1, int(round(w * self.scale)))

    @property
    def scaled_channels(self) -> tuple[int, int, int]:
        return tuple(self._scaled(c) for c in self.channels)

    @property
    def scaled_branch_width(self) -> int:
        return self._scaled(self.branch_width)

    @property
    def scaled_pa_hidden(self) -> int:
        return self._scaled(self.pa_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutputs:
    """Everything the losses and the visualization need from one forward pass.

    For two-branch variants ``y_pa`` holds the second branch's logits (a
    second global branch for GS+GS and GS+GMP). Single-branch variants leave
    the other branch's slot empty and ``gamma`` is None.
    """

    y: Tensor
    y_gs: Tensor | None = None
    y_pa: Tensor | None = None
    gamma: Tensor | None = None
    patch_logits: Tensor | None = None
    patch_probs: Tensor | None = None
    q: Tensor | None = None


def patch_count(width: int) -> int:
    """Number of patches the patch branch emits for an input of this width."""
    w = width
    for _ in range(3):
        if w % 2:
            raise ShapeError(f"width {width} does not survive three 2x2 poolings")
        w //= 2
    w = L.conv_output_size(w, 3, 1, 1)
    return L.conv_output_size(w, 3, 2, 1)


class Backbone(L.Module):
    """Modules 1-6 with a 2x2 max pool after modules 2, 4 and 6."""

    def __init__(self, in_ch: int, channels: Sequence[int], rng):
        blocks = []
        c = in_ch
        for width in channels:
            blocks.append(L.conv_bn_relu(c, width, 3, 1, 1, rng))
            blocks.append(L.conv_bn_relu(width, width, 3, 1, 1, rng))
            blocks.append(L.MaxPool2d())
            c = width
        self.blocks = blocks
        self.out_channels = c

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class BranchTrunk(L.Module):
    """Modules 7-8: collapse height 4 -> 1 and halve the width."""

    def __init__(self, in_ch: int, width: int, rng):
        self.conv7 = L.conv_bn_relu(in_ch, width, (3, 3), 1, (0, 1), rng)
        self.conv8 = L.conv_bn_relu(width, width, (2, 3), (1, 2), (0, 1), rng)

    def forward(self, x):
        return self.conv8(self.conv7(x))


class GlobalHead(L.Module):
    def __init__(self, width: int, num_classes: int, dropout: float, rng, pool: str = "avg"):
        self.pool = L.GlobalAvgPool() if pool == "avg" else L.GlobalMaxPool()
        self.fc1 = L.Linear(width, width, rng)
        self.relu = L.ReLU()
        self.drop = L.Dropout(dropout, np.random.default_rng(rng.integers(2**63)))
        self.fc2 = L.Linear(width, num_classes, rng)

    def forward(self, m):
        return self.fc2(self.drop(self.relu(self.fc1(self.pool(m)))))


class PatchHead(L.Module):
    """Per-patch class scores, softmax, per-class max over patches, small classifier."""

    def __init__(self, width: int, hidden: int, cls_hidden: int, num_classes: int, rng):
        self.conv9 = L.conv_bn_relu(width, hidden, 1, 1, 0, rng)
        self.conv10 = L.Conv2d(hidden, num_classes, 1, 1, 0, rng)
        self.softmax = L.Softmax(axis=1)
        self.gmp = L.GlobalMaxPool()
        self.fc11 = L.Linear(num_classes, cls_hidden, rng)
        self.relu = L.ReLU()
        self.fc12 = L.Linear(cls_hidden, num_classes, rng)

    def forward(self, m):
        logits = self.conv10(self.conv9(m))
        probs = self.softmax(logits)
        q = self.gmp(probs)
        y = self.fc12(self.relu(self.fc11(q)))
        return y, logits, probs, q


class Branch(L.Module):
    def __init__(self, kind: str, cfg: ModelConfig, in_ch: int, rng):
        self.kind = kind
        width = cfg.scaled_branch_width
        self.trunk = BranchTrunk(in_ch, width, rng)
        if kind == "PA":
            self.head = PatchHead(width, cfg.scaled_pa_hidden, cfg.pa_classifier_hidden, cfg.num_classes, rng)
        else:
            self.head = GlobalHead(width, cfg.num_classes, cfg.dropout, rng, pool="max" if kind == "GMP" else "avg")

    def forward(self, feats):
        return self.head(self.trunk(feats))


def _branch_kinds(variant: str) -> tuple[str, ...]:
    return {
        "GS": ("GS",),
        "PA": ("PA",),
        "GS+GS": ("GS", "GS"),
        "GS+GMP": ("GS", "GMP"),
        "GS+PA": ("GS", "PA"),
    }[variant]


class ScriptNet(L.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        # independent streams so that each component's init does not depend on the others
        streams = np.random.SeedSequence(seed).spawn(4)
        rngs = [np.random.default_rng(s) for s in streams]
        self.backbone = Backbone(cfg.input_channels, cfg.scaled_channels, rngs[0])
        kinds = _branch_kinds(cfg.variant)
        self.branches = [Branch(k, cfg, self.backbone.out_channels, rngs[1 + i]) for i, k in enumerate(kinds)]
        self.fusion = L.Linear(cfg.num_classes, 1, rngs[3]) if len(kinds) == 2 else None

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"expected an [N, C, H, W] batch, got shape {x.shape}")
        n, c, h, w = x.shape
        if h != INPUT_HEIGHT:
            raise ShapeError(f"input height must be {INPUT_HEIGHT}, got {h}")
        if c != self.config.input_channels:
            raise ShapeError(f"expected {self.config.input_channels} channels, got {c}")
        if w not in self.config.widths:
            raise ShapeError(f"input width {w} is not one of the bucket widths {self.config.widths}")

    def forward(self, x) -> ForwardOutputs:
        if isinstance(x, (list, tuple)):
            widths = {np.shape(img)[-1] for img in x}
            if len(widths) > 1:
                raise ShapeError(f"batch mixes image widths {sorted(widths)}")
            x = np.stack([np.asarray(img) for img in x])
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.check_input(x)
        feats = self.backbone(x)

        out = ForwardOutputs(y=None)  # type: ignore[arg-type]
        logits = []
        for branch in self.branches:
            if branch.kind == "PA":
                y_pa, plogits, probs, q = branch(feats)
                out.patch_logits, out.patch_probs, out.q = plogits, probs, q
                logits.append(y_pa)
            else:
                logits.append(branch(feats))

        if len(logits) == 1:
            if self.branches[0].kind == "PA":
                out.y_pa = logits[0]
            else:
                out.y_gs = logits[0]
            out.y = logits[0]
            return out

        y_gs, y_other = logits
        gamma = self.fusion(y_gs).sigmoid()
        out.y = fuse(gamma, y_gs, y_other)
        out.y_gs, out.y_pa, out.gamma = y_gs, y_other, gamma
        return out

    def layer_manifest(self) -> str:
        lines = [f"# variant={self.config.variant} classes={self.config.num_classes}"]
        lines += self.manifest()
        lines.append(f"# total_parameters={self.num_parameters()}")
        lines.append(f"# size_mb={self.num_parameters() * 4 / 2**20:.3f}")
        return "\n".join(lines) + "\n"


def fuse(gamma: Tensor, y_gs: Tensor, y_pa: Tensor) -> Tensor:
    """Convex combination ``gamma * y_gs + (1 - gamma) * y_pa`` with gamma of shape [N, 1]."""
    g = broadcast_to(gamma, y_gs.shape)
    return g * y_gs + (1.0 - g) * y_pa


def build(cfg: ModelConfig, seed: int = 0) -> ScriptNet:
    return ScriptNet(cfg, seed)


def ablation_variant(cfg: ModelConfig, kind: str, seed: int = 0) -> ScriptNet:
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    d = cfg.to_dict()
    d["variant"] = kind
    return ScriptNet(ModelConfig.from_dict(d), seed)
