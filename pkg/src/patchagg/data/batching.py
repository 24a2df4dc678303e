"""Bucketed batching: every batch holds images of a single width."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .augment import to_input

log = logging.getLogger(__name__)


@dataclass
class Batch:
    images: np.ndarray      # [N, C, 32, W] float32
    labels: np.ndarray      # [N] int64
    indices: np.ndarray     # positions in the source sample list

    @property
    def width(self) -> int:
        return self.images.shape[-1]


def plan_batches(widths: Sequence[int], batch_size: int, rng: np.random.Generator | None,
                 train: bool = True) -> list[np.ndarray]:
    """Group sample indices by width and cut each group into batches.

    A trailing batch of one sample is folded into the previous batch of its
    bucket; a bucket holding a single sample is skipped in training mode
    because batch statistics need two samples.
    """
    widths = np.asarray(widths)
    batches = []
    for w in sorted(set(widths.tolist())):
        idx = np.flatnonzero(widths == w)
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        if train and len(idx) == 1:
            log.warning("bucket of width %d holds a single sample; deferring it this epoch", w)
            continue
        chunks = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        if train and len(chunks) > 1 and len(chunks[-1]) == 1:
            log.warning("merging a trailing single sample into the previous batch (width %d)", w)
            last = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], last])
        batches.extend(chunks)
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def make_batches(
    samples: Sequence,
    batch_size: int = 16,
    rng: np.random.Generator | None = None,
    train: bool = True,
    transform: Callable[[np.ndarray, int], np.ndarray] | None = None,
    channels: int = 3,
) -> Iterator[Batch]:
    """Yield batches of resized samples; ``transform(image, index)`` runs before
    normalization (the trainer uses it for augmentation)."""
    widths = [np.shape(s.image)[1] for s in samples]
    for idx in plan_batches(widths, batch_size, rng, train):
        imgs = []
        for i in idx:
            img = samples[i].image
            if transform is not None:
                img = transform(img, int(i))
            imgs.append(to_input(img, channels))
        labels = np.array([samples[i].label for i in idx], dtype=np.int64)
        yield Batch(np.stack(imgs), labels, idx)
