"""Aspect-ratio grouping: map every image to one of a few fixed widths at
height 32 so that batches can be stacked."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HEIGHT = 32


@dataclass(frozen=True)
class Bucket:
    low: float
    high: float
    low_closed: bool
    high_closed: bool
    ratio: int

    def contains(self, r: float) -> bool:
        above = r >= self.low if self.low_closed else r > self.low
        below = r <= self.high if self.high_closed else r < self.high
        return above and below


@dataclass(frozen=True)
class BucketTable:
    buckets: tuple[Bucket, ...]
    height: int = HEIGHT

    def __post_init__(self):
        bs = self.buckets
        if not bs:
            raise ValueError("bucket table is empty")
        if bs[0].low != 0 or bs[0].low_closed:
            raise ValueError("first bucket must start open at 0")
        if not math.isinf(bs[-1].high):
            raise ValueError("last bucket must extend to infinity")
        for a, b in zip(bs, bs[1:]):
            if a.high != b.low or a.high_closed == b.low_closed:
                raise ValueError(f"buckets {a} and {b} overlap or leave a gap")
            if b.ratio <= a.ratio:
                raise ValueError("target ratios must be strictly increasing")

    @classmethod
    def default(cls) -> "BucketTable":
        inf = math.inf
        return cls((
            Bucket(0, 3, False, False, 2),
            Bucket(3, 6, True, False, 4),
            Bucket(6, 12, True, True, 8),
            Bucket(12, inf, False, False, 16),
        ))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(b.ratio * self.height for b in self.buckets)

    def target_ratio(self, r: float) -> int:
        if not r > 0:
            raise ValueError(f"aspect ratio must be positive, got {r}")
        for b in self.buckets:
            if b.contains(r):
                return b.ratio
        raise AssertionError("bucket table is not exhaustive")  # excluded by __post_init__

    def target_size(self, h: int, w: int) -> tuple[int, int]:
        return self.height, self.height * self.target_ratio(w / h)

    def to_list(self) -> list:
        return [[b.low, None if math.isinf(b.high) else b.high, b.low_closed, b.high_closed, b.ratio]
                for b in self.buckets]

    @classmethod
    def from_list(cls, rows, height: int = HEIGHT) -> "BucketTable":
        return cls(tuple(Bucket(lo, math.inf if hi is None else hi, bool(lc), bool(hc), int(r))
                         for lo, hi, lc, hc, r in rows), height)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; returns float32."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        s = np.clip(s, 0, n_in - 1)
        i0 = np.floor(s).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (s - i0).astype(np.float32)

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def group_resize(img: np.ndarray, table: BucketTable | None = None) -> np.ndarray:
    """Resize to height 32 and the bucket width implied by the aspect ratio."""
    table = table or BucketTable.default()
    h, w = np.shape(img)[:2]
    if h < 1 or w < 1:
        raise ValueError(f"image must be non-empty, got {h}x{w}")
    oh, ow = table.target_size(h, w)
    return resize_bilinear(img, oh, ow)
