"""Photometric and light geometric augmentation of resized line images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .buckets import resize_bilinear


@dataclass
class AugmentConfig:
    probability: float = 0.5
    contrast: tuple = (0.7, 1.3)
    noise_sigma: float = 10.0       # on the 0..255 scale
    crop: float = 0.05              # max fraction removed per side
    perspective: float = 0.05       # max corner displacement, fraction of extent
    enabled: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrast"] = list(self.contrast)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enabled=False)


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four ``src`` points onto ``dst`` (x, y order)."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_warp(img: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    h, w = img.shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-amount, amount, size=(4, 2)) * np.array([w, h])
    H = homography(corners, corners + jitter)  # output -> source
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = H @ np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    xs = (pts[0] / pts[2]).reshape(h, w)
    ys = (pts[1] / pts[2]).reshape(h, w)
    return _sample_bilinear(img.astype(np.float64), ys, xs)


def random_crop(img: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    h, w = img.shape
    top, bottom = (rng.uniform(0, amount, 2) * h).astype(int)
    left, right = (rng.uniform(0, amount, 2) * w).astype(int)
    cropped = img[top:h - bottom, left:w - right]
    return resize_bilinear(cropped, h, w)


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Each transform fires independently with ``cfg.probability``; output is
    float32 clamped to [0, 255] with the input's shape."""
    cfg = cfg or AugmentConfig()
    out = np.asarray(img, dtype=np.float64)
    if not cfg.enabled:
        return np.asarray(img, dtype=np.float32).copy()
    fire = rng.random(4) < cfg.probability
    if fire[0]:
        c = rng.uniform(*cfg.contrast)
        m = out.mean()
        out = (out - m) * c + m
    if fire[1]:
        out = out + rng.normal(0.0, rng.uniform(0, cfg.noise_sigma), size=out.shape)
    if fire[2]:
        out = random_crop(out, rng, cfg.crop)
    if fire[3]:
        out = perspective_warp(out, rng, cfg.perspective)
    return np.clip(out, 0.0, 255.0).astype(np.float32)


def normalize(img: np.ndarray, max_value: float = 255.0) -> np.ndarray:
    """Map [0, max_value] linearly onto [-1, 1]."""
    img = np.asarray(img, dtype=np.float32)
    return img * np.float32(2.0 / max_value) - np.float32(1.0)


def to_input(img: np.ndarray, channels: int = 3) -> np.ndarray:
    """Normalized [C, H, W] network input; grayscale is replicated across channels."""
    x = normalize(img)
    return np.repeat(x[None], channels, axis=0)
