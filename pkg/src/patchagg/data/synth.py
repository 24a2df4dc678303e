"""Procedural multi-script text lines.

Each script owns a pool of glyphs. Some glyphs are shared between scripts
(they render identically for every owner) and the rest are discriminative.
A text line is a horizontal run of glyphs from one script's pool; how many of
them come from shared pools is controlled by ``shared_fraction``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

LINE_HEIGHT = 32


@dataclass
class Sample:
    image: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)
    path: str = ""

    @property
    def hard(self) -> bool:
        return is_hard(self.meta)


def is_hard(meta: dict) -> bool:
    """A line is hard when it carries at most one discriminative glyph."""
    n = meta.get("n_discriminative")
    return n is not None and n <= 1


@dataclass
class DatasetConfig:
    scripts: list = field(default_factory=lambda: ["s0", "s1", "s2", "s3"])
    glyph_size: tuple = (24, 16)
    discriminative: object = field(default_factory=lambda: [4, 4, 8, 8])
    shared_pools: list = field(default_factory=lambda: [
        {"scripts": ["s0", "s1"], "size": 16},
        {"scripts": ["s2", "s3"], "size": 8},
    ])
    shared_fraction: object = field(default_factory=lambda: {"s0": 0.8, "s1": 0.8, "s2": 0.5, "s3": 0.5})
    min_discriminative: int = 1
    length: tuple = (3, 7)
    gap: tuple = (1, 4)
    noise: tuple = (2.0, 12.0)
    strokes: tuple = (3, 5)
    splits: dict = field(default_factory=lambda: {"train": 500, "val": 50, "test": 200})
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("glyph_size", "length", "gap", "noise", "strokes"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)

    def fraction_for(self, script: str) -> float:
        f = self.shared_fraction
        value = f.get(script, 0.0) if isinstance(f, dict) else f
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"shared_fraction for {script} must lie in [0, 1], got {value}")
        return float(value)


def _draw_glyph(rng: np.random.Generator, h: int, w: int, strokes: tuple) -> np.ndarray:
    """A few thick segments between points of a coarse 4x3 anchor grid."""
    ys = np.linspace(2, h - 3, 4)
    xs = np.linspace(2, w - 3, 3)
    anchors = np.array([(y, x) for y in ys for x in xs])
    img = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(strokes[0], strokes[1] + 1)):
        a, b = anchors[rng.choice(len(anchors), size=2, replace=False)]
        a = a + rng.uniform(-1.5, 1.5, 2)
        b = b + rng.uniform(-1.5, 1.5, 2)
        for t in np.linspace(0.0, 1.0, 40):
            y, x = np.round(a + t * (b - a)).astype(int)
            img[max(y - 1, 0):min(y + 1, h), max(x - 1, 0):min(x + 1, w)] = True
    return img


@dataclass
class ScriptSet:
    names: list
    glyphs: np.ndarray                  # [G, gh, gw] bool bank
    discriminative: dict                # script -> glyph ids unique to it
    shared: dict                        # script -> glyph ids it shares with others
    sharing_graph: list                 # pairs of scripts with a common pool

    @classmethod
    def build(cls, cfg: DatasetConfig, seed: int | None = None) -> "ScriptSet":
        names = list(cfg.scripts)
        if len(set(names)) != len(names):
            raise ValueError("script names must be unique")
        disc = cfg.discriminative
        disc_counts = list(disc) if isinstance(disc, (list, tuple)) else [int(disc)] * len(names)
        if len(disc_counts) != len(names):
            raise ValueError("one discriminative count per script is required")
        if min(disc_counts) < 1:
            raise ValueError("every script needs at least one discriminative glyph")

        rng = np.random.default_rng([cfg.seed if seed is None else seed, 0xC0DE])
        gh, gw = cfg.glyph_size
        total = sum(disc_counts) + sum(int(p["size"]) for p in cfg.shared_pools)
        bank: list[np.ndarray] = []
        while len(bank) < total:
            g = _draw_glyph(rng, gh, gw, cfg.strokes)
            # keep glyphs visually distinct from each other
            if all(np.logical_xor(g, other).sum() > 0.15 * g.size for other in bank):
                bank.append(g)

        next_id = 0
        discriminative, shared = {}, {n: [] for n in names}
        for name, count in zip(names, disc_counts):
            discriminative[name] = list(range(next_id, next_id + count))
            next_id += count
        graph = []
        for pool in cfg.shared_pools:
            owners = list(pool["scripts"])
            for o in owners:
                if o not in shared:
                    raise ValueError(f"shared pool names unknown script {o!r}")
            ids = list(range(next_id, next_id + int(pool["size"])))
            next_id += int(pool["size"])
            for o in owners:
                shared[o].extend(ids)
            graph.extend((a, b) for i, a in enumerate(owners) for b in owners[i + 1:])
        return cls(names, np.stack(bank), discriminative, shared, graph)

    def label_of(self, name: str) -> int:
        return sorted(self.names).index(name)

    @property
    def classes(self) -> list:
        return sorted(self.names)

    def pool(self, name: str) -> list:
        return self.discriminative[name] + self.shared[name]


def render_glyphs(
    script_set: ScriptSet,
    glyph_ids: list,
    rng: np.random.Generator,
    gap: tuple = (1, 4),
    noise: tuple = (2.0, 12.0),
    return_layout: bool = False,
):
    """Paint glyphs left to right on a noisy 32-pixel-high strip (uint8).

    With ``return_layout`` also returns the x coordinate just past each glyph
    and the right margin width.
    """
    gh, gw = script_set.glyphs.shape[1:]
    n = len(glyph_ids)
    margins = rng.integers(2, 7, size=2)
    gaps = rng.integers(gap[0], gap[1] + 1, size=max(n - 1, 0))
    offsets = rng.integers(-2, 3, size=n) + (LINE_HEIGHT - gh) // 2
    bg = rng.uniform(150, 235)
    ink = rng.uniform(10, 90)
    sigma = rng.uniform(*noise)
    width = int(margins.sum() + n * gw + gaps.sum())
    noise_field = rng.normal(0.0, sigma, size=(LINE_HEIGHT, width))

    img = np.full((LINE_HEIGHT, width), bg, dtype=np.float64)
    x = int(margins[0])
    ends = []
    for i, gid in enumerate(glyph_ids):
        y = int(offsets[i])
        img[y:y + gh, x:x + gw][script_set.glyphs[gid]] = ink
        ends.append(x + gw)
        x += gw + (int(gaps[i]) if i < n - 1 else 0)
    img += noise_field
    out = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if return_layout:
        return out, ends, int(margins[1])
    return out


def compose_line(script_set: ScriptSet, script: str, rng: np.random.Generator,
                 length: tuple, fraction: float, min_discriminative: int = 0) -> tuple[list, int]:
    """Choose glyph ids for one line; returns (ids, number of discriminative glyphs)."""
    n = int(rng.integers(length[0], length[1] + 1))
    shared_pool = script_set.shared[script]
    if fraction > 0 and not shared_pool:
        raise ValueError(f"script {script!r} has no shared glyphs but shared_fraction={fraction}")
    is_shared = rng.random(n) < fraction
    deficit = min(min_discriminative, n) - int((~is_shared).sum())
    if deficit > 0:
        flip = rng.choice(np.flatnonzero(is_shared), size=deficit, replace=False)
        is_shared[flip] = False
    disc_pool = script_set.discriminative[script]
    ids = [int(rng.choice(shared_pool)) if s else int(rng.choice(disc_pool)) for s in is_shared]
    return ids, int((~is_shared).sum())


SPLIT_IDS = {"train": 1, "val": 2, "test": 3}


def generate_split(script_set: ScriptSet, cfg: DatasetConfig, split: str, n_per_script: int,
                   seed: int | None = None) -> list[Sample]:
    """Deterministic lines for one split; each sample has its own RNG stream."""
    seed = cfg.seed if seed is None else seed
    split_id = SPLIT_IDS.get(split, 100 + sum(map(ord, split)))
    samples = []
    for s_idx, script in enumerate(script_set.names):
        fraction = cfg.fraction_for(script)
        if fraction > 0 and not script_set.shared[script]:
            raise ValueError(f"script {script!r} has no shared glyphs but shared_fraction={fraction}")
        for i in range(n_per_script):
            rng = np.random.default_rng([seed, split_id, s_idx, i])
            ids, n_disc = compose_line(script_set, script, rng, cfg.length, fraction, cfg.min_discriminative)
            img = render_glyphs(script_set, ids, rng, cfg.gap, cfg.noise)
            meta = {"script": script, "glyphs": ids, "n_discriminative": n_disc, "hard": n_disc <= 1}
            samples.append(Sample(img, script_set.label_of(script), meta, f"{split}/{script}_{i:05d}.pgm"))
    return samples


def generate_dataset(cfg: DatasetConfig) -> tuple[ScriptSet, dict[str, list[Sample]]]:
    script_set = ScriptSet.build(cfg)
    splits = {name: generate_split(script_set, cfg, name, int(n)) for name, n in cfg.splits.items()}
    return script_set, splits


def flip_pair(script_set: ScriptSet, script: str, n_shared: int, rng: np.random.Generator,
              gap: tuple = (1, 4), noise: tuple = (2.0, 12.0)) -> tuple[np.ndarray, np.ndarray, dict]:
    """An ambiguous line of shared glyphs and the same line with one of the
    script's discriminative glyphs appended.

    The shorter image is the longer one cut after the last shared glyph and
    closed with the longer one's own right margin, so every pixel of it
    also occurs in the extended line.
    """
    shared = script_set.shared[script]
    if not shared:
        raise ValueError(f"script {script!r} has no shared glyphs")
    ids = [int(g) for g in rng.choice(shared, size=n_shared)]
    extra = int(rng.choice(script_set.discriminative[script]))
    full, ends, margin = render_glyphs(script_set, ids + [extra], rng, gap, noise, return_layout=True)
    short = np.concatenate([full[:, :ends[-2]], full[:, full.shape[1] - margin:]], axis=1)
    meta = {"script": script, "glyphs": ids, "extra_glyph": extra, "label": script_set.label_of(script)}
    return short, full, meta
