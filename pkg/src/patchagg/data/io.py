"""Image files and tab-separated manifests."""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .synth import Sample


class ManifestError(ValueError):
    pass


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM writer expects a 2-d uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        data = np.frombuffer(raw, dtype=">u2", count=w * h, offset=m.end())
        return np.round(data.reshape(h, w) * (255.0 / maxval)).astype(np.uint8)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end())
    if maxval != 255:
        data = np.round(data * (255.0 / maxval)).astype(np.uint8)
    return data.reshape(h, w).copy()


def read_image(path) -> np.ndarray:
    """Grayscale uint8 array from a PGM or PNG file."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    raise ValueError(f"{path}: unsupported image extension {ext!r}")


META_FILE = "meta.jsonl"
CLASSES_FILE = "classes.txt"


def write_split(root, name: str, samples: Sequence[Sample], classes: Sequence[str]) -> Path:
    """Write images, ``<name>.tsv`` and per-sample metadata under ``root``."""
    root = Path(root)
    manifest = root / f"{name}.tsv"
    lines, meta_lines = [], []
    for s in samples:
        path = root / s.path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, s.image)
        lines.append(f"{s.path}\t{classes[s.label]}\n")
        meta_lines.append(json.dumps({"path": s.path, **s.meta}, sort_keys=True) + "\n")
    manifest.write_text("".join(lines), encoding="utf-8")
    with open(root / META_FILE, "a", encoding="utf-8") as f:
        f.writelines(meta_lines)
    (root / CLASSES_FILE).write_text("".join(c + "\n" for c in classes), encoding="utf-8")
    return manifest


def read_classes(root) -> list[str] | None:
    p = Path(root) / CLASSES_FILE
    if not p.exists():
        return None
    return [line for line in p.read_text(encoding="utf-8").splitlines() if line]


def _read_meta(root) -> dict:
    p = Path(root) / META_FILE
    if not p.exists():
        return {}
    out = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec.pop("path")] = rec
    return out


def ingest_manifest(root, manifest: str = "train.tsv", classes: Sequence[str] | None = None) -> list[Sample]:
    """Load the samples listed in ``root/manifest`` (``path<TAB>label`` lines).

    Label names map to ids by their sorted order; ``classes`` (or a
    ``classes.txt`` next to the manifest) pins that order explicitly.
    """
    root = Path(root)
    mpath = root / manifest
    text = mpath.read_text(encoding="utf-8")
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ManifestError(f"{mpath}:{lineno}: expected 'path<TAB>label', got {line!r}")
        entries.append((lineno, parts[0], parts[1]))

    if classes is None:
        classes = read_classes(root) or sorted({label for _, _, label in entries})
    index = {name: i for i, name in enumerate(classes)}
    meta = _read_meta(root)
    samples = []
    for lineno, rel, label in entries:
        if label not in index:
            raise ManifestError(f"{mpath}:{lineno}: unknown label {label!r}")
        path = root / rel
        if not path.exists():
            raise ManifestError(f"{mpath}:{lineno}: missing file {rel}")
        try:
            img = read_image(path)
        except ValueError as exc:
            raise ManifestError(f"{mpath}:{lineno}: {exc}") from exc
        samples.append(Sample(img, index[label], dict(meta.get(rel, {})), rel))
    return samples
