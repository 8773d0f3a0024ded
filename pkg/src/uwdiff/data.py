"""Paired corpus ingestion: loading, splitting and batching of raw/reference images.

Corpora follow a two-folder layout with shared filename stems::

    root/
      raw/        0001.png  0002.jpg ...
      reference/  0001.png  0002.jpg ...

Images are held as float32 HxWx3 arrays in [0, 1]. Re-centering to [-1, 1]
is the diffusion code's business, not this module's.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
RAW_DIR = "raw"
REF_DIR = "reference"


class CorpusError(RuntimeError):
    """Raised for malformed corpora (orphans, unreadable files, bad layout)."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImagePair:
    raw: np.ndarray
    reference: np.ndarray
    id: str

    def __post_init__(self):
        raw, ref = _freeze(self.raw), _freeze(self.reference)
        if raw.shape != ref.shape:
            raise ValueError(f"{self.id}: raw {raw.shape} vs reference {ref.shape}")
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise ValueError(f"{self.id}: expected HxWx3, got {raw.shape}")
        for name, a in (("raw", raw), ("reference", ref)):
            if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"{self.id}: {name} values must be finite and in [0, 1]")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "reference", ref)

    @property
    def side(self) -> int:
        return self.raw.shape[0]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[ImagePair, ...]
    val: tuple[ImagePair, ...]
    seed: int

    def __post_init__(self):
        overlap = {p.id for p in self.train} & {p.id for p in self.val}
        if overlap:
            raise ValueError(f"train/val overlap: {sorted(overlap)}")


def list_images(directory: str | os.PathLike) -> dict[str, Path]:
    """Map filename stem -> path for every PNG/JPEG file in ``directory``."""
    out: dict[str, Path] = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise CorpusError(f"duplicate stem {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def preprocess(img: Image.Image, side: int) -> np.ndarray:
    """RGB conversion, bilinear anti-aliased resize to side x side, scale to [0, 1].

    Resizing happens on the 8-bit image and is skipped when the size already
    matches, so re-encoding a preprocessed image and loading it again is a no-op.
    """
    img = img.convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.Resampling.BILINEAR, reducing_gap=None)
    return np.asarray(img, dtype=np.float32) / 255.0


def read_image(path: str | os.PathLike, side: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if side is None:
                return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            return preprocess(im, side)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"unreadable image: {path} ({exc})") from exc


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an 8-bit PNG atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(to_uint8(img)).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_corpus(root: str | os.PathLike, side: int = 256, workers: int = 1) -> list[ImagePair]:
    root = Path(root)
    raw_dir, ref_dir = root / RAW_DIR, root / REF_DIR
    for d in (raw_dir, ref_dir):
        if not d.is_dir():
            raise CorpusError(f"missing directory: {d}")
    raws, refs = list_images(raw_dir), list_images(ref_dir)
    orphans = sorted(set(raws) ^ set(refs))
    if orphans:
        raise CorpusError(f"orphan ids without counterpart: {', '.join(orphans)}")
    ids = sorted(raws)

    def _load(i: str) -> ImagePair:
        return ImagePair(read_image(raws[i], side), read_image(refs[i], side), i)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(_load, ids))
    return [_load(i) for i in ids]


def split_corpus(pairs: Sequence[ImagePair], val_fraction: float, seed: int) -> DatasetSplit:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(pairs) < 2:
        raise ConfigError("need at least two pairs to split")
    n_val = int(np.floor(val_fraction * len(pairs) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(pairs))
    val_idx = set(perm[:n_val].tolist())
    train = tuple(p for k, p in enumerate(pairs) if k not in val_idx)
    val = tuple(p for k, p in enumerate(pairs) if k in val_idx)
    return DatasetSplit(train=train, val=val, seed=seed)


def batch_iter(pairs: Sequence[ImagePair], batch_size: int,
               shuffle_seed: int | None = None) -> Iterator[list[ImagePair]]:
    """Yield batches covering every pair exactly once; the last may be partial."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield [pairs[k] for k in order[start:start + batch_size]]


def stack(pairs: Sequence[ImagePair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a batch into (raw, reference) arrays shaped Nx3xHxW."""
    raw = np.stack([p.raw for p in pairs]).transpose(0, 3, 1, 2)
    ref = np.stack([p.reference for p in pairs]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(raw), np.ascontiguousarray(ref)


def corpus_fingerprint(pairs: Sequence[ImagePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.id.encode())
        h.update(p.raw.tobytes())
        h.update(p.reference.tobytes())
    return h.hexdigest()


def write_pairs(pairs: Sequence[ImagePair], root: str | os.PathLike) -> None:
    """Materialize pairs in the raw/ + reference/ layout (used by scripts and tests)."""
    root = Path(root)
    for p in pairs:
        save_image(p.raw, root / RAW_DIR / f"{p.id}.png")
        save_image(p.reference, root / REF_DIR / f"{p.id}.png")
