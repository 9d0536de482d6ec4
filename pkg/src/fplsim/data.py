"""EMNIST ingestion (IDX), the five per-source view transforms, and sharding."""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (ConfigurationError, DataError, DimensionMismatchError, TruncatedFileError,
                     WrongMagicError)
from .rng import derive_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 62
DATA_ENV_VAR = "FPLSIM_EMNIST_ROOT"


@dataclass
class ImageSet:
    """Images [N, 1, H, W] in [0, 1] (float32) and integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError(f"negative label {self.labels.min()}")
        if self.images.size and not (self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise DataError(f"pixel values outside [0, 1]: [{self.images.min()}, {self.images.max()}]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx])

    def histogram(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


# -------------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the 4-byte magic number", path, len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise WrongMagicError(f"wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"header needs {header} bytes", path, len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) < expected:
        raise TruncatedFileError(f"payload ends early: dims {dims} need {expected} bytes", path, len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def _load_raw(images_path, labels_path) -> tuple:
    raw = _parse_idx(images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, LABELS_MAGIC, 1)
    if raw.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(f"{labels.shape[0]} labels for {raw.shape[0]} images", labels_path, 4)
    return raw, labels


def _to_set(raw: np.ndarray, labels: np.ndarray) -> ImageSet:
    return ImageSet(raw.astype(np.float32) / np.float32(255.0), labels.astype(np.int64))


def load_idx(images_path, labels_path) -> ImageSet:
    """Parse a big-endian IDX image file (0x803, [N,28,28]) and label file (0x801, [N]); gzip is detected."""
    return _to_set(*_load_raw(images_path, labels_path))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, compress: bool = False) -> None:
    """Write uint8 images [N,H,W] and labels [N] as IDX (optionally gzipped)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as fh:
        fh.write(img)
    with opener(labels_path, "wb") as fh:
        fh.write(lab)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the 1/255 scaling, for re-serialising a loaded set."""
    return np.rint(np.asarray(images).reshape(len(images), *np.asarray(images).shape[-2:]) * 255.0).astype(np.uint8)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def emnist_paths(root=None, split: str = "byclass", part: str = "train") -> tuple:
    root = root or os.environ.get(DATA_ENV_VAR)
    if not root:
        raise FileNotFoundError(f"no EMNIST root given and ${DATA_ENV_VAR} is unset")
    root = Path(root)
    return (_find(root, f"emnist-{split}-{part}-images-idx3-ubyte"),
            _find(root, f"emnist-{split}-{part}-labels-idx1-ubyte"))


def load_emnist(root=None, split: str = "byclass", part: str = "train", subset: Optional[int] = None,
                seed: int = 0) -> ImageSet:
    """Load an EMNIST split from ``root`` (default: $FPLSIM_EMNIST_ROOT), optionally a stratified subset.

    EMNIST stores images transposed relative to MNIST; they are transposed
    back here so flips act on upright glyphs.  The subset is drawn before
    conversion to float so the full split is never materialised as floats.
    """
    raw, labels = _load_raw(*emnist_paths(root, split, part))
    if subset is not None and subset < len(labels):
        idx = stratified_indices(labels, subset, seed, key=f"subset/{part}")
        raw, labels = raw[idx], labels[idx]
    return _to_set(raw.transpose(0, 2, 1), labels)


# --------------------------------------------------------------- transforms

TRANSFORM_KINDS = ("blur", "erase", "hflip", "vflip", "crop")
DEFAULT_PARAMS = {
    "blur": {"sigma": 1.0, "size": 5},
    "erase": {"min_side": 6, "max_side": 12},
    "hflip": {},
    "vflip": {},
    "crop": {"size": 20},
}


@dataclass
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigurationError(f"unknown transform {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        self.params = {**DEFAULT_PARAMS[self.kind], **self.params}


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    rows = np.linspace(0, h - 1, out_h)
    cols = np.linspace(0, w - 1, out_w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def transform(data: ImageSet, spec: TransformSpec) -> ImageSet:
    """Apply one view transform to every image; randomness comes only from ``spec.seed``."""
    imgs = data.images
    _, _, h, w = imgs.shape
    p = spec.params
    if spec.kind == "hflip":
        out = imgs[..., ::-1]
    elif spec.kind == "vflip":
        out = imgs[..., ::-1, :]
    elif spec.kind == "blur":
        sigma, size = float(p["sigma"]), int(p["size"])
        if sigma <= 0 or size < 1 or size % 2 == 0:
            raise ConfigurationError(f"blur needs sigma > 0 and an odd kernel size, got {p}")
        k = gaussian_kernel(sigma, size)
        out = ndimage.correlate1d(imgs.astype(np.float64), k, axis=2, mode="reflect")
        out = ndimage.correlate1d(out, k, axis=3, mode="reflect")
    elif spec.kind == "erase":
        lo, hi = int(p["min_side"]), int(p["max_side"])
        if not 1 <= lo <= hi or hi > min(h, w):
            raise ConfigurationError(f"erase sides must satisfy 1 <= min_side <= max_side <= {min(h, w)}, got {p}")
        rng = derive_rng(spec.seed, "erase")
        out = imgs.copy()
        for i in range(len(out)):
            bh, bw = rng.integers(lo, hi + 1, size=2)
            y, x = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
            out[i, :, y:y + bh, x:x + bw] = 0.0
    elif spec.kind == "crop":
        size = int(p["size"])
        if not 1 < size <= min(h, w):
            raise ConfigurationError(f"crop size must be in (1, {min(h, w)}], got {size}")
        rng = derive_rng(spec.seed, "crop")
        out = np.empty_like(imgs)
        for i in range(len(imgs)):
            y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
            for c in range(imgs.shape[1]):
                out[i, c] = _bilinear_resize(imgs[i, c, y:y + size, x:x + size].astype(np.float64), h, w)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageSet(np.ascontiguousarray(out), data.labels.copy())


def default_transforms(num_sources: int, seed: int) -> list:
    """One transform per source, cycling blur, erase, hflip, vflip, crop."""
    return [TransformSpec(TRANSFORM_KINDS[k % len(TRANSFORM_KINDS)], seed=int(derive_rng(seed, "view", k).integers(2**31)))
            for k in range(num_sources)]


# ----------------------------------------------------------------- sharding

def shard_indices(n: int, num_sources: int, seed: int) -> list:
    if num_sources < 1:
        raise ConfigurationError(f"num_sources must be >= 1, got {num_sources}")
    perm = derive_rng(seed, "shard").permutation(n)
    return [np.sort(part) for part in np.array_split(perm, num_sources)]


def shard(data: ImageSet, num_sources: int, seed: int, transforms: Optional[Sequence[TransformSpec]] = None,
          overlapping: bool = False) -> list:
    """Split ``data`` into per-source views.

    Disjoint mode (default) partitions images at random into near-equal
    parts; overlapping mode gives every source all images.  Source k's
    images are then passed through ``transforms[k]``.
    """
    transforms = default_transforms(num_sources, seed) if transforms is None else list(transforms)
    if len(transforms) != num_sources:
        raise ConfigurationError(f"{len(transforms)} transforms for {num_sources} sources")
    if overlapping:
        parts = [np.arange(len(data)) for _ in range(num_sources)]
    else:
        parts = shard_indices(len(data), num_sources, seed)
    return [transform(data.subset(idx), spec) for idx, spec in zip(parts, transforms)]


def write_manifest(path, parts: Sequence[np.ndarray], transforms: Sequence[TransformSpec], seed: int,
                   overlapping: bool) -> None:
    manifest = {
        "seed": seed,
        "mode": "overlapping" if overlapping else "disjoint",
        "shards": [{"source": k, "transform": {"kind": t.kind, "params": t.params, "seed": t.seed},
                    "indices": [int(i) for i in idx]} for k, (idx, t) in enumerate(zip(parts, transforms))],
    }
    Path(path).write_text(json.dumps(manifest, indent=1))


def stratified_split(labels: np.ndarray, fraction: float, seed: int, key: str = "split"):
    """Return (rest, held_out) index arrays with ``fraction`` of every class held out."""
    rng = derive_rng(seed, key)
    held, rest = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        held.append(idx[:k])
        rest.append(idx[k:])
    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.zeros(0, dtype=np.int64)
    return cat(rest), cat(held)


def stratified_indices(labels: np.ndarray, n: int, seed: int, key: str = "subset") -> np.ndarray:
    """Sorted indices of ``n`` items keeping class proportions (largest-remainder rounding)."""
    labels = np.asarray(labels)
    if n >= len(labels):
        return np.arange(len(labels))
    counts = np.bincount(labels)
    exact = counts * (n / len(labels))
    take = np.floor(exact).astype(int)
    order = np.argsort(-(exact - take), kind="stable")
    take[order[:n - take.sum()]] += 1
    rng = derive_rng(seed, key)
    chosen = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c, k in enumerate(take) if k]
    return np.sort(np.concatenate(chosen))


def stratified_subset(data: ImageSet, n: int, seed: int, key: str = "subset") -> ImageSet:
    return data.subset(stratified_indices(data.labels, n, seed, key))


def align_views(views: Sequence[ImageSet], seed: int, overlapping: bool = False) -> list:
    """Index arrays pairing one sample from every view per training tuple.

    Overlapping views are already aligned image-for-image.  Disjoint views
    hold different images, so tuples are formed by matching class labels:
    for each class, that class's samples from every view are zipped up to
    the smallest per-view count.
    """
    if overlapping:
        n = len(views[0])
        return [np.arange(n) for _ in views]
    rng = derive_rng(seed, "align")
    classes = np.unique(np.concatenate([v.labels for v in views]))
    cols = [[] for _ in views]
    for c in classes:
        per_view = [np.flatnonzero(v.labels == c) for v in views]
        m = min(len(p) for p in per_view)
        for k, p in enumerate(per_view):
            cols[k].append(p[rng.permutation(len(p))[:m]])
    order = None
    out = []
    for k, parts in enumerate(cols):
        col = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        if order is None:
            order = derive_rng(seed, "align-order").permutation(len(col))
        out.append(col[order])
    return out


def synthetic_glyphs(n: int, num_classes: int = NUM_CLASSES, seed: int = 0, size: int = 28) -> ImageSet:
    """Class-conditional stroke images for smoke tests when EMNIST is unavailable (not EMNIST)."""
    proto_rng = derive_rng(seed, "glyph-prototypes")
    protos = np.zeros((num_classes, size, size))
    for c in range(num_classes):
        for _ in range(3):
            y0, x0, y1, x1 = proto_rng.integers(5, size - 5, size=4)
            t = np.linspace(0.0, 1.0, 4 * size)
            protos[c, np.rint(y0 + t * (y1 - y0)).astype(int), np.rint(x0 + t * (x1 - x0)).astype(int)] = 1.0
        protos[c] = ndimage.gaussian_filter(protos[c], 0.8)
        protos[c] /= protos[c].max()
    rng = derive_rng(seed, "glyph-samples")
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = np.empty((n, size, size))
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-2, 3, size=2)
        imgs[i] = np.roll(protos[c], (dy, dx), axis=(0, 1)) + 0.1 * rng.standard_normal((size, size))
    return ImageSet(np.clip(imgs, 0.0, 1.0)[:, None], labels)
