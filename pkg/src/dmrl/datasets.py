"""Two-domain data: synthetic shifted blobs, IDX digit files, CSV digit rows."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# IDX element type codes -> big-endian numpy dtypes
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_DTYPES.items()}


@dataclass
class DomainDataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    domain_tag: str = "source"
    split: str = "train"
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)

    def subset(self, n: int) -> "DomainDataset":
        return replace(self, images=self.images[:n], labels=None if self.labels is None else self.labels[:n])


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian class blobs on a circle; the target is rotated and translated."""

    num_classes: int = 3
    per_class: int = 100
    radius: float = 3.0
    sigma: float = 0.5
    rotation: float = math.radians(50.0)
    translation: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    eval_per_class: int | None = None

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("synthetic task needs at least 2 classes")
        if not self.sigma > 0:
            raise ConfigurationError("synthetic noise sigma must be positive")
        if self.per_class < 1 or (self.eval_per_class is not None and self.eval_per_class < 1):
            raise ConfigurationError("samples per class must be positive")
        if not self.radius >= 0:
            raise ConfigurationError("class-mean radius must be nonnegative")

    def class_means(self, domain: str = "source") -> np.ndarray:
        k = np.arange(self.num_classes)
        angles = 2.0 * np.pi * k / self.num_classes
        if domain == "target":
            angles = angles + self.rotation
        means = self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        if domain == "target":
            means = means + np.asarray(self.translation, dtype=np.float64)
        return means


_SPLIT_STREAMS = {("source", "train"): 0, ("target", "train"): 1, ("source", "eval"): 2, ("target", "eval"): 3}


def _blobs(spec: SynthSpec, domain: str, split: str) -> DomainDataset:
    n = spec.per_class if split == "train" else (spec.eval_per_class or spec.per_class)
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAMS[domain, split]])
    labels = np.repeat(np.arange(spec.num_classes), n)
    noise = rng.standard_normal((len(labels), 2)) * spec.sigma
    if domain == "target":
        # rotate the whole generative process, noise included
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        noise = noise @ np.array([[c, s], [-s, c]])
    x = spec.class_means(domain)[labels] + noise
    order = rng.permutation(len(labels))
    keep_labels = not (domain == "target" and split == "train")
    return DomainDataset(x[order], labels[order] if keep_labels else None, domain, split, spec.num_classes)


def generate_synthetic(spec: SynthSpec, split: str = "train") -> tuple[DomainDataset, DomainDataset]:
    """Source and target datasets for one split.

    Target training data carries no labels; every eval split is labeled.
    """
    spec.validate()
    if split not in ("train", "eval"):
        raise ConfigurationError(f"unknown split {split!r}")
    return _blobs(spec, "source", split), _blobs(spec, "target", split)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES or raw[3] == 0:
        raise FormatError(f"{path}: bad IDX magic bytes {raw[:4].hex()}")
    dtype, rank = _IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, dimensions {dims} need {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, domain_tag: str = "source", split: str = "train") -> DomainDataset:
    """Read an IDX image file (and optional label file).

    Unsigned-byte images of rank 3 become ``M x 1 x H x W`` in [0, 1] (bytes
    divided by 255).  Floating-point IDX payloads are returned unscaled, which
    is how synthetic vector datasets are stored.
    """
    arr = _read_idx(images_path)
    if arr.dtype == np.dtype(">u1"):
        if Path(images_path).read_bytes()[:4] != struct.pack(">I", IDX_IMAGES_MAGIC):
            raise FormatError(f"{images_path}: expected image magic {IDX_IMAGES_MAGIC:#010x}")
        images = (arr.astype(np.float64) / 255.0)[:, None, :, :]
    elif arr.dtype.kind == "f":
        images = arr.astype(np.float64)
    else:
        raise FormatError(f"{images_path}: unsupported IDX element type {arr.dtype}")
    labels = None
    if labels_path is not None:
        head = Path(labels_path).read_bytes()[:4]
        if head != struct.pack(">I", IDX_LABELS_MAGIC):
            raise FormatError(f"{labels_path}: bad label magic bytes {head.hex()}, expected 00000801")
        labels = _read_idx(labels_path).astype(np.int64)
        if len(labels) != len(images):
            raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    num_classes = int(labels.max()) + 1 if labels is not None and len(labels) else None
    return DomainDataset(images, labels, domain_tag, split, num_classes)


def _write_idx(path, arr: np.ndarray) -> None:
    code = _IDX_CODES[np.dtype(arr.dtype).newbyteorder(">")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder(">"))).tobytes())


def write_idx(images_path, images: np.ndarray, labels_path=None, labels=None) -> None:
    """Write images (uint8 rank 3, or float64 any rank) and optional uint8 labels."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = images.astype(np.float64)
    _write_idx(images_path, images)
    if labels_path is not None:
        _write_idx(labels_path, np.asarray(labels).astype(np.uint8))


def dataset_to_idx(ds: DomainDataset, images_path, labels_path=None) -> None:
    write_idx(images_path, ds.images, labels_path if ds.labeled else None, ds.labels)


# ---------------------------------------------------------------------------
# CSV digit rows


def upsample_nearest(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return images[..., rows[:, None], cols[None, :]]


def load_csv_digits(path, domain_tag: str = "target", split: str = "train", size: int = 28) -> DomainDataset:
    """Parse ``label,p0,p1,...`` lines of square grayscale digits.

    Pixel values are divided by 255 when the file maximum exceeds 1.  16x16
    digits are upsampled by nearest neighbour to ``size`` x ``size``.
    """
    labels, rows = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} fields, found {len(parts)}")
            try:
                labels.append(int(float(parts[0])))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no data rows")
    pixels = np.asarray(rows, dtype=np.float64)
    side = math.isqrt(pixels.shape[1])
    if side * side != pixels.shape[1]:
        raise FormatError(f"{path}: {pixels.shape[1]} pixels per row is not a square image")
    if pixels.max() > 1.0:
        pixels = pixels / 255.0
    images = pixels.reshape(-1, 1, side, side)
    if side == 16:
        images = upsample_nearest(images, size)
    labels_arr = np.asarray(labels, dtype=np.int64)
    return DomainDataset(images, labels_arr, domain_tag, split, int(labels_arr.max()) + 1)


def load_any(images_path, labels_path=None, **kw) -> DomainDataset:
    if str(images_path).endswith(".csv"):
        return load_csv_digits(images_path, **kw)
    return load_idx(images_path, labels_path, **kw)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None
    index: np.ndarray


def make_batches(ds: DomainDataset, n: int, seed, epoch: int = 0) -> Iterator[Batch]:
    """One shuffled pass over ``ds`` in batches of ``n``; the short tail is dropped."""
    if n < 1 or n > len(ds):
        raise ConfigurationError(f"batch size {n} must be between 1 and the dataset size {len(ds)}")
    order = np.random.default_rng([*np.atleast_1d(seed).tolist(), epoch]).permutation(len(ds))
    for start in range(0, len(ds) - n + 1, n):
        idx = order[start:start + n]
        yield Batch(ds.images[idx], None if ds.labels is None else ds.labels[idx], idx)


def cycle_batches(ds: DomainDataset, n: int, seed) -> Iterator[Batch]:
    """Endless stream of reshuffled epochs."""
    epoch = 0
    while True:
        yield from make_batches(ds, n, seed, epoch)
        epoch += 1
