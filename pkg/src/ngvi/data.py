"""Dataset loaders (MNIST IDX, CSV) and synthetic instances."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .models import STREAM_DATA, Dataset, rng_stream

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
PIXEL_SCALE = 255.0
MNIST_DIR_ENV = "NGVI_MNIST_DIR"
SYNTH_KINDS = ("poisson_point", "logistic", "linear")


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class RawImageSet:
    images: np.ndarray  # (n, rows * cols) in [0, 1]
    labels: np.ndarray  # (n,) integers 0-9
    rows: int
    cols: int

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple:
    size = 4 * (1 + ndim)
    if len(buf) < size:
        raise TruncatedFileError(f"{what} file is shorter than its {size}-byte header")
    fields = struct.unpack(f">{1 + ndim}I", buf[:size])
    if fields[0] != magic:
        raise BadMagicError(f"{what} file has magic {fields[0]:#010x}, expected {magic:#010x}")
    return fields[1:]


def parse_idx_images(buf: bytes) -> tuple[np.ndarray, int, int]:
    n, rows, cols = _parse_header(buf, IDX_IMAGE_MAGIC, 3, "image")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise TruncatedFileError(f"image file holds {len(buf)} bytes, header promises {need}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows * cols), rows, cols


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (n,) = _parse_header(buf, IDX_LABEL_MAGIC, 1, "label")
    if len(buf) < 8 + n:
        raise TruncatedFileError(f"label file holds {len(buf)} bytes, header promises {8 + n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path) -> RawImageSet:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``. ``.gz`` files are accepted."""
    pixels, rows, cols = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if pixels.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    return RawImageSet(pixels / PIXEL_SCALE, labels.astype(np.int64), rows, cols)


def idx_image_bytes(pixels: np.ndarray) -> bytes:
    """Serialize uint8 images of shape ``(n, rows, cols)``."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack(">4I", IDX_IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()


def idx_label_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", IDX_LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def raw_to_idx_bytes(raw: RawImageSet) -> tuple[bytes, bytes]:
    pixels = np.rint(raw.images * PIXEL_SCALE).astype(np.uint8).reshape(raw.n, raw.rows, raw.cols)
    return idx_image_bytes(pixels), idx_label_bytes(raw.labels)


def filter_binary(raw: RawImageSet, a: int, b: int) -> Dataset:
    """Keep labels ``a`` and ``b`` in their original order, mapped to ``+1`` and ``-1``."""
    if a == b:
        raise ValueError("the two classes must differ")
    keep = (raw.labels == a) | (raw.labels == b)
    if not np.any(keep):
        raise ValueError(f"no images with label {a} or {b}")
    y = np.where(raw.labels[keep] == a, 1.0, -1.0)
    return Dataset(raw.images[keep], y)


def mnist_paths(directory=None, split: str = "train"):
    """Locate the MNIST image/label files for ``split`` or return ``None``."""
    directory = directory or os.environ.get(MNIST_DIR_ENV)
    if not directory:
        return None
    prefix = "train" if split == "train" else "t10k"
    found = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            p = Path(directory) / cand
            if p.exists():
                found.append(p)
                break
        else:
            return None
    return tuple(found)


def load_csv(path) -> Dataset:
    """CSV with a header row; the last column is the label."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path} has no data rows")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return Dataset(body[:, :-1], body[:, -1])


def synth(kind: str, n: int = 1, d: int = 1, seed: int = 0) -> Dataset:
    """Synthetic instances.

    ``poisson_point`` is the fixed single observation ``(0.9, 24)`` and ignores
    ``n``, ``d`` and ``seed``. ``logistic`` and ``linear`` draw a ground truth
    ``z* ~ N(0, I)`` and features ``x ~ N(0, I/d)``.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if kind == "poisson_point":
        return Dataset(np.array([[0.9]]), np.array([24.0]))
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = rng_stream(seed, 0, STREAM_DATA)
    z_true = rng.standard_normal(d)
    x = rng.standard_normal((n, d)) / np.sqrt(d)
    s = x @ z_true
    if kind == "logistic":
        y = np.where(rng.uniform(size=n) < expit(s), 1.0, -1.0)
    else:
        y = s + rng.standard_normal(n)
    return Dataset(x, y)
