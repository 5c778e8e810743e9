"""Dataset ingestion: IDX files (MNIST layout), synthetic point clouds, and
the bundled desk-scale handwritten-digits corpus.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images scaled to [0,1] in NCHW layout plus integer class labels."""

    images: np.ndarray  # float32 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"images/labels count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int, split: str | None = None) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], split or self.split)


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"{path}: truncated {what} at offset {fh.tell() - len(data)} "
            f"(wanted {n} bytes, got {len(data)})"
        )
    return data


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse a big-endian IDX image/label file pair (the MNIST layout).

    Pixels are scaled by 1/255; labels stay integer. Magic numbers, counts,
    and payload sizes are validated with offsets in the error messages.
    """
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        raw = _read_exact(fh, n * rows * cols, images_path, "pixel data")
        extra = fh.read(1)
        if extra:
            raise FormatError(f"{images_path}: trailing bytes after {n} images")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    images = (images.astype(np.float32) / 255.0).astype(np.float32)

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        raw = _read_exact(fh, n_labels, labels_path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise FormatError(
            f"{images_path}: image count {n} does not match label count {n_labels}"
        )
    return Dataset(images=images, labels=labels, split=split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N,H,W) and labels (N,) in IDX format."""
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("two_gaussians", "xor_blobs")


def synth_dataset(kind: str, n: int, seed: int, dim: int = 8,
                  margin: float = 3.0, split: str = "train") -> Dataset:
    """Deterministic labeled point clouds in [0,1]^dim, laid out as 1x1xD
    images.

    two_gaussians: two isotropic Gaussians (sigma 0.07) whose means sit
    ``margin`` sigmas away from the separating midplane, so a linear
    classifier is essentially perfect at margin 3. xor_blobs: four blobs in
    the first two coordinates with XOR labels (not linearly separable).
    Class counts are balanced within one.
    """
    if n < 2:
        raise InputError(f"need n >= 2 samples, got {n}")
    if kind not in SYNTH_KINDS:
        raise InputError(f"unknown synthetic kind {kind!r}; options: {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2  # balanced within 1 by construction
    rng.shuffle(labels)
    sigma = 0.07

    if kind == "two_gaussians":
        direction = np.ones(dim) / np.sqrt(dim)
        offset = margin * sigma
        points = 0.5 + rng.normal(0.0, sigma, size=(n, dim))
        points += np.where(labels[:, None] == 1, offset, -offset) * direction[None, :]
    else:
        if dim < 2:
            raise InputError("xor_blobs needs dim >= 2")
        points = 0.5 + rng.normal(0.0, sigma, size=(n, dim))
        corner = rng.integers(0, 2, size=n)
        lo, hi = 0.25, 0.75
        # XOR layout: equal corners -> class 0, mixed corners -> class 1
        cx = np.where(corner == 1, hi, lo)
        cy = np.where((corner ^ labels) == 1, hi, lo)
        points[:, 0] += cx - 0.5
        points[:, 1] += cy - 0.5

    points = np.clip(points, 0.0, 1.0)
    images = points.reshape(n, 1, 1, dim).astype(np.float32)
    return Dataset(images=images, labels=labels.astype(np.int64), split=split)


# ---------------------------------------------------------------------------
# bundled digits corpus (MNIST IDX layout, desk scale)
# ---------------------------------------------------------------------------

_BUNDLE_DIR = Path(__file__).parent / "datasets"
_BUNDLE_FILES = {
    "train_images": "digits-train-images-idx3-ubyte",
    "train_labels": "digits-train-labels-idx1-ubyte",
    "test_images": "digits-test-images-idx3-ubyte",
    "test_labels": "digits-test-labels-idx1-ubyte",
}


def digits_paths() -> dict[str, Path]:
    """Paths of the bundled handwritten-digits IDX files."""
    return {k: _BUNDLE_DIR / v for k, v in _BUNDLE_FILES.items()}


def load_digits_bundle() -> tuple[Dataset, Dataset]:
    """The bundled desk-scale handwritten-digit corpus (8x8, 10 classes)."""
    p = digits_paths()
    train = load_idx(p["train_images"], p["train_labels"], split="train")
    test = load_idx(p["test_images"], p["test_labels"], split="test")
    return train, test
