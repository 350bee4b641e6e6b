"""Dataset ingestion: CIFAR-10 binary files, the IMGT raw-tensor format,
class-balanced subsetting, and the synthetic jigsaw generator used as a
fully-solvable oracle dataset.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import RngStream

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
IMGT_MAGIC = b"IMGT"


@dataclass
class Dataset:
    """Images in [-1, 1], channels last; labels optional."""

    images: np.ndarray          # (N, H, W, C) float32
    labels: Optional[np.ndarray]  # (N,) int64 in [0, class_count)
    split: str
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataFormatError(f"images must be a nonempty (N,H,W,C) array, "
                                  f"got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise DataFormatError("labels must align 1:1 with images")
            if self.labels.size and (self.labels.min() < 0
                                     or self.labels.max() >= self.class_count):
                raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]


def bytes_to_unit(b: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]; 0 -> -1.0, 255 -> +1.0."""
    return (np.asarray(b, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def unit_to_bytes(x: np.ndarray) -> np.ndarray:
    """Inverse mapping, rounding to the nearest byte."""
    scaled = (np.asarray(x, dtype=np.float32) + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise DataFormatError(f"cannot read CIFAR-10 file {path}: {err}") from err
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(blob)} is not a multiple of "
                              f"the {CIFAR_RECORD}-byte record")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return bytes_to_unit(pixels), labels


def read_cifar10_binary(directory: str) -> tuple[Dataset, Dataset]:
    """Standard binary batches: 50,000 train / 10,000 test images."""
    train_parts = [_read_cifar_file(os.path.join(directory, f"data_batch_{i}.bin"))
                   for i in range(1, 6)]
    test_images, test_labels = _read_cifar_file(os.path.join(directory, "test_batch.bin"))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    return (Dataset(images, labels, "train", 10),
            Dataset(test_images, test_labels, "test", 10))


def subset_split(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-balanced sample without replacement, deterministic per seed."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    if ds.labels is None:
        raise ConfigError("subset_split needs labels for class balancing")
    per_class = int(round(fraction * len(ds) / ds.class_count))
    if per_class == 0:
        raise ConfigError(f"fraction {fraction} yields zero examples per class")
    root = RngStream.from_seed(seed).child("subset")
    picks = []
    for cls in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size < per_class:
            raise ConfigError(f"class {cls} has {idx.size} examples, need {per_class}")
        chosen = root.child(cls).generator().permutation(idx.size)[:per_class]
        picks.append(idx[np.sort(chosen)])
    order = np.concatenate(picks)
    order = order[root.child("order").generator().permutation(order.size)]
    return Dataset(ds.images[order], ds.labels[order], ds.split, ds.class_count)


def make_synthetic_jigsaw(n: int, height: int = 16, width: int = 16,
                          channels: int = 3, classes: int = 4, seed: int = 0,
                          cell: int = 4) -> Dataset:
    """Images of constant-color grid cells; solvable pretext and label tasks.

    Cell (r, c) of every image has color (label_value, row_code[r] + jitter,
    col_code[c] + jitter): channel 0 encodes the class label, channels 1-2
    encode the grid position with strides >= 0.25, so any two cells of one
    image differ by >= 0.25 in L-infinity and a patch's position is always
    recoverable from its pixels. Per-image jitter is a single global shift,
    preserving those separations.
    """
    if channels < 3:
        raise ConfigError(f"synthetic jigsaw needs >= 3 channels, got {channels}")
    if height % cell or width % cell:
        raise ConfigError(f"cell size {cell} does not divide {height}x{width}")
    rows, cols = height // cell, width // cell
    if rows < 2 or cols < 2:
        raise ConfigError(f"grid {rows}x{cols} too small for a jigsaw")
    if rows > 5 or cols > 5:
        raise ConfigError(f"grid {rows}x{cols} too large: color codes would fall "
                          "closer than the 0.25 separation contract")
    row_code = np.linspace(-0.6, 0.6, rows, dtype=np.float32)
    col_code = np.linspace(-0.6, 0.6, cols, dtype=np.float32)
    label_value = np.linspace(-0.8, 0.8, classes, dtype=np.float32)

    root = RngStream.from_seed(seed).child("jigsaw")
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[root.child("labels").generator().permutation(n)]

    images = np.zeros((n, height, width, channels), dtype=np.float32)
    for i in range(n):
        gen = root.child("img", i).generator()
        jitter = (gen.random(2, dtype=np.float64) * 0.2 - 0.1).astype(np.float32)
        for r in range(rows):
            for c in range(cols):
                block = images[i, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
                block[..., 0] = label_value[labels[i]]
                block[..., 1] = row_code[r] + jitter[0]
                block[..., 2] = col_code[c] + jitter[1]
    return Dataset(images, labels, "train", classes)


def write_imgt(path: str, ds: Dataset) -> None:
    """Raw tensor file: magic, u32 N/H/W/C, little-endian float32 payload;
    labels in an adjacent .lbl file as little-endian u16."""
    n, h, w, c = ds.images.shape
    with open(path, "wb") as f:
        f.write(IMGT_MAGIC)
        f.write(struct.pack("<4I", n, h, w, c))
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    if ds.labels is not None:
        with open(path + ".lbl", "wb") as f:
            f.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def read_imgt(path: str, split: str = "train",
              class_count: Optional[int] = None) -> Dataset:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err}") from err
    if blob[:4] != IMGT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not an IMGT file")
    n, h, w, c = struct.unpack("<4I", blob[4:20])
    need = 20 + 4 * n * h * w * c
    if len(blob) < need:
        raise DataFormatError(f"{path}: truncated payload ({len(blob)} < {need} bytes)")
    images = np.frombuffer(blob[20:need], dtype="<f4").reshape(n, h, w, c).copy()

    labels = None
    lbl_path = path + ".lbl"
    if os.path.exists(lbl_path):
        with open(lbl_path, "rb") as f:
            labels = np.frombuffer(f.read(), dtype="<u2").astype(np.int64)
        if labels.shape != (n,):
            raise DataFormatError(f"{lbl_path}: {labels.size} labels for {n} images")
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None and labels.size else 1
    return Dataset(images, labels, split, class_count)
