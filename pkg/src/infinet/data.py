"""CIFAR-10 binary reader/writer, a synthetic blob dataset, batching, augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: Tensor  # (H, W, 3), values in [0, 1]
    label: int


@dataclass(frozen=True)
class Batch:
    images: Tensor  # (N, H, W, 3)
    labels: list[int]


def as_arrays(samples: Sequence[Sample], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0, 0, 3), dtype=dtype), np.zeros(0, dtype=np.int64)
    images = np.stack([s.image.data for s in samples]).astype(dtype, copy=False)
    return images, np.array([s.label for s in samples], dtype=np.int64)


def from_arrays(images: np.ndarray, labels: Sequence[int]) -> list[Sample]:
    return [Sample(Tensor(img), int(lab)) for img, lab in zip(images, labels)]


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout: 1 label byte + 1024 R + 1024 G + 1024 B, row-major

def load_cifar10_bin(path, num_classes: int = 10) -> list[Sample]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]} > {num_classes - 1}")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return from_arrays(pixels.astype(np.float64) / 255.0, labels)


def write_cifar10_bin(path, samples: Sequence[Sample]):
    """Quantize ``[0, 1]`` images to bytes in the CIFAR-10 record layout (32x32 only)."""
    images, labels = as_arrays(samples)
    if samples and images.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError(f"CIFAR-10 records are 32x32x3, got {images.shape[1:]}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels must fit in one byte")
    out = np.empty((len(samples), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    planar = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).transpose(0, 3, 1, 2)
    out[:, 1:] = planar.reshape(len(samples), -1)
    Path(path).write_bytes(out.tobytes())


def load_cifar10_dir(root) -> tuple[list[Sample], list[Sample]]:
    """Read ``data_batch_*.bin`` (train) and ``test_batch.bin`` (val) from a directory."""
    root = Path(root)
    if root.is_file():
        return load_cifar10_bin(root), []
    train_files = sorted(root.glob("data_batch_*.bin"))
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
    train = [s for f in train_files for s in load_cifar10_bin(f)]
    test = root / "test_batch.bin"
    return train, load_cifar10_bin(test) if test.exists() else []


# ---------------------------------------------------------------------------
# synthetic blobs

@dataclass(frozen=True)
class BlobLayout:
    """Per-class bump templates: centres (y, x) and RGB colours of each bump."""

    centers: np.ndarray  # (K, B, 2)
    colors: np.ndarray  # (K, B, 3)


def blob_layout(num_classes: int, H: int, W: int, bumps: int = 2, seed: int = 0) -> BlobLayout:
    rng = np.random.default_rng(seed)
    margin = 0.2
    centers = rng.uniform(margin, 1 - margin, size=(num_classes, bumps, 2)) * np.array([H - 1, W - 1])
    colors = rng.uniform(-1.0, 1.0, size=(num_classes, bumps, 3))
    colors /= np.linalg.norm(colors, axis=-1, keepdims=True)
    return BlobLayout(centers, colors)


def synth_blobs(num_classes: int, per_class: int, H: int = 32, W: int = 32, seed: int = 0,
                noise: float = 0.15, jitter: float = 0.12, width: float = 0.12,
                layout_seed: int = 0) -> list[Sample]:
    """Class-specific Gaussian bumps on a grey background plus pixel noise.

    ``layout_seed`` fixes the class templates so train/val splits drawn with
    different ``seed`` values share classes. ``jitter`` (fraction of the image
    side) moves every bump per sample, which keeps a linear probe well short
    of perfect; ``noise`` is the pixel noise std.
    """
    if per_class <= 0 or num_classes <= 0:
        return []
    layout = blob_layout(num_classes, H, W, seed=layout_seed)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sig = width * min(H, W)
    images, labels = [], []
    for k in range(num_classes):
        for _ in range(per_class):
            img = np.full((H, W, 3), 0.5)
            for (cy, cx), col in zip(layout.centers[k], layout.colors[k]):
                cy = cy + rng.normal(0, jitter * H)
                cx = cx + rng.normal(0, jitter * W)
                amp = rng.uniform(0.6, 1.0) * 0.45
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
                img += amp * bump[..., None] * col
            img += rng.normal(0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    order = rng.permutation(len(labels))
    return [Sample(Tensor(images[i]), labels[i]) for i in order]


# ---------------------------------------------------------------------------
# augmentation and batching

def hflip(sample: Sample) -> Sample:
    return Sample(Tensor(sample.image.data[:, ::-1, :]), sample.label)


def augment(sample: Sample, rng: np.random.Generator, pad: int = 4) -> Sample:
    """Random horizontal flip (p=0.5) then a random crop from a zero-padded copy."""
    img = sample.image.data
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    H, W = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    return Sample(Tensor(padded[dy:dy + H, dx:dx + W]), sample.label)


def batches(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None,
            dtype=np.float64) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        images, labels = as_arrays(chunk, dtype)
        yield Batch(Tensor(images, dtype=dtype), labels.tolist())
