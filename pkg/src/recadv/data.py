"""MNIST ingestion, batching, and 8-bit quantization helpers.

Images are kept as float32 tensors in [0, 1] with shape [N, 1, 28, 28];
labels are int64. The loader reads the original IDX binary format
(big-endian dimensions, magic 2051 for images / 2049 for labels), plain
or gzip-compressed.
"""

import gzip
import os
import struct
import warnings

import numpy as np
import torch

from .errors import ShapeError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class Dataset:
    """In-memory image dataset: float32 pixels in [0,1] plus integer labels."""

    def __init__(self, images, labels):
        images = torch.as_tensor(images, dtype=torch.float32)
        labels = torch.as_tensor(labels, dtype=torch.int64)
        if images.ndim != 4:
            raise ShapeError(f"expected rank-4 image array, got shape {tuple(images.shape)}")
        if images.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
            )
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n_or_indices):
        """First-n or fancy-indexed view as a new Dataset."""
        if isinstance(n_or_indices, int):
            return Dataset(self.images[:n_or_indices], self.labels[:n_or_indices])
        idx = torch.as_tensor(n_or_indices, dtype=torch.int64)
        return Dataset(self.images[idx], self.labels[idx])


def _read_idx(path, expected_magic):
    """Read one IDX file (optionally .gz) into a numpy uint8 array."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IOError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise IOError(f"{path}: bad magic {magic}, expected {expected_magic}")
    ndim = magic % 256
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IOError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise IOError(f"{path}: expected {count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _resolve(root, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(root, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {name}[.gz] under {root}")


def load_mnist(root, split="train"):
    """Load an MNIST split from IDX files under ``root``.

    Pixel bytes are scaled by 1/255; images come out as [N, 1, 28, 28].
    Raises IOError on bad magic numbers, truncation, or an image/label
    count mismatch.
    """
    if split not in _SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}, expected 'train' or 'test'")
    img_name, lbl_name = _SPLIT_FILES[split]
    images = _read_idx(_resolve(root, img_name), IMAGE_MAGIC)
    labels = _read_idx(_resolve(root, lbl_name), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IOError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    pixels = images.astype(np.float32)[:, None, :, :] / 255.0
    return Dataset(pixels, labels.astype(np.int64))


def batches(dataset, batch_size, seed=0, shuffle=True):
    """Yield (images, labels) batches in a seed-deterministic order.

    The final partial batch is retained. With shuffle=False the file
    order is preserved.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
        order = torch.from_numpy(order)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def quantize_8bit(x):
    """Map [0,1] floats to uint8 levels, rounding half away from zero.

    Out-of-range inputs are clamped with a warning.
    """
    x = torch.as_tensor(x)
    if bool((x < 0).any()) or bool((x > 1).any()):
        warnings.warn("quantize_8bit: input outside [0,1], clamping")
        x = x.clamp(0.0, 1.0)
    return torch.floor(x.to(torch.float32) * 255.0 + 0.5).clamp(0, 255).to(torch.uint8)


def dequantize_8bit(q):
    """Map uint8 levels back to [0,1] float32."""
    return torch.as_tensor(q).to(torch.float32) / 255.0


def materialize_8bit(x):
    """Round-trip through the 8-bit representation images are stored in."""
    return dequantize_8bit(quantize_8bit(x))
