"""Datasets: seeded synthetic shape images and the IDX file reader.

The synthetic-shapes generator is the guaranteed-available desk dataset:
four shape classes drawn at jittered positions and sizes, optionally
corrupted with Gaussian noise. IDX loading covers MNIST-format files as a
drop-in alternative.
"""

from __future__ import annotations

import struct

import numpy as np

from .seeding import mix_seed

__all__ = ["SHAPE_CLASSES", "gen_synthetic_shapes", "load_idx_images", "load_idx_labels", "load_mnist_idx"]

SHAPE_CLASSES = ("square", "disk", "cross", "triangle")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _draw_shape(kind, size, rng, fg, bg):
    img = np.full((size, size), bg, dtype=np.float64)
    jitter = size // 8
    cy = size // 2 + int(rng.integers(-jitter, jitter + 1))
    cx = size // 2 + int(rng.integers(-jitter, jitter + 1))
    a = int(rng.integers(size // 6, size // 4 + 1))  # half-extent
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        mask = (np.abs(dy) <= a) & (np.abs(dx) <= a)
    elif kind == "disk":
        mask = dy * dy + dx * dx <= a * a
    elif kind == "cross":
        wbar = max(1, a // 3)
        mask = ((np.abs(dy) <= wbar) & (np.abs(dx) <= a)) | ((np.abs(dx) <= wbar) & (np.abs(dy) <= a))
    elif kind == "triangle":
        # filled, apex up: width grows linearly from the apex row
        mask = (dy >= -a) & (dy <= a) & (np.abs(dx) <= (dy + a) / 2.0)
    else:
        raise ValueError(f"unknown shape class {kind!r}")
    img[mask] = fg
    return img


def gen_synthetic_shapes(n, classes=SHAPE_CLASSES, size=32, noise=0.0, seed=0, fg=1.0, bg=0.0):
    """Exactly class-balanced labelled shape images in [0,1].

    Returns (images [n,1,size,size] float64, labels [n] int64). Each sample
    is generated from its own sub-seed, so the dataset is reproducible and
    independent of generation order. `noise` is the std of additive
    Gaussian noise (clipped back to [0,1]).
    """
    classes = tuple(classes)
    if n % len(classes):
        raise ValueError(f"n={n} not divisible by {len(classes)} classes; cannot balance exactly")
    labels = np.asarray([k % len(classes) for k in range(n)], dtype=np.int64)
    order = np.random.default_rng(mix_seed(seed, 0xD5)).permutation(n)
    labels = labels[order]
    images = np.empty((n, 1, size, size), dtype=np.float64)
    for k in range(n):
        rng = np.random.default_rng(mix_seed(seed, k + 1))
        img = _draw_shape(classes[labels[k]], size, rng, fg, bg)
        if noise > 0:
            img = img + noise * rng.standard_normal(img.shape)
        images[k, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def _read_idx(path, expected_magic, what):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise ValueError(f"{what}: truncated IDX header in {path}")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise ValueError(f"{what}: bad IDX magic 0x{magic:08x} in {path} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{what}: truncated IDX dimension block in {path}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[header:]
    if len(payload) < count:
        raise ValueError(f"{what}: truncated IDX payload in {path}: need {count} bytes, have {len(payload)}")
    if len(payload) > count:
        raise ValueError(f"{what}: {len(payload) - count} trailing bytes in {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_images(path):
    """[N,1,H,W] float64 images in [0,1] from an IDX3 ubyte file."""
    raw = _read_idx(path, IDX_IMAGE_MAGIC, "images")
    return raw.astype(np.float64)[:, None] / 255.0


def load_idx_labels(path):
    raw = _read_idx(path, IDX_LABEL_MAGIC, "labels")
    return raw.astype(np.int64)


def load_mnist_idx(images_path, labels_path):
    """Paired IDX image/label files; errors if the counts disagree."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"IDX count mismatch: {len(images)} images vs {len(labels)} labels")
    return images, labels
