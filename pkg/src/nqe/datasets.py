"""Bundled synthetic datasets for desk-scale runs, plus loaders for the
full-scale corpora (CIFAR-10 pickle batches, DIV2K-style image folders).

Images are carried as uint8 NCHW arrays. ``to_unit_float`` fixes the single
canonical real embedding m/256: every pixel is an exact dyadic, which the
integer inference path reproduces bit-for-bit with mantissa m at exponent -8.
"""

from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np


def to_unit_float(images: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 m/256 in [0, 255/256]."""
    return np.asarray(images, dtype=np.float64) / 256.0


def striped_textures(
    n: int, classes: int = 2, hw: int = 8, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Texture classification toy: class k carries stripes at angle k*pi/classes.

    Returns uint8 images (n, 3, hw, hw) and integer labels (n,).
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    images = np.empty((n, 3, hw, hw), dtype=np.uint8)
    labels = rng.integers(0, classes, size=n)
    for k in range(n):
        theta = np.pi * labels[k] / classes
        freq = rng.uniform(1.5, 2.5)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(
            2 * np.pi * freq * (np.cos(theta) * ii + np.sin(theta) * jj) / hw + phase
        )
        base = 0.5 + 0.35 * wave
        tint = rng.uniform(0.6, 1.0, size=(3, 1, 1))
        img = base[None] * tint + rng.normal(0, 0.03, size=(3, hw, hw))
        images[k] = np.clip(img * 256.0, 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def gradient_tiles(n: int, hw: int = 16, seed: int = 0) -> np.ndarray:
    """Codec toy: smooth two-color linear gradients with an occasional
    contrasting rectangle. Returns uint8 images (n, 3, hw, hw)."""
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    images = np.empty((n, 3, hw, hw), dtype=np.uint8)
    for k in range(n):
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * ii + np.sin(angle) * jj) / hw
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
        if rng.random() < 0.5:
            r0, c0_ = rng.integers(0, hw // 2, size=2)
            h, w = rng.integers(hw // 4, hw // 2, size=2)
            img[:, r0 : r0 + h, c0_ : c0_ + w] = rng.uniform(0.1, 0.9, size=(3, 1, 1))
        images[k] = np.clip(img * 256.0, 0, 255).astype(np.uint8)
    return images


def load_cifar10(root: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load the python-pickle CIFAR-10 batches from ``root``.

    Returns (train_images, train_labels, test_images, test_labels) with
    uint8 images in NCHW layout.
    """
    root = Path(root)

    def load_batch(name):
        with open(root / name, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        x = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        y = np.asarray(d[b"labels"], dtype=np.int64)
        return x, y

    parts = [load_batch(f"data_batch_{i}") for i in range(1, 6)]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = load_batch("test_batch")
    return train_x, train_y, test_x, test_y


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG/PPM/JPEG file as uint8 (3, H, W)."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).copy()


def write_image(image: np.ndarray, path: str | Path) -> None:
    """Write uint8 (3, H, W) to an image file; format follows the suffix."""
    from PIL import Image

    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected uint8 (3, H, W), got {image.dtype} {image.shape}")
    Image.fromarray(image.transpose(1, 2, 0)).save(path)


def load_image_folder(root: str | Path, crop_multiple: int = 32) -> list[np.ndarray]:
    """Load every PNG/JPEG under ``root`` as uint8 (3, H, W), center-cropped
    so both dimensions are divisible by ``crop_multiple``."""
    from PIL import Image

    root = Path(root)
    paths = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm")
    )
    if not paths:
        raise FileNotFoundError(f"no images under {root}")
    out = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
        h, w = arr.shape[:2]
        ch, cw = h - h % crop_multiple, w - w % crop_multiple
        if ch == 0 or cw == 0:
            raise ValueError(f"{p} smaller than one {crop_multiple}-pixel patch")
        r0, c0 = (h - ch) // 2, (w - cw) // 2
        out.append(arr[r0 : r0 + ch, c0 : c0 + cw].transpose(2, 0, 1).copy())
    return out
