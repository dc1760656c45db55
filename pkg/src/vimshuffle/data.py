"""Datasets: CIFAR-style binary records and a seeded synthetic generator.

Record layout is 3073 bytes: one label byte (0-9) followed by 32x32x3 planar
RGB, row-major. The synthetic set draws 10 classes of textured shapes; every
image is generated from its own (seed, index) stream, so generation order and
worker count never change the pixels.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng

IMAGE_SIDE = 32
RECORD_BYTES = 1 + IMAGE_SIDE * IMAGE_SIDE * 3
NUM_CLASSES = 10


class DatasetFormatError(ValueError):
    pass


def worker_count(serial: bool = False) -> int:
    """Worker cap from SLWS_THREADS; strict-serial mode forces 1."""
    if serial:
        return 1
    raw = os.environ.get("SLWS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SLWS_THREADS must be an integer, got {raw!r}")
    return max(1, min(n, os.cpu_count() or 1))


# -- binary record format ------------------------------------------------------


def read_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Load (images uint8 [N,32,32,3], labels int64 [N]) from a record file."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        n_full = len(raw) // RECORD_BYTES
        raise DatasetFormatError(
            f"{path}: expected a multiple of {RECORD_BYTES} bytes, got {len(raw)} "
            f"({n_full} full records plus {len(raw) - n_full * RECORD_BYTES} stray bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DatasetFormatError(
            f"{path}: record {bad} has label byte {labels[bad]}, expected 0..{NUM_CLASSES - 1}")
    images = arr[:, 1:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    rec = np.concatenate([labels[:, None], planar], axis=1)
    Path(path).write_bytes(rec.tobytes())


# -- synthetic textured shapes -------------------------------------------------

_GRID = np.linspace(-1.0, 1.0, IMAGE_SIDE)
_YY, _XX = np.meshgrid(_GRID, _GRID, indexing="ij")


def _shape_mask(shape_id: int, gen: np.random.Generator) -> np.ndarray:
    cx, cy = gen.uniform(-0.25, 0.25, size=2)
    size = gen.uniform(0.45, 0.75)
    theta = gen.uniform(0.0, 2.0 * np.pi)
    xr = np.cos(theta) * (_XX - cx) + np.sin(theta) * (_YY - cy)
    yr = -np.sin(theta) * (_XX - cx) + np.cos(theta) * (_YY - cy)
    if shape_id == 0:  # disk
        return xr * xr + yr * yr <= size * size
    if shape_id == 1:  # square
        return np.maximum(np.abs(xr), np.abs(yr)) <= 0.8 * size
    if shape_id == 2:  # triangle
        return (yr >= -0.55 * size) & (yr <= size - 2.2 * np.abs(xr))
    if shape_id == 3:  # ring
        r2 = xr * xr + yr * yr
        return (r2 <= size * size) & (r2 >= (0.55 * size) ** 2)
    # cross
    arm = 0.3 * size
    inside = np.maximum(np.abs(xr), np.abs(yr)) <= size
    return inside & ((np.abs(xr) <= arm) | (np.abs(yr) <= arm))


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _render(label: int, gen: np.random.Generator) -> np.ndarray:
    """One textured shape; class = hue family x stripe-frequency band.

    The shape itself (and its pose) is a class-irrelevant nuisance, so the
    label is recoverable from order-robust token statistics while precise
    token positions mostly carry noise. Heavy pixel noise keeps a 5k training
    subset in the overfitting regime.
    """
    mask = _shape_mask(int(gen.integers(0, 5)), gen)
    hue = ((label % 5) / 5.0 + gen.uniform(-0.055, 0.055)) % 1.0
    fg = _hsv_to_rgb(hue, gen.uniform(0.6, 0.95), gen.uniform(0.6, 0.95)) * 255.0
    bg = _hsv_to_rgb(gen.random(), gen.uniform(0.0, 0.35), gen.uniform(0.08, 0.45)) * 255.0
    img = np.broadcast_to(bg, (IMAGE_SIDE, IMAGE_SIDE, 3)).copy()
    fg_field = np.broadcast_to(fg, (IMAGE_SIDE, IMAGE_SIDE, 3)).copy()
    freq = gen.uniform(2.5, 5.5) if label < 5 else gen.uniform(9.0, 15.0)
    phi = gen.uniform(0.0, np.pi)
    shift = gen.uniform(0.0, 2.0 * np.pi)
    stripes = np.sin(freq * (_XX * np.cos(phi) + _YY * np.sin(phi)) + shift) > 0
    fg_field[stripes] *= gen.uniform(0.35, 0.55)
    img[mask] = fg_field[mask]
    img += gen.normal(0.0, 30.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def synthesize(n: int, seed: int, offset: int = 0,
               serial: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic textured-shape images; index i uses stream (seed, offset+i)."""
    images = np.empty((n, IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.uint8)
    labels = np.array([(offset + i) % NUM_CLASSES for i in range(n)], dtype=np.int64)

    def fill(i: int) -> None:
        gen = rng.stream(seed, rng.TAG_SYNTH, offset + i, 0).gen
        images[i] = _render(int(labels[i]), gen)

    workers = worker_count(serial)
    if workers > 1 and n > 64:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for i in range(n):
            fill(i)
    return images, labels


# -- dataset wrapper -----------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, 32, 32, 3]
    labels: np.ndarray  # int64 [N]

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        for img, lab in zip(self.images, self.labels):
            yield img, int(lab)

    def to_float(self, idx) -> np.ndarray:
        return self.images[idx].astype(np.float32) / 127.5 - 1.0

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0,
                shuffle: bool = False, augment: bool = False, drop_last: bool = False):
        """Yield (images float32 [B,32,32,3], labels) minibatches.

        Order and augmentation draws are fully determined by (seed, epoch).
        """
        n = len(self)
        order = np.arange(n)
        if shuffle:
            order = rng.stream(seed, rng.TAG_DATA_ORDER, epoch, 0).gen.permutation(n)
        aug_gen = rng.stream(seed, rng.TAG_AUGMENT, epoch, 0).gen if augment else None
        stop = (n // batch_size) * batch_size if drop_last else n
        for lo in range(0, stop, batch_size):
            idx = order[lo:lo + batch_size]
            x = self.to_float(idx)
            if aug_gen is not None:
                x = _augment_crop_flip(x, aug_gen)
            yield x, self.labels[idx]


def _augment_crop_flip(x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Random crop from 4-pixel zero padding plus horizontal flip."""
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 8, w + 8, c), dtype=x.dtype)
    padded[:, 4:4 + h, 4:4 + w] = x
    dy = gen.integers(0, 9, size=b)
    dx = gen.integers(0, 9, size=b)
    flips = gen.random(b) < 0.5
    out = np.empty_like(x)
    for i in range(b):
        crop = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def load_dataset(source: str, n: int | None = None, seed: int = 0, offset: int = 0,
                 serial: bool = False) -> Dataset:
    """Build a Dataset from a record file path or the "synthetic" spec."""
    if source == "synthetic":
        if n is None:
            raise ValueError("synthetic datasets need an explicit sample count")
        images, labels = synthesize(n, seed, offset=offset, serial=serial)
        return Dataset(images=images, labels=labels)
    images, labels = read_records(source)
    if n is not None:
        images, labels = images[offset:offset + n], labels[offset:offset + n]
    return Dataset(images=images, labels=labels)
