"""Dataset ingestion and generation.

Two sources: IDX image/label file pairs (the MNIST binary format), and a
deterministic synthetic generator that builds class-prototype images with
per-example noise and optional translation jitter. Pixel values live in
[0, 1] throughout.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import (
    ConfigError,
    IdxCountError,
    IdxMagicError,
    IdxTruncatedError,
    SelectionError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Immutable array-backed dataset: images (N, C, H, W) in [0, 1], int labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def geometry(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.classes)


@dataclass(frozen=True)
class LabeledExample:
    """One image with its ground-truth label."""

    image: Tensor
    label: int


def _read_all(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label pair, scaling pixels to [0, 1]."""
    raw = _read_all(images_path)
    if len(raw) < 16:
        raise IdxTruncatedError(f"{images_path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(
            f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    need = count * rows * cols
    if len(raw) - 16 < need:
        raise IdxTruncatedError(
            f"{images_path}: payload holds {len(raw) - 16} bytes, header declares {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)

    lraw = _read_all(labels_path)
    if len(lraw) < 8:
        raise IdxTruncatedError(f"{labels_path}: too short for an IDX label header")
    lmagic, lcount = struct.unpack(">II", lraw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxMagicError(
            f"{labels_path}: magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if lcount != count:
        raise IdxCountError(f"{count} images but {lcount} labels")
    if len(lraw) - 8 < lcount:
        raise IdxTruncatedError(
            f"{labels_path}: payload holds {len(lraw) - 8} bytes, header declares {lcount}")
    labels = np.frombuffer(lraw, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)

    images = (pixels.astype(np.float64) / 255.0).reshape(count, 1, rows, cols)
    classes = int(labels.max()) + 1 if count else 0
    return Dataset(images, labels, classes)


def save_idx(data: Dataset, images_path, labels_path) -> None:
    """Write a dataset back out as an IDX pair (8-bit quantized)."""
    n, c, h, w = data.images.shape
    if c != 1:
        raise ConfigError("IDX export supports single-channel images only")
    pixels = np.round(np.clip(data.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


def _smooth_field(rng: np.random.Generator, channels: int, side: int, grid: int) -> np.ndarray:
    """Coarse Gaussian grid upsampled bilinearly to side x side, unit max-abs."""
    from .transforms import _resize_matrix

    coarse = rng.normal(size=(channels, grid, grid))
    m = _resize_matrix(side, grid)
    field = np.matmul(np.matmul(m, coarse), m.T)
    return field / np.abs(field).max()


def synth_dataset(classes: int, per_class: int, geometry=(1, 28, 28), seed: int = 0, *,
                  noise: float = 0.1, jitter: int = 0, class_sep: float = 0.5,
                  texture: float = 0.0, sample_seed: int | None = None) -> Dataset:
    """Deterministic Gaussian-blob classes, linearly separable at low noise.

    Each class owns a smooth prototype blob concentrated in the image
    center (a raised-cosine window zeroes the borders, which is what
    makes small crops loss-preserving). ``class_sep`` scales the smooth
    between-class differences, ``texture`` adds a weak full-resolution
    class-coded pattern, ``noise`` is per-pixel Gaussian, and ``jitter``
    translates each example by up to that many pixels.

    ``seed`` fixes the class prototypes (the task); ``sample_seed`` draws
    the per-example noise and jitter, so train/held-out splits of the
    same task use the same ``seed`` with different ``sample_seed``.
    """
    c, h, w = geometry
    if h != w:
        raise ConfigError(f"synthetic images must be square, got {h}x{w}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    ax = np.arange(h) / (h - 1)
    window = (0.5 - 0.5 * np.cos(2 * np.pi * ax))[:, None] * \
             (0.5 - 0.5 * np.cos(2 * np.pi * ax))[None, :]
    base = _smooth_field(rng, c, h, 4)
    prototypes = np.empty((classes, c, h, w))
    for k in range(classes):
        delta = _smooth_field(rng, c, h, 7)
        proto = 0.5 + window * (0.25 * base + class_sep * delta)
        if texture > 0.0:
            tex = rng.normal(size=(c, h, w))
            proto = proto + window * texture * (tex / np.abs(tex).max())
        prototypes[k] = proto
    draw = rng if sample_seed is None else \
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(sample_seed)))
    images = np.empty((classes * per_class, c, h, w))
    labels = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for k in range(classes):
        for _ in range(per_class):
            img = prototypes[k]
            if jitter > 0:
                dy = int(draw.integers(-jitter, jitter + 1))
                dx = int(draw.integers(-jitter, jitter + 1))
                img = np.roll(img, (dy, dx), axis=(-2, -1))
            if noise > 0.0:
                img = img + draw.normal(scale=noise, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    return Dataset(images, labels, classes)


def select_correctly_classified(models, data: Dataset, n: int, seed: int = 0) -> list:
    """First n examples, in seeded shuffled order, that every model classifies correctly."""
    from .models import forward_logits

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(len(data))
    ok = np.ones(len(data), dtype=bool)
    for model in models:
        for start in range(0, len(data), 512):
            logits = forward_logits(model, Tensor(data.images[start:start + 512]))
            ok[start:start + 512] &= \
                logits.data.argmax(axis=1) == data.labels[start:start + 512]
    chosen = [int(i) for i in order if ok[i]][:n]
    if len(chosen) < n:
        raise SelectionError(
            f"requested {n} correctly classified examples but only {len(chosen)} qualify")
    return [LabeledExample(Tensor(data.images[i]), int(data.labels[i])) for i in chosen]


def stack_examples(examples) -> tuple[np.ndarray, np.ndarray]:
    """(images, labels) arrays from a list of LabeledExample."""
    images = np.stack([e.image.data for e in examples])
    labels = np.asarray([e.label for e in examples], dtype=np.int64)
    return images, labels


def write_ppm(image: Tensor, path) -> None:
    """Dump one image as binary NetPBM P6 (8-bit); grayscale is replicated to RGB."""
    arr = image.data
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ConfigError(f"PPM dump expects (1|3, H, W), got shape {image.shape}")
    rgb = np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr
    quantized = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())
