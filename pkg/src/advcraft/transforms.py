"""Loss-preserving input transformations and their exact adjoints.

Crop-and-pad, random resize-and-pad (diverse input), per-copy scaling and
the translation-invariant Gaussian kernel. Every transform is linear in
the image, and each ships with the exact transpose of its matrix so that
attack gradients can be chained back through the transform instead of
reusing the transformed-space gradient.

Randomized samplers draw exclusively from the generator handed to them;
the same stream state always yields the same parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ParameterError, ShapeError


@dataclass(frozen=True)
class CropPadParams:
    """Crop an rnd x rnd window and paste it into a zero canvas.

    ``(cy, cx)`` is where the window is read, ``(py, px)`` where it is
    written; ``side`` is the (square) image side length.
    """

    rnd: int
    cy: int
    cx: int
    py: int
    px: int
    side: int

    def __post_init__(self):
        h, r = self.side, self.rnd
        if not (0 < r <= h):
            raise ParameterError(f"crop size {r} invalid for side {h}")
        for name in ("cy", "cx", "py", "px"):
            v = getattr(self, name)
            if not (0 <= v <= h - r):
                raise ParameterError(f"offset {name}={v} outside [0, {h - r}]")

    @property
    def identity(self) -> bool:
        return self.rnd == self.side


@dataclass(frozen=True)
class DiverseInputParams:
    """Random resize-then-pad transform; identity when not applied."""

    applied: bool
    resized: int
    py: int
    px: int
    side: int

    def __post_init__(self):
        if self.applied:
            h, r = self.side, self.resized
            if not (0 < r <= h):
                raise ParameterError(f"resize target {r} invalid for side {h}")
            if not (0 <= self.py <= h - r and 0 <= self.px <= h - r):
                raise ParameterError(f"pad offset ({self.py},{self.px}) outside [0, {h - r}]")


@dataclass(frozen=True)
class ScaleFactor:
    """Multiplicative image scale in (0, 1]."""

    s: float

    def __post_init__(self):
        if not (0.0 < self.s <= 1.0):
            raise ParameterError(f"scale factor must be in (0, 1], got {self.s}")


@dataclass(frozen=True)
class TiKernel:
    """Normalized, symmetric smoothing kernel for gradient convolution."""

    size: int
    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.size, self.size) or self.size % 2 == 0:
            raise ParameterError(f"kernel must be odd square, got shape {w.shape}")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("kernel weights must sum to 1")
        if not (np.allclose(w, w[::-1, ::-1]) and np.allclose(w, w[::-1, :]) and np.allclose(w, w[:, ::-1])):
            raise ParameterError("kernel weights must be symmetric")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def sample_crop(rng: np.random.Generator, side: int, min_rnd: int) -> CropPadParams:
    """Draw crop size uniform on [min_rnd, side] and offsets on their valid ranges."""
    if min_rnd > side:
        raise ConfigError(f"min crop size {min_rnd} exceeds image side {side}")
    if min_rnd < 1:
        raise ConfigError(f"min crop size must be positive, got {min_rnd}")
    rnd = int(rng.integers(min_rnd, side + 1))
    cy = int(rng.integers(0, side - rnd + 1))
    cx = int(rng.integers(0, side - rnd + 1))
    py = int(rng.integers(0, side - rnd + 1))
    px = int(rng.integers(0, side - rnd + 1))
    return CropPadParams(rnd, cy, cx, py, px, side)


def _check_spatial(x: Tensor, side: int, op: str) -> None:
    if x.data.ndim < 2 or x.shape[-1] != side or x.shape[-2] != side:
        raise ShapeError(f"{op}: expected trailing spatial dims {side}x{side}, got shape {x.shape}")


def _crop_pad_arr(a: np.ndarray, prm: CropPadParams) -> np.ndarray:
    if prm.identity:
        return a
    out = np.zeros_like(a)
    r = prm.rnd
    out[..., prm.py:prm.py + r, prm.px:prm.px + r] = \
        a[..., prm.cy:prm.cy + r, prm.cx:prm.cx + r]
    return out


def _crop_pad_adjoint_arr(a: np.ndarray, prm: CropPadParams) -> np.ndarray:
    if prm.identity:
        return a
    out = np.zeros_like(a)
    r = prm.rnd
    out[..., prm.cy:prm.cy + r, prm.cx:prm.cx + r] = \
        a[..., prm.py:prm.py + r, prm.px:prm.px + r]
    return out


def apply_crop_pad(x: Tensor, prm: CropPadParams) -> Tensor:
    """Copy the crop window to the pad offset on a zero canvas; linear in x."""
    _check_spatial(x, prm.side, "apply_crop_pad")
    if prm.identity:
        return x
    return ad._fresh(_crop_pad_arr(x.data, prm))


def adjoint_crop_pad(g: Tensor, prm: CropPadParams) -> Tensor:
    """Exact transpose of apply_crop_pad: read at the pad offset, write at the crop offset."""
    _check_spatial(g, prm.side, "adjoint_crop_pad")
    if prm.identity:
        return g
    return ad._fresh(_crop_pad_adjoint_arr(g.data, prm))


_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(out_side: int, in_side: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation matrix, rows = output pixels."""
    key = (out_side, in_side)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((out_side, in_side))
    if out_side == 1:
        m[0, 0] = 1.0
    else:
        pos = np.arange(out_side) * ((in_side - 1) / (out_side - 1))
        lo = np.floor(pos).astype(int)
        lo = np.minimum(lo, in_side - 1)
        hi = np.minimum(lo + 1, in_side - 1)
        frac = pos - lo
        for i in range(out_side):
            m[i, lo[i]] += 1.0 - frac[i]
            m[i, hi[i]] += frac[i]
    m.setflags(write=False)
    _RESIZE_CACHE[key] = m
    return m


def sample_diverse_input(rng: np.random.Generator, side: int, p: float) -> DiverseInputParams:
    """With probability p, draw a resize target in [round(0.9 side), side] and a pad offset."""
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"transform probability must be in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        low = max(1, int(round(0.9 * side)))
        r = int(rng.integers(low, side + 1))
        py = int(rng.integers(0, side - r + 1))
        px = int(rng.integers(0, side - r + 1))
        return DiverseInputParams(True, r, py, px, side)
    return DiverseInputParams(False, side, 0, 0, side)


def apply_diverse_input(x: Tensor, p: float, rng: np.random.Generator):
    """Draw diverse-input parameters and apply them; returns (image, params)."""
    prm = sample_diverse_input(rng, x.shape[-1], p)
    return apply_diverse_input_params(x, prm), prm


def _diverse_input_arr(a: np.ndarray, prm: DiverseInputParams) -> np.ndarray:
    if not prm.applied:
        return a
    m = _resize_matrix(prm.resized, prm.side)
    small = np.matmul(np.matmul(m, a), m.T)
    out = np.zeros_like(a)
    out[..., prm.py:prm.py + prm.resized, prm.px:prm.px + prm.resized] = small
    return out


def _diverse_input_adjoint_arr(a: np.ndarray, prm: DiverseInputParams) -> np.ndarray:
    if not prm.applied:
        return a
    m = _resize_matrix(prm.resized, prm.side)
    window = a[..., prm.py:prm.py + prm.resized, prm.px:prm.px + prm.resized]
    return np.matmul(np.matmul(m.T, window), m)


def apply_diverse_input_params(x: Tensor, prm: DiverseInputParams) -> Tensor:
    """Bilinear shrink to r x r, then zero-pad back at the drawn offset."""
    _check_spatial(x, prm.side, "apply_diverse_input")
    if not prm.applied:
        return x
    return ad._fresh(_diverse_input_arr(x.data, prm))


def adjoint_diverse_input(g: Tensor, prm: DiverseInputParams) -> Tensor:
    """Exact transpose of the resize-and-pad map."""
    _check_spatial(g, prm.side, "adjoint_diverse_input")
    if not prm.applied:
        return g
    return ad._fresh(_diverse_input_adjoint_arr(g.data, prm))


def apply_scale(x: Tensor, s) -> Tensor:
    """Elementwise s * x; self-adjoint up to the same factor."""
    factor = s.s if isinstance(s, ScaleFactor) else ScaleFactor(float(s)).s
    if factor == 1.0:
        return x
    return ad._fresh(x.data * factor)


def halving_scale(copy_index: int) -> float:
    """Deterministic per-copy scale 1 / 2**i used by scale-copy attacks."""
    return 1.0 / (2.0 ** copy_index)


def gaussian_kernel(size: int, sigma: float) -> TiKernel:
    """Normalized isotropic Gaussian, center-maximal, k odd."""
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    c = (size - 1) / 2.0
    ax = np.arange(size) - c
    sq = ax[:, None] ** 2 + ax[None, :] ** 2
    w = np.exp(-sq / (2.0 * sigma * sigma))
    w /= w.sum()
    return TiKernel(size, sigma, w)


def convolve_gradient(g: Tensor, kernel: TiKernel) -> Tensor:
    """Same-size per-channel convolution with zero boundary extension.

    The kernel is symmetric under 180-degree rotation, so correlation and
    convolution coincide; a size-1 kernel is the exact identity.
    """
    gd = g.data
    k = kernel.size
    if gd.ndim < 2 or gd.shape[-1] < k or gd.shape[-2] < k:
        raise ShapeError(f"convolve_gradient: spatial dims of {g.shape} smaller than kernel {k}")
    if k == 1:
        return ad._fresh(gd * kernel.weights[0, 0])
    r = k // 2
    pad = [(0, 0)] * (gd.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(gd, pad)
    win = sliding_window_view(padded, (k, k), axis=(gd.ndim - 2, gd.ndim - 1))
    return ad._fresh(np.einsum("...ij,ij->...", win, kernel.weights))


def crop_invariance_loss_curve(model, data, widths, *, seed: int = 0):
    """Mean loss and accuracy after cropping ``width`` border pixels and re-padding.

    For width w every image is cropped to (H-w) x (H-w) at a random
    offset and pasted back at a random offset; width 0 reproduces the
    clean statistics exactly. Returns [(width, mean_loss, mean_accuracy)].
    """
    from . import models as mdl  # local import to keep module load order simple

    h = data.geometry[-1]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    rows = []
    for width in widths:
        if width > h:
            raise ConfigError(f"crop width {width} exceeds image side {h}")
        if width == 0:
            batch = data.images
        else:
            rnd = h - width
            batch = np.empty_like(data.images)
            for i in range(data.images.shape[0]):
                prm = CropPadParams(
                    rnd,
                    int(rng.integers(0, width + 1)), int(rng.integers(0, width + 1)),
                    int(rng.integers(0, width + 1)), int(rng.integers(0, width + 1)),
                    h)
                batch[i] = apply_crop_pad(Tensor(data.images[i]), prm).data
        losses = []
        correct = 0
        for start in range(0, batch.shape[0], 512):
            chunk = batch[start:start + 512]
            labels = data.labels[start:start + 512]
            logits = mdl.forward_logits(model, Tensor(chunk))
            losses.append(ad.per_example_cross_entropy(logits, labels))
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        rows.append((int(width), float(np.concatenate(losses).mean()),
                     correct / batch.shape[0]))
    return rows


def curve_to_csv(rows) -> str:
    """CSV for a crop-invariance curve: header width,mean_loss,mean_accuracy."""
    lines = ["width,mean_loss,mean_accuracy"]
    for width, loss, acc in rows:
        lines.append(f"{width},{loss!r},{acc!r}")
    return "\n".join(lines) + "\n"
