"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine covers exactly the feed-forward chains used by the classifier
zoo: dense, valid-padding conv2d, relu, 2x2 max pooling, flatten, and a
softmax cross-entropy head. A :class:`Tape` records one forward chain and
can be replayed backward once, yielding the gradient of the loss with
respect to the chain's input image and (for training) with respect to the
layer parameters that took part in the pass.

All values are 64-bit floats. Tensors are immutable: every operation
returns a fresh tensor and never writes into its inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, TapeError


class Tensor:
    """Immutable dense array of 64-bit reals.

    Wraps a read-only, C-ordered float64 ndarray. Construction validates
    that every element is finite; operations in this module preserve that
    invariant. Tensors hash by identity, which lets a tape key parameter
    gradients by the exact parameter objects used in the forward pass.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def to_array(self) -> np.ndarray:
        """Writable copy of the underlying data."""
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def tensor(data) -> Tensor:
    """Shorthand constructor."""
    return Tensor(data)


def _fresh(arr: np.ndarray) -> Tensor:
    """Wrap a freshly computed float64 array without copying it."""
    t = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced NaN or Inf")
    arr.setflags(write=False)
    t.data = arr
    return t


class Tape:
    """Ordered record of one forward chain, replayable backward once.

    Each record is a closure mapping the cotangent of an op's output to
    the cotangent of its input; parameter cotangents are accumulated on
    the tape keyed by parameter tensor identity. A tape belongs to a
    single forward pass and supports exactly one backward pass.
    """

    def __init__(self):
        self._records: list[Callable[[np.ndarray], np.ndarray]] = []
        self._param_grads: dict[Tensor, np.ndarray] = {}
        self._loss = None
        self._consumed = False

    def record(self, back: Callable[[np.ndarray], np.ndarray]) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; build a new tape for a new forward pass")
        self._records.append(back)

    def accumulate_param_grad(self, param: Tensor, grad: np.ndarray) -> None:
        held = self._param_grads.get(param)
        if held is None:
            self._param_grads[param] = grad
        else:
            self._param_grads[param] = held + grad

    def param_grad(self, param: Tensor) -> Tensor:
        """Gradient of the loss w.r.t. a parameter tensor used in the pass."""
        try:
            return _fresh(self._param_grads[param])
        except KeyError:
            raise TapeError("parameter did not take part in this tape's backward pass") from None

    def backward(self, seed) -> np.ndarray:
        """Replay the tape in reverse, returning the input cotangent."""
        if self._consumed:
            raise TapeError("a tape supports exactly one backward pass")
        if not self._records:
            raise TapeError("tape is empty; run a forward pass first")
        self._consumed = True
        g = seed
        for back in reversed(self._records):
            g = back(g)
        return g


def _need_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a batch x features matrix, got shape {x.shape}")


def forward_dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a batch of row vectors.

    ``x`` is (batch, in), ``weight`` is (in, out), ``bias`` is (out,).
    """
    _need_2d(x, "dense")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias.data.ndim != 1 or bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"dense: bias shape {bias.shape} does not match weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data
    if tape is not None:
        def back(g):
            tape.accumulate_param_grad(weight, xd.T @ g)
            tape.accumulate_param_grad(bias, g.sum(axis=0))
            return g @ wd.T
        tape.record(back)
    return _fresh(out)


def forward_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                   tape: Tape | None = None) -> Tensor:
    """Valid-padding cross-correlation over a (batch, C, H, W) input.

    ``kernel`` is (out_ch, in_ch, k, k); output spatial dims are
    ``floor((H - k) / stride) + 1`` per side.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (batch, channels, H, W), got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (out, in, k, k), got shape {kernel.shape}")
    n, c, h, w = x.shape
    co, ci, k, _ = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} do not match kernel channels {ci}")
    if k > h or k > w:
        raise ShapeError(f"conv2d: kernel size {k} larger than input {h}x{w}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    xd, kd = x.data, kernel.data
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, oh, ow, k, k)
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(np.moveaxis(out, 3, 1)) + bias.data[None, :, None, None]
    oh, ow = out.shape[2], out.shape[3]
    if tape is not None:
        def back(g):
            tape.accumulate_param_grad(
                kernel, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
            tape.accumulate_param_grad(bias, g.sum(axis=(0, 2, 3)))
            dx = np.zeros_like(xd)
            for u in range(k):
                for v in range(k):
                    contrib = np.tensordot(g, kd[:, :, u, v], axes=([1], [0]))
                    dx[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                        np.moveaxis(contrib, 3, 1)
            return dx
        tape.record(back)
    return _fresh(out)


def forward_relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the backward pass is zero on the dead side."""
    xd = x.data
    out = np.maximum(xd, 0.0)
    if tape is not None:
        mask = xd > 0.0
        tape.record(lambda g: g * mask)
    return _fresh(out)


def forward_maxpool2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 stride-2 max pooling; spatial dims must be even.

    Gradient routes to the first maximum in each window (row-major tie
    break), so the backward map is a deterministic adjoint.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects (batch, channels, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    out = blocks.max(axis=-1)
    if tape is not None:
        idx = blocks.argmax(axis=-1)
        def back(g):
            z = np.zeros((n, c, h2, w2, 4))
            np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
            return z.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        tape.record(back)
    return _fresh(out)


def forward_flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Reshape (batch, ...) to (batch, features), row-major."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    if tape is not None:
        tape.record(lambda g: g.reshape(shape))
    return _fresh(out.copy())


def _as_logits_labels(logits: Tensor, labels):
    ld = logits.data
    if ld.ndim == 1:
        ld = ld[None, :]
    if ld.ndim != 2:
        raise ShapeError(f"cross entropy expects (batch, classes) logits, got shape {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.ndim != 1 or lab.shape[0] != ld.shape[0]:
        raise ShapeError(f"labels shape {lab.shape} does not match logits shape {ld.shape}")
    if np.any(lab < 0) or np.any(lab >= ld.shape[1]):
        raise IndexError(f"label out of range for {ld.shape[1]} classes")
    return ld, lab


def _stable_ce(ld: np.ndarray, lab: np.ndarray):
    m = ld.max(axis=1, keepdims=True)
    shifted = ld - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    losses = lse - ld[np.arange(ld.shape[0]), lab]
    probs = np.exp(shifted - (lse - m[:, 0])[:, None])
    return losses, probs


def softmax_cross_entropy(logits: Tensor, label, tape: Tape | None = None) -> float:
    """Mean cross-entropy of logits against integer labels.

    Computed as logsumexp(logits) - logits[label] with max-subtraction,
    so confident models cannot overflow. For a single logit row this is
    exactly the example's loss; for a batch it is the mean, and the
    backward pass propagates the mean's gradient.
    """
    ld, lab = _as_logits_labels(logits, label)
    losses, probs = _stable_ce(ld, lab)
    n = ld.shape[0]
    if tape is not None:
        onehot = np.zeros_like(ld)
        onehot[np.arange(n), lab] = 1.0
        dlogits = (probs - onehot) / n
        def back(seed):
            g = dlogits * seed
            if logits.data.ndim == 1:
                return g[0]
            return g
        tape.record(back)
        tape._loss = float(losses.mean())
    return float(losses.mean())


def per_example_cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> np.ndarray:
    """Cross-entropy per example, for batched attack crafting.

    Returns the (batch,) loss vector. The backward pass treats the loss
    as the per-example sum, so row ``i`` of the resulting input gradient
    is exactly example ``i``'s own gradient.
    """
    ld, lab = _as_logits_labels(logits, labels)
    losses, probs = _stable_ce(ld, lab)
    if tape is not None:
        onehot = np.zeros_like(ld)
        onehot[np.arange(ld.shape[0]), lab] = 1.0
        dlogits = probs - onehot
        tape.record(lambda seed: dlogits * seed)
        tape._loss = losses.copy()
    return losses


def input_gradient(tape: Tape, loss) -> Tensor:
    """Gradient of the recorded loss with respect to the chain's input.

    The tape must have produced ``loss``; model parameters are left
    untouched (their gradients are merely stored on the tape).
    """
    if tape._loss is None:
        raise TapeError("tape does not end in a loss; record a cross-entropy op first")
    if not np.array_equal(np.asarray(tape._loss), np.asarray(loss)):
        raise TapeError("loss value does not match the one this tape produced")
    return _fresh(np.asarray(tape.backward(1.0)))


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient of a black-box scalar loss.

    Evaluates ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate; the
    independent oracle used to check the tape's analytic gradients.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    flat = x.data.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (f(_fresh(plus.reshape(x.shape))) - f(_fresh(minus.reshape(x.shape)))) / (2.0 * h)
    return _fresh(grad.reshape(x.shape))
