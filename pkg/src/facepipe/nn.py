"""Tensor operations and layer math, forward and backward.

Tensors are plain numpy arrays in N,C,H,W layout. ``float32`` is the
production precision and ``float64`` the verification precision used by the
gradient checks; every op preserves the dtype of its input.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

PRECISIONS = {"standard": np.float32, "verification": np.float64}


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


def as_tensor(values, precision="standard"):
    return np.ascontiguousarray(values, dtype=PRECISIONS[precision])


def out_extent(size, kernel, stride, padding=0):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class LrnParams:
    k: float = 2.0
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("LRN neighbourhood n must be >= 1")
        if self.k < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("LRN k, alpha and beta must be non-negative")
        if self.k == 0:
            # an all-zero neighbourhood would divide by zero
            raise ValueError("LRN requires k > 0")


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ValueError(f"invalid convolution parameters {self}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def output_hw(self, h, w):
        ho = out_extent(h, self.kernel_h, self.stride, self.padding)
        wo = out_extent(w, self.kernel_w, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"{self.kernel_h}x{self.kernel_w} kernel (stride {self.stride}, pad {self.padding})"
                f" does not fit a {h}x{w} input")
        return ho, wo


@dataclass
class GradientBundle:
    """Gradients keyed by layer index, as ``(d_weights, d_bias)`` pairs."""

    params: dict = field(default_factory=dict)
    input: np.ndarray = None


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be N,C,H,W; got shape {x.shape}")


def _im2col(x, params):
    p = params.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = params.stride
    win = sliding_window_view(x, (params.kernel_h, params.kernel_w), axis=(2, 3))[:, :, ::s, ::s]
    n = x.shape[0]
    ho, wo = win.shape[2], win.shape[3]
    # (N, Ho, Wo, C, kh, kw) -> rows are output positions
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    return cols, ho, wo


def conv2d(x, weights, bias, params, cache=None):
    """2-D convolution (cross-correlation) with zero padding.

    If ``cache`` is a dict the unfolded input is stored in it for the
    backward pass.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"conv expects {params.in_channels} input channels, got {c}")
    expected = (params.out_channels, params.in_channels, params.kernel_h, params.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"conv weights must be {expected}, got {weights.shape}")
    if bias.shape != (params.out_channels,):
        raise ShapeError(f"conv bias must have length {params.out_channels}, got {bias.shape}")
    params.output_hw(h, w)
    cols, ho, wo = _im2col(x, params)
    out = cols @ weights.reshape(params.out_channels, -1).T
    out += bias
    if cache is not None:
        cache["cols"] = cols
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, weights, params, cols=None):
    """Return ``(d_input, d_weights, d_bias)``."""
    n, c, h, w = x.shape
    oc = params.out_channels
    ho, wo = grad_out.shape[2:]
    if cols is None:
        cols, _, _ = _im2col(x, params)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, oc)
    d_w = (g.T @ cols).reshape(weights.shape)
    d_b = g.sum(axis=0)
    d_cols = (g @ weights.reshape(oc, -1)).reshape(n, ho, wo, c, params.kernel_h, params.kernel_w)
    p, s = params.padding, params.stride
    d_pad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(params.kernel_h):
        for j in range(params.kernel_w):
            d_pad[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    d_x = d_pad[:, :, p:p + h, p:p + w] if p else d_pad
    return np.ascontiguousarray(d_x), d_w, d_b


def maxpool2d(x, kernel, stride):
    """Max pooling. Returns ``(output, argmax)``; argmax holds the row-major
    offset of the winning element inside each window."""
    _check_4d(x)
    if kernel < 1 or stride < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise ShapeError(f"pool window {kernel} larger than input {x.shape[2]}x{x.shape[3]}")
    return kernels.maxpool_forward(np.ascontiguousarray(x), kernel, stride)


def maxpool2d_backward(grad_out, argmax, in_shape, kernel, stride):
    return kernels.maxpool_backward(np.ascontiguousarray(grad_out), argmax, in_shape, kernel, stride)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def lrn(x, p=LrnParams(), return_denominator=False):
    """Local response normalisation across channels.

    Each activation is divided by ``(k + alpha * S) ** beta`` where ``S`` is
    the sum of squares over the ``n // 2`` channels on either side, clamped to
    the valid channel range.
    """
    _check_4d(x)
    out, denom = kernels.lrn_forward(np.ascontiguousarray(x), p.k, p.n, p.alpha, p.beta)
    if return_denominator:
        return out, denom
    return out


def lrn_backward(grad_out, x, denom, p=LrnParams()):
    return kernels.lrn_backward(np.ascontiguousarray(x), denom, np.ascontiguousarray(grad_out),
                                p.k, p.n, p.alpha, p.beta)


def fully_connected(x, weights, bias):
    x2 = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or x2.shape[1] != weights.shape[0]:
        raise ShapeError(f"fully connected layer expects {weights.shape[0]} inputs,"
                         f" got {x2.shape[1]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias must have length {weights.shape[1]}, got {bias.shape}")
    return x2 @ weights + bias


def fully_connected_backward(grad_out, x, weights):
    x2 = x.reshape(x.shape[0], -1)
    return (grad_out @ weights.T).reshape(x.shape), x2.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probabilities, d_logits)``.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target index out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, targets].mean())
    grad = probs.copy()
    grad[rows, targets] -= 1
    grad /= n
    return loss, probs, grad


def sgd_update(params, grads, lr, momentum=0.0, velocity=None):
    """Momentum SGD in place: ``v = momentum * v - lr * g; w += v``.

    ``params`` maps layer index to a list ``[weights, bias]``; ``velocity``
    (same layout) is created on first use and updated in place.
    """
    if lr < 0 or not 0 <= momentum < 1:
        raise ValueError("need lr >= 0 and 0 <= momentum < 1")
    if velocity is None:
        velocity = {}
    grad_map = grads.params if isinstance(grads, GradientBundle) else grads
    for idx, tensors in params.items():
        if idx not in grad_map:
            continue
        vel = velocity.setdefault(idx, [np.zeros_like(t) for t in tensors])
        for t, g, v in zip(tensors, grad_map[idx], vel):
            if g.shape != t.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {t.shape}")
            v *= t.dtype.type(momentum)
            v -= t.dtype.type(lr) * g.astype(t.dtype, copy=False)
            t += v
    return params
