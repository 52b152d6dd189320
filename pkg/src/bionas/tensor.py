"""Deterministic numpy tensor primitives with explicit input/weight gradients.

Tensors are plain ``numpy.ndarray`` values. Every primitive checks its output
for NaN/Inf and raises :class:`NumericalError` instead of propagating them.
Convolutions and pools are written as a fixed loop over kernel offsets, so the
summation order is the same on every call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float64


class NumericalError(FloatingPointError):
    """Raised when a primitive produces a non-finite value."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite value produced by {where}")
    return x


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by PCG64 seeded through ``SeedSequence`` so that the sequence is
    identical across platforms. Child streams are derived with :meth:`child`
    and are independent of the parent's draw position.
    """

    def __init__(self, seed: int, stream_id: int | tuple = 0):
        self.seed = int(seed)
        self.key = tuple(stream_id) if isinstance(stream_id, tuple) else (int(stream_id),)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def stream_id(self) -> tuple:
        return self.key

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(i) for i in ids))

    # thin passthroughs; all draws go through the Generator
    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


@dataclass(frozen=True)
class ActivationRecord:
    """Values cached by a forward pass for the explicit backward.

    ``layer_input`` is what the layer consumed; ``pre_activation`` is the
    pre-nonlinearity value that produced that input, and
    ``activation_derivative`` is phi' evaluated there. For a layer fed by raw
    data both are None and the derivative is taken as 1.
    """

    layer_input: np.ndarray
    pre_activation: np.ndarray | None = None
    activation_derivative: np.ndarray | None = None


# --------------------------------------------------------------------------
# dense


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def relu_forward(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    deriv = (z > 0).astype(z.dtype)
    return z * deriv, deriv


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels, label_smoothing: float = 0.0):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    With ``label_smoothing`` s the target is ``(1-s)*onehot + s/C``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    target = np.full((n, c), label_smoothing / c, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    logp = log_softmax(logits)
    loss = float(-(target * logp).sum() / n)
    err = (np.exp(logp) - target) / n
    check_finite(err, "softmax_cross_entropy")
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, err


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _span(out: int, stride: int) -> int:
    return stride * (out - 1) + 1


def _check_conv(x_shape, w_shape, stride, padding, dilation, groups):
    n, cin, h, wd = x_shape
    cout, cin_g, k, k2 = w_shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != cin_g * groups or cout % groups:
        raise ValueError(f"channel mismatch: x {tuple(x_shape)}, w {tuple(w_shape)}, groups={groups}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("invalid stride/padding/dilation")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(wd, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive conv output size {ho}x{wo}")
    return ho, wo


def _pad(x, padding):
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _offsets(k, dilation):
    return [(i, j, i * dilation, j * dilation) for i in range(k) for j in range(k)]


def _is_depthwise(x_shape, w_shape, groups):
    return groups > 1 and groups == x_shape[1] == w_shape[0]


def _im2col(xp, k, ho, wo, stride, dilation, groups):
    """Columns [G, Cin/G*k*k, N*Ho*Wo], rows ordered (channel, ki, kj)."""
    n, cin = xp.shape[:2]
    sh, sw = _span(ho, stride), _span(wo, stride)
    cols = np.empty((cin, k, k, n, ho, wo), dtype=xp.dtype)
    for i, j, di, dj in _offsets(k, dilation):
        cols[:, i, j] = xp[:, :, di:di + sh:stride, dj:dj + sw:stride].transpose(1, 0, 2, 3)
    return cols.reshape(groups, (cin // groups) * k * k, n * ho * wo)


def conv2d(x, w, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1):
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``w`` [Cout,Cin/groups,k,k].

    Depthwise kernels accumulate over kernel offsets in row-major order; other
    kernels are one im2col matrix product per group.
    """
    ho, wo = _check_conv(x.shape, w.shape, stride, padding, dilation, groups)
    n, cin = x.shape[:2]
    cout, cin_g, k, _ = w.shape
    xp = _pad(x, padding)
    if _is_depthwise(x.shape, w.shape, groups):
        sh, sw = _span(ho, stride), _span(wo, stride)
        out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, w))
        for i, j, di, dj in _offsets(k, dilation):
            out += w[:, 0, i, j].reshape(1, -1, 1, 1) * xp[:, :, di:di + sh:stride, dj:dj + sw:stride]
        return check_finite(out, "conv2d")
    cols = _im2col(xp, k, ho, wo, stride, dilation, groups)
    wm = w.reshape(groups, cout // groups, cin_g * k * k)
    out = np.matmul(wm, cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return check_finite(np.ascontiguousarray(out), "conv2d")


def conv2d_input_grad(g, w, x_shape, stride=1, padding=0, dilation=1, groups=1):
    """Gradient of conv2d w.r.t. its input, given the upstream gradient ``g``.

    ``w`` is whatever matrix carries the error backward: the forward kernel
    for backprop, a feedback kernel for the alignment rules.
    """
    n, cin, h, wd = x_shape
    cout, cin_g, k, _ = w.shape
    _, _, ho, wo = g.shape
    sh, sw = _span(ho, stride), _span(wo, stride)
    gx = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(g, w))
    if _is_depthwise(x_shape, w.shape, groups):
        for i, j, di, dj in _offsets(k, dilation):
            gx[:, :, di:di + sh:stride, dj:dj + sw:stride] += w[:, 0, i, j].reshape(1, -1, 1, 1) * g
    else:
        gm = g.transpose(1, 0, 2, 3).reshape(groups, cout // groups, n * ho * wo)
        wm = w.reshape(groups, cout // groups, cin_g * k * k)
        cols = np.matmul(wm.transpose(0, 2, 1), gm).reshape(cin, k, k, n, ho, wo)
        for i, j, di, dj in _offsets(k, dilation):
            gx[:, :, di:di + sh:stride, dj:dj + sw:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return check_finite(np.ascontiguousarray(gx), "conv2d_input_grad")


def conv2d_weight_grad(x, g, w_shape, stride=1, padding=0, dilation=1, groups=1):
    """Correlation of the input with the incoming error: dL/dw."""
    n, cin = x.shape[:2]
    cout, cin_g, k, _ = w_shape
    _, _, ho, wo = g.shape
    xp = _pad(x, padding)
    if _is_depthwise(x.shape, w_shape, groups):
        sh, sw = _span(ho, stride), _span(wo, stride)
        gw = np.zeros(w_shape, dtype=np.result_type(x, g))
        for i, j, di, dj in _offsets(k, dilation):
            gw[:, 0, i, j] = (g * xp[:, :, di:di + sh:stride, dj:dj + sw:stride]).sum(axis=(0, 2, 3))
        return check_finite(gw, "conv2d_weight_grad")
    cols = _im2col(xp, k, ho, wo, stride, dilation, groups)
    gm = g.transpose(1, 0, 2, 3).reshape(groups, cout // groups, n * ho * wo)
    gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w_shape)
    return check_finite(gw, "conv2d_weight_grad")


def unfold(x, k, stride=1, padding=0, dilation=1):
    """Patches of ``x`` as [N, Ho, Wo, Cin, k, k]."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


# --------------------------------------------------------------------------
# pooling


def _pool_windows(x, k, stride, padding, fill):
    if stride < 1:
        raise ValueError(f"invalid pool stride {stride}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError("pool window does not fit")
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def pool2d(x, kind: str, k: int = 3, stride: int = 1, padding: int = 1):
    """3x3 max/avg pooling with padding 1.

    Average pooling divides by the full window area, padded zeros included.
    Max pooling pads with -inf so padding never wins the max.
    """
    if kind == "avg":
        win = _pool_windows(x, k, stride, padding, 0.0)
        out = win.sum(axis=(-2, -1)) / (k * k)
    elif kind == "max":
        win = _pool_windows(x, k, stride, padding, -np.inf)
        out = win.max(axis=(-2, -1))
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return check_finite(np.ascontiguousarray(out), f"{kind}_pool2d")


def pool2d_input_grad(g, x, kind: str, k: int = 3, stride: int = 1, padding: int = 1):
    n, c, h, w = x.shape
    _, _, ho, wo = g.shape
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    sh, sw = _span(ho, stride), _span(wo, stride)
    if kind == "avg":
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + sh:stride, j:j + sw:stride] += share
    elif kind == "max":
        win = _pool_windows(x, k, stride, padding, -np.inf)
        arg = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)  # first max in scan order
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + sh:stride, j:j + sw:stride] += np.where(arg == i * k + j, g, 0.0)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx)
