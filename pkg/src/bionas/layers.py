"""Layers with cached forward state and rule-aware explicit backward.

A :class:`Module` exposes ``forward(x)`` and ``backward(g) -> g_in``. Weight
layers store the pseudo-gradient (dL/dW for backprop, the rule's surrogate
otherwise) in ``Param.grad``; the trainer turns those into SGD steps.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import rules
from .rules import FeedbackRule, FeedbackState, xavier_uniform
from .tensor import (
    RngStream,
    as_tensor,
    check_finite,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    default_dtype,
    pool2d,
    pool2d_input_grad,
    relu_forward,
)


class Param:
    __slots__ = ("value", "grad", "rule", "trainable")

    def __init__(self, value: np.ndarray, rule=FeedbackRule.BP, trainable: bool = True):
        self.value = value
        self.grad = None
        self.rule = FeedbackRule.parse(rule)
        self.trainable = trainable

    def __repr__(self):
        return f"Param(shape={self.value.shape}, rule={self.rule.value})"


class StreamFactory:
    """Hands out one independent RngStream per layer, in construction order."""

    def __init__(self, seed: int, base: int = 1):
        self.seed = seed
        self.base = base
        self.count = 0

    def next(self) -> RngStream:
        self.count += 1
        return RngStream(self.seed, (self.base, self.count))


class Module:
    training = True

    def __setattr__(self, name, value):
        d = self.__dict__
        if "_children" not in d:
            object.__setattr__(self, "_children", {})
            object.__setattr__(self, "_params", {})
        if isinstance(value, Module):
            d["_children"][name] = value
        elif isinstance(value, Param):
            d["_params"][name] = value
        object.__setattr__(self, name, value)

    def children(self):
        return self.__dict__.get("_children", {}).items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def own_streams(self) -> dict[str, RngStream]:
        return {}

    def named_buffers(self):
        for mname, m in self.named_modules():
            pre = f"{mname}." if mname else ""
            for k, v in m.own_buffers().items():
                yield pre + k, v

    def named_streams(self):
        for mname, m in self.named_modules():
            pre = f"{mname}." if mname else ""
            for k, v in m.own_streams().items():
                yield pre + k, v

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def __call__(self, x):
        return self.forward(x)


def _accumulate(p: Param, g: np.ndarray) -> None:
    p.grad = g if p.grad is None else p.grad + g


class Sequential(Module):
    def __init__(self, *mods: Module):
        self.n = len(mods)
        for i, m in enumerate(mods):
            setattr(self, str(i), m)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self.n))

    def __getitem__(self, i):
        return getattr(self, str(i % self.n))

    def forward(self, x):
        for m in self:
            x = m.forward(x)
        return x

    def backward(self, g):
        for i in reversed(range(self.n)):
            g = getattr(self, str(i)).backward(g)
        return g


class ModuleList(Module):
    def __init__(self, mods=()):
        self.n = 0
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(self.n), m)
        self.n += 1

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self.n))

    def __getitem__(self, i):
        return getattr(self, str(i))

    def __len__(self):
        return self.n


class ReLU(Module):
    def forward(self, x):
        y, self.deriv = relu_forward(x)
        return y

    def backward(self, g):
        return g * self.deriv


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, g):
        return g


class Zero(Module):
    def __init__(self, stride: int = 1, c_out: int | None = None):
        self.stride = stride
        self.c_out = c_out

    def forward(self, x):
        self.in_shape = x.shape
        out = x[:, :, ::self.stride, ::self.stride]
        c = self.c_out or x.shape[1]
        return np.zeros((x.shape[0], c) + out.shape[2:], dtype=x.dtype)

    def backward(self, g):
        return np.zeros(self.in_shape, dtype=g.dtype)


class Pool(Module):
    def __init__(self, kind: str, stride: int = 1):
        self.kind = kind
        self.stride = stride

    def forward(self, x):
        self.x = x
        return pool2d(x, self.kind, 3, self.stride, 1)

    def backward(self, g):
        return pool2d_input_grad(g, self.x, self.kind, 3, self.stride, 1)


class GlobalAvgPool(Module):
    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        n, c, h, w = self.in_shape
        return np.broadcast_to(g[:, :, None, None] / (h * w), self.in_shape).copy()


class Linear(Module):
    """``z = x @ W.T + b`` with W of shape [out, in]."""

    def __init__(self, d_in: int, d_out: int, rule="bp", rng: RngStream | None = None,
                 bias: bool = True, output_dim: int | None = None):
        rng = rng or RngStream(0)
        self.rule = FeedbackRule.parse(rule)
        self.weight = Param(xavier_uniform((d_out, d_in), rng), self.rule)
        self.bias = Param(np.zeros(d_out, dtype=default_dtype()), self.rule) if bias else None
        self.feedback = FeedbackState.create(self.rule, self.weight.value, rng, output_dim)

    def forward(self, x):
        self.x = x
        z = x @ self.weight.value.T
        if self.bias is not None:
            z = z + self.bias.value
        return check_finite(z, "linear")

    def backward(self, g):
        rules._check_error(g)
        _accumulate(self.weight, g.T @ self.x)
        if self.bias is not None:
            _accumulate(self.bias, g.sum(axis=0))
        W = self.weight.value
        self.feedback.weights = W
        M = rules.propagation_matrix(self.rule, self.feedback)
        if self.rule.sign_concordant and not rules.using_exact():
            assert np.array_equal(np.sign(M), np.sign(W)), "feedback lost sign concordance"
        rules.record_path(self, "exact" if rules.using_exact() else self.rule.value)
        return g @ M

    def own_buffers(self):
        return self.feedback.buffers()

    def own_streams(self):
        return {"feedback_rng": self.feedback.rng}


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, dilation=1, groups=1,
                 rule="bp", rng: RngStream | None = None, bias: bool = False):
        rng = rng or RngStream(0)
        self.rule = FeedbackRule.parse(rule)
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.weight = Param(xavier_uniform((c_out, c_in // groups, k, k), rng), self.rule)
        self.bias = Param(np.zeros(c_out, dtype=default_dtype()), self.rule) if bias else None
        self.feedback = FeedbackState.create(self.rule, self.weight.value, rng)

    def forward(self, x):
        self.x = x
        y = conv2d(x, self.weight.value, self.stride, self.padding, self.dilation, self.groups)
        if self.bias is not None:
            y = y + self.bias.value.reshape(1, -1, 1, 1)
        return y

    def backward(self, g):
        rules._check_error(g)
        W = self.weight.value
        _accumulate(self.weight, conv2d_weight_grad(self.x, g, W.shape, self.stride, self.padding,
                                                    self.dilation, self.groups))
        if self.bias is not None:
            _accumulate(self.bias, g.sum(axis=(0, 2, 3)))
        self.feedback.weights = W
        M = rules.propagation_matrix(self.rule, self.feedback)
        if self.rule.sign_concordant and not rules.using_exact():
            assert np.array_equal(np.sign(M), np.sign(W)), "feedback lost sign concordance"
        rules.record_path(self, "exact" if rules.using_exact() else self.rule.value)
        return conv2d_input_grad(g, M, self.x.shape, self.stride, self.padding, self.dilation, self.groups)

    def own_buffers(self):
        return self.feedback.buffers()

    def own_streams(self):
        return {"feedback_rng": self.feedback.rng}


class BatchNorm2d(Module):
    def __init__(self, c: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5,
                 rule="bp"):
        dt = default_dtype()
        self.eps, self.momentum, self.affine = eps, momentum, affine
        self.running_mean = np.zeros(c, dtype=dt)
        self.running_var = np.ones(c, dtype=dt)
        if affine:
            self.gamma = Param(np.ones(c, dtype=dt), rule)
            self.beta = Param(np.zeros(c, dtype=dt), rule)

    def forward(self, x):
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var * m / max(m - 1, 1)
        else:
            mean, var = self.running_mean, self.running_var
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) * self.inv_std.reshape(1, -1, 1, 1)
        if self.affine:
            return self.xhat * self.gamma.value.reshape(1, -1, 1, 1) + self.beta.value.reshape(1, -1, 1, 1)
        return self.xhat

    def backward(self, g):
        if self.affine:
            _accumulate(self.gamma, (g * self.xhat).sum(axis=(0, 2, 3)))
            _accumulate(self.beta, g.sum(axis=(0, 2, 3)))
            g = g * self.gamma.value.reshape(1, -1, 1, 1)
        inv = self.inv_std.reshape(1, -1, 1, 1)
        if not self.training:
            return g * inv
        gm = g.mean(axis=(0, 2, 3), keepdims=True)
        gxm = (g * self.xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv * (g - gm - self.xhat * gxm)

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class HebbianConv2d(Module):
    """Convolution whose kernel is adjusted by a Hebbian outer-product rule at forward time.

    The kernel is not trained by SGD. Error still flows to the input through
    the kernel so that layers below keep learning.
    """

    def __init__(self, c_in, c_out, k, stride=1, padding=0, dilation=1, groups=1,
                 rng: RngStream | None = None, hebbian_scale: float = 1e-4, normalize: bool = True,
                 norm_cap: float | None = None):
        rng = rng or RngStream(0)
        w = xavier_uniform((c_out, c_in // groups, k, k), rng)
        cap = norm_cap if norm_cap is not None else float(np.sqrt((w.reshape(c_out, -1) ** 2).sum(1)).max())
        self.weight = Param(w, FeedbackRule.HEBB, trainable=False)
        self.state = rules.HebbianConvState(w, hebbian_scale=hebbian_scale, normalize=normalize,
                                            norm_cap=cap, stride=stride, padding=padding,
                                            dilation=dilation, groups=groups)

    def forward(self, x):
        self.x = x
        self.state.conv_weights = self.weight.value
        return rules.hebbian_forward_update(self.state, x, training=self.training and not rules.plasticity_frozen())

    def backward(self, g):
        s = self.state
        rules.record_path(self, "exact" if rules.using_exact() else "hebb")
        return conv2d_input_grad(g, self.weight.value, self.x.shape, s.stride, s.padding, s.dilation, s.groups)

    def own_buffers(self):
        return {"hebbian_accumulator": self.state.hebbian_accumulator}


class PredictiveCodingConv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, dilation=1,
                 rng: RngStream | None = None, prediction_steps: int = 3, gating: bool = False):
        rng = rng or RngStream(0)
        dt = default_dtype()
        self.weight = Param(xavier_uniform((c_out, c_in, k, k), rng), FeedbackRule.PC)
        self.error_weights = Param(np.ones(c_out, dtype=dt), FeedbackRule.PC)
        self.gate = Param(xavier_uniform((c_out, c_out, 1, 1), rng), FeedbackRule.PC) if gating else None
        self.state = rules.PredictiveCodingConvState(
            self.weight.value, self.error_weights.value, prediction_steps, gating,
            self.gate.value if gating else None, stride, padding, dilation)

    def _sync(self):
        s = self.state
        s.conv_weights = self.weight.value
        s.error_weights = self.error_weights.value
        if self.gate is not None:
            s.gate_weights = self.gate.value

    def forward(self, x):
        self._sync()
        pred, self.cache = rules.predictive_coding_forward(self.state, x, return_cache=True)
        return pred

    def backward(self, g):
        rules.record_path(self, "exact" if rules.using_exact() else "pc")
        dx, dW, dew, dgate = rules.predictive_coding_backward(self.state, self.cache, g)
        _accumulate(self.weight, dW)
        _accumulate(self.error_weights, dew)
        if self.gate is not None:
            _accumulate(self.gate, dgate)
        return dx


def drop_path(x: np.ndarray, p: float, rng: RngStream, training: bool = True, return_mask: bool = False):
    """Zero whole samples with probability p, rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("drop path probability must be in [0, 1)")
    if not training or p == 0.0:
        mask = None
        out = x
    else:
        keep = (rng.random(x.shape[0]) >= p).astype(x.dtype) / (1.0 - p)
        mask = keep.reshape((-1,) + (1,) * (x.ndim - 1))
        out = x * mask
    return (out, mask) if return_mask else out


def feedback_layers(model: Module):
    """All layers that own a FeedbackState, with their names."""
    return [(n, m) for n, m in model.named_modules() if isinstance(m, (Linear, Conv2d))]


def as_input(x) -> np.ndarray:
    return as_tensor(x)
