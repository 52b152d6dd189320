"""Small reference models sharing the explicit forward/backward interface."""
from __future__ import annotations

import numpy as np

from . import rules
from .layers import (
    Conv2d,
    GlobalAvgPool,
    Linear,
    Module,
    ModuleList,
    ReLU,
    Sequential,
    StreamFactory,
)
from .rules import FeedbackRule
from .tensor import ActivationRecord, softmax_cross_entropy


class Model(Module):
    """Mixin for classifiers: gradient queries and prediction helpers."""

    def predict(self, x: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return self.forward(x)
        finally:
            self.train(was)

    def input_gradient(self, x: np.ndarray, y) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its exact gradient w.r.t. the input, in eval mode."""
        logits, gx = self.logits_and_input_gradient(x, y)
        return softmax_cross_entropy(logits, y)[0], gx

    def logits_and_input_gradient(self, x: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
        was = self.training
        self.eval()
        try:
            logits = self.forward(x)
            _, err = softmax_cross_entropy(logits, y)
            with rules.exact_gradients():
                gx = self.backward(err)
            self.zero_grad()
            return logits, gx
        finally:
            self.train(was)

    def input_gradient_of(self, x: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            self.forward(x)
            with rules.exact_gradients():
                gx = self.backward(grad_logits)
            self.zero_grad()
            return gx
        finally:
            self.train(was)


class MLP(Model):
    """ReLU multilayer perceptron with one learning rule per dense layer.

    A hidden layer tagged ``dfa`` receives its error straight from the output
    error through a fixed random matrix; every other layer passes error down
    through its own rule's feedback matrix.
    """

    def __init__(self, sizes, rules_per_layer, seed: int = 0, linear: bool = False, bias: bool = True):
        if len(rules_per_layer) != len(sizes) - 1:
            raise ValueError("one rule per dense layer")
        streams = StreamFactory(seed)
        out_dim = sizes[-1]
        self.linear = linear
        self.layers = ModuleList(
            Linear(a, b, r, streams.next(), bias=bias,
                   output_dim=out_dim if FeedbackRule.parse(r) is FeedbackRule.DFA else None)
            for a, b, r in zip(sizes[:-1], sizes[1:], rules_per_layer))
        self.acts = ModuleList(ReLU() for _ in range(len(sizes) - 2))

    def forward(self, x):
        x = x.reshape(x.shape[0], -1)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1 and not self.linear:
                x = self.acts[i].forward(x)
        return x

    def backward(self, e_out):
        g = e_out
        n = len(self.layers)
        for i in reversed(range(n)):
            g_in = self.layers[i].backward(g)
            if i == 0:
                return g_in
            below = self.layers[i - 1]
            deriv = None if self.linear else self.acts[i - 1].deriv
            if below.rule is FeedbackRule.DFA and not rules.using_exact():
                g = rules.dfa_backward(e_out, ActivationRecord(self.layers[i].x, None, deriv), below.feedback)
            else:
                g = g_in if deriv is None else g_in * deriv


class SmallConvNet(Model):
    """conv3x3 - relu - conv3x3 - relu - global pool - dense."""

    def __init__(self, in_ch: int = 3, c1: int = 4, c2: int = 6, num_classes: int = 3,
                 rules_per_layer=("bp", "bp", "bp"), seed: int = 0):
        s = StreamFactory(seed)
        r1, r2, r3 = rules_per_layer
        self.body = Sequential(
            Conv2d(in_ch, c1, 3, padding=1, rule=r1, rng=s.next(), bias=True), ReLU(),
            Conv2d(c1, c2, 3, padding=1, rule=r2, rng=s.next(), bias=True), ReLU(),
            GlobalAvgPool(), Linear(c2, num_classes, r3, s.next()))

    def forward(self, x):
        return self.body.forward(x)

    def backward(self, g):
        return self.body.backward(g)


class LinearModel(Model):
    """Affine classifier on flattened pixels; closed-form attack oracles use it."""

    def __init__(self, in_shape, num_classes: int, seed: int = 0, weight=None, bias=None):
        self.in_shape = tuple(in_shape)
        d = int(np.prod(in_shape))
        self.fc = Linear(d, num_classes, "bp", StreamFactory(seed).next())
        if weight is not None:
            self.fc.weight.value[...] = weight
        if bias is not None:
            self.fc.bias.value[...] = bias

    def forward(self, x):
        self.n = x.shape[0]
        return self.fc.forward(x.reshape(x.shape[0], -1))

    def backward(self, g):
        return self.fc.backward(g).reshape((self.n,) + self.in_shape)


class NormalizedModel(Model):
    """Per-channel standardisation in front of a model, so attacks work in [0, 1] pixel space."""

    def __init__(self, inner: Model, mean, std):
        self.inner = inner
        self.mean = np.asarray(mean, dtype=float).reshape(1, -1, 1, 1)
        self.std = np.asarray(std, dtype=float).reshape(1, -1, 1, 1)

    def forward(self, x):
        return self.inner.forward((x - self.mean) / self.std)

    def backward(self, g):
        return self.inner.backward(g) / self.std
