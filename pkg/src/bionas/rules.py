"""Credit-assignment rules and the forward-time plasticity convolutions.

Every rule in the feedback-alignment family keeps the weight-gradient path of
backprop (correlation of the layer input with the incoming error) and only
swaps the matrix that carries the error to the layer below:

=====  ==========================================
bp     W itself
fa     fixed random B, drawn once
dfa    fixed random [output_dim x layer_dim] B, fed from the output error
usf    sign(W)
brsf   |R_t| * sign(W), |R_t| redrawn on every call
frsf   |R| * sign(W), |R| drawn once
=====  ==========================================

``hebb`` and ``pc`` act during the forward pass and never define a feedback
matrix.
"""
from __future__ import annotations

import contextlib
import contextvars
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ActivationRecord,
    NumericalError,
    RngStream,
    check_finite,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    default_dtype,
    unfold,
)


class FeedbackRule(str, enum.Enum):
    BP = "bp"
    FA = "fa"
    DFA = "dfa"
    USF = "usf"
    BRSF = "brsf"
    FRSF = "frsf"
    HEBB = "hebb"
    PC = "pc"
    NONE = "none"

    @classmethod
    def parse(cls, token) -> "FeedbackRule":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token))
        except ValueError:
            raise ValueError(f"unknown learning rule token {token!r}") from None

    @property
    def forward_time(self) -> bool:
        return self in (FeedbackRule.HEBB, FeedbackRule.PC)

    @property
    def sign_concordant(self) -> bool:
        return self in (FeedbackRule.USF, FeedbackRule.BRSF, FeedbackRule.FRSF)

    def __str__(self) -> str:
        return self.value


# rules that define a feedback matrix from the forward weights
MATRIX_RULES = (FeedbackRule.FA, FeedbackRule.USF, FeedbackRule.BRSF, FeedbackRule.FRSF)

_exact = contextvars.ContextVar("bionas_exact_gradients", default=False)
_trace = contextvars.ContextVar("bionas_feedback_trace", default=None)
_frozen = contextvars.ContextVar("bionas_frozen_plasticity", default=False)


@contextlib.contextmanager
def frozen_plasticity():
    """Suppress forward-time Hebbian updates (validation and fitness passes)."""
    token = _frozen.set(True)
    try:
        yield
    finally:
        _frozen.reset(token)


def plasticity_frozen() -> bool:
    return _frozen.get()


@contextlib.contextmanager
def exact_gradients():
    """Within this block every layer backpropagates through W regardless of rule."""
    token = _exact.set(True)
    try:
        yield
    finally:
        _exact.reset(token)


def using_exact() -> bool:
    return _exact.get()


@contextlib.contextmanager
def trace_feedback():
    """Collect ``(layer, path)`` for every error propagation that runs."""
    log: list = []
    token = _trace.set(log)
    try:
        yield log
    finally:
        _trace.reset(token)


def record_path(layer, path: str) -> None:
    log = _trace.get()
    if log is not None:
        log.append((layer, path))


def sign(x: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0
    return np.sign(x)


def fans(shape) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def xavier_uniform(shape, rng: RngStream, gain: float = 1.0) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(default_dtype())


@dataclass
class FeedbackState:
    """Per-layer feedback bookkeeping.

    ``weights`` is a live reference to the layer's forward weights, so the
    sign-concordant rules always see the current W.
    """

    rule: FeedbackRule
    weights: np.ndarray
    rng: RngStream
    B: np.ndarray | None = None
    R: np.ndarray | None = None
    draws: int = 0
    # uSF feedback carries unit magnitudes; propagation rescales them to the
    # Xavier standard deviation so that error magnitudes match the other rules.
    usf_scale: float = 1.0

    @classmethod
    def create(cls, rule, weights: np.ndarray, rng: RngStream, output_dim: int | None = None):
        rule = FeedbackRule.parse(rule)
        st = cls(rule=rule, weights=weights, rng=rng)
        if rule is FeedbackRule.FA:
            st.B = xavier_uniform(weights.shape, rng)
        elif rule is FeedbackRule.FRSF:
            st.R = np.abs(xavier_uniform(weights.shape, rng))
        elif rule is FeedbackRule.USF:
            fan_in, fan_out = fans(weights.shape)
            st.usf_scale = float(np.sqrt(2.0 / (fan_in + fan_out)))
        elif rule is FeedbackRule.DFA:
            if output_dim is None or weights.ndim != 2:
                raise ValueError("dfa needs a dense layer and the network output dimension")
            st.B = xavier_uniform((output_dim, weights.shape[0]), rng)
        return st

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        if self.B is not None:
            out["B"] = self.B
        if self.R is not None:
            out["R"] = self.R
        return out


def compute_feedback_matrix(rule, W: np.ndarray, state: FeedbackState) -> np.ndarray:
    rule = FeedbackRule.parse(rule)
    if rule not in MATRIX_RULES:
        raise ValueError(f"rule {rule.value} has no feedback matrix")
    if W.shape != state.weights.shape:
        raise ValueError(f"weight shape {W.shape} does not match feedback state {state.weights.shape}")
    if rule is FeedbackRule.FA:
        return state.B
    if rule is FeedbackRule.USF:
        return sign(W)
    if rule is FeedbackRule.FRSF:
        return state.R * sign(W)
    # brsf: fresh magnitudes every time the matrix is requested
    state.draws += 1
    return np.abs(xavier_uniform(W.shape, state.rng)) * sign(W)


def propagation_matrix(rule, state: FeedbackState) -> np.ndarray:
    """Matrix that carries error through a layer; W under exact mode."""
    rule = FeedbackRule.parse(rule)
    if using_exact() or rule in (FeedbackRule.BP, FeedbackRule.HEBB, FeedbackRule.PC,
                                 FeedbackRule.NONE, FeedbackRule.DFA):
        return state.weights
    B = compute_feedback_matrix(rule, state.weights, state)
    return state.usf_scale * B if rule is FeedbackRule.USF else B


def _check_error(e: np.ndarray) -> None:
    if not np.all(np.isfinite(e)):
        raise NumericalError("non-finite error signal")


def backward_dense(rule, error_next, record: ActivationRecord, state: FeedbackState, lr: float):
    """Weight step and propagated error for a dense layer ``z = x @ W.T``.

    ``error_next`` is dL/dz for this layer's output. Returns ``(dW, e_prev)``
    with ``dW = -lr * error_next.T @ x`` and
    ``e_prev = (error_next @ M) * phi'(record)``, M being W for bp and the
    rule's feedback matrix otherwise.
    """
    _check_error(error_next)
    W = state.weights
    x = record.layer_input
    if error_next.shape[1] != W.shape[0] or x.shape[1] != W.shape[1] or x.shape[0] != error_next.shape[0]:
        raise ValueError("shape mismatch in backward_dense")
    grad = error_next.T @ x
    M = propagation_matrix(rule, state)
    e_prev = error_next @ M
    if record.activation_derivative is not None:
        e_prev = e_prev * record.activation_derivative
    return -lr * grad, check_finite(e_prev, "backward_dense")


def backward_conv(rule, error_next, record: ActivationRecord, state: FeedbackState, lr: float,
                  stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1):
    _check_error(error_next)
    W = state.weights
    x = record.layer_input
    if error_next.shape[1] != W.shape[0] or x.shape[1] != W.shape[1] * groups:
        raise ValueError("shape mismatch in backward_conv")
    grad = conv2d_weight_grad(x, error_next, W.shape, stride, padding, dilation, groups)
    M = propagation_matrix(rule, state)
    e_prev = conv2d_input_grad(error_next, M, x.shape, stride, padding, dilation, groups)
    if record.activation_derivative is not None:
        e_prev = e_prev * record.activation_derivative
    return -lr * grad, e_prev


def dfa_backward(output_error, record: ActivationRecord, state: FeedbackState) -> np.ndarray:
    """Hidden-layer error sent straight from the output: ``(e_out @ B) * phi'``.

    ``record.activation_derivative`` is phi' at this hidden layer's output.
    """
    _check_error(output_error)
    B = state.B
    if B is None or output_error.shape[1] != B.shape[0]:
        raise ValueError("dfa feedback shape mismatch")
    e = output_error @ B
    if record.activation_derivative is not None:
        if record.activation_derivative.shape != e.shape:
            raise ValueError("dfa feedback shape mismatch")
        e = e * record.activation_derivative
    return e


# --------------------------------------------------------------------------
# forward-time plasticity


@dataclass
class HebbianConvState:
    conv_weights: np.ndarray
    hebbian_accumulator: np.ndarray = None
    hebbian_scale: float = 1e-4
    normalize: bool = False
    norm_cap: float = 1.0
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.hebbian_accumulator is None:
            self.hebbian_accumulator = np.zeros_like(self.conv_weights)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def hebbian_delta(state: HebbianConvState, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Scaled mean outer product of unit output and input patch vectors."""
    W = state.conv_weights
    cout, cin_g, k, _ = W.shape
    g = state.groups
    patches = unfold(x, k, state.stride, state.padding, state.dilation)  # N,Ho,Wo,Cin,k,k
    n, ho, wo = patches.shape[:3]
    xin = _unit_rows(patches.reshape(n * ho * wo, g, cin_g * k * k))
    yout = _unit_rows(y.transpose(0, 2, 3, 1).reshape(n * ho * wo, g, cout // g))
    upd = np.einsum("pgo,pgi->goi", yout, xin) / (n * ho * wo)
    return state.hebbian_scale * upd.reshape(W.shape)


def hebbian_forward_update(state: HebbianConvState, x: np.ndarray, training: bool = True) -> np.ndarray:
    if state.hebbian_scale < 0:
        raise ValueError("hebbian_scale must be non-negative")
    W = state.conv_weights
    y = conv2d(x, W, state.stride, state.padding, state.dilation, state.groups)
    if training and state.hebbian_scale > 0:
        delta = check_finite(hebbian_delta(state, x, y), "hebbian update")
        W += delta
        state.hebbian_accumulator += delta
        if state.normalize:
            norms = np.sqrt((W.reshape(W.shape[0], -1) ** 2).sum(axis=1))
            scale = np.minimum(1.0, state.norm_cap / np.maximum(norms, 1e-12))
            W *= scale.reshape(-1, 1, 1, 1)
    return y


@dataclass
class PredictiveCodingConvState:
    conv_weights: np.ndarray
    error_weights: np.ndarray
    prediction_steps: int = 3
    gating: bool = False
    gate_weights: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.prediction_steps < 1:
            raise ValueError("prediction_steps must be >= 1")
        if self.gating and self.gate_weights is None:
            raise ValueError("gating requires gate_weights")


def project_input(x: np.ndarray, c_out: int, stride: int, out_hw) -> np.ndarray:
    """Bring x to the prediction's shape: strided subsample, then channel mean if C differs."""
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    if xs.shape[2:] != tuple(out_hw):
        raise ValueError(f"cannot align input {x.shape} with prediction size {out_hw}")
    if xs.shape[1] == c_out:
        return xs
    return np.repeat(xs.mean(axis=1, keepdims=True), c_out, axis=1)


def project_input_grad(g: np.ndarray, x_shape, stride: int) -> np.ndarray:
    n, cin, h, w = x_shape
    if g.shape[1] != cin:
        g = np.repeat(g.sum(axis=1, keepdims=True) / cin, cin, axis=1)
    out = np.zeros(x_shape, dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class PCCache:
    x: np.ndarray
    x_proj: np.ndarray
    preds: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def predictive_coding_forward(state: PredictiveCodingConvState, x: np.ndarray, return_cache: bool = False):
    W = state.conv_weights
    pred = conv2d(x, W, state.stride, state.padding, state.dilation)
    xp = project_input(x, W.shape[0], state.stride, pred.shape[2:])
    cache = PCCache(x=x, x_proj=xp)
    ew = state.error_weights.reshape(1, -1, 1, 1)
    for _ in range(state.prediction_steps):
        cache.preds.append(pred)
        err = xp - pred
        if state.gating:
            gate = _sigmoid(conv2d(pred, state.gate_weights))
            cache.gates.append(gate)
            err = err * gate
        cache.errors.append(err)
        pred = pred + ew * err
    check_finite(pred, "predictive_coding_forward")
    return (pred, cache) if return_cache else pred


def predictive_coding_backward(state: PredictiveCodingConvState, cache: PCCache, g: np.ndarray):
    """Exact gradients through the unrolled prediction loop.

    Returns ``(dx, dW, d_error_weights, d_gate_weights)``.
    """
    ew = state.error_weights.reshape(1, -1, 1, 1)
    d_ew = np.zeros_like(state.error_weights)
    d_gate = None if state.gate_weights is None else np.zeros_like(state.gate_weights)
    d_xp = np.zeros_like(cache.x_proj)
    G = g
    for s in reversed(range(state.prediction_steps)):
        pred_s, err = cache.preds[s], cache.errors[s]
        d_ew += (G * err).sum(axis=(0, 2, 3))
        d_err = ew * G
        if state.gating:
            gate = cache.gates[s]
            resid = cache.x_proj - pred_s
            d_resid = d_err * gate
            d_a = d_err * resid * gate * (1.0 - gate)
            d_gate += conv2d_weight_grad(pred_s, d_a, state.gate_weights.shape)
            d_pred = G - d_resid + conv2d_input_grad(d_a, state.gate_weights, pred_s.shape)
        else:
            d_resid = d_err
            d_pred = G - d_resid
        d_xp += d_resid
        G = d_pred
    W = state.conv_weights
    dW = conv2d_weight_grad(cache.x, G, W.shape, state.stride, state.padding, state.dilation)
    dx = conv2d_input_grad(G, W, cache.x.shape, state.stride, state.padding, state.dilation)
    dx = dx + project_input_grad(d_xp, cache.x.shape, state.stride)
    return dx, dW, d_ew, d_gate
