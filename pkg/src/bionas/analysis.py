"""Gradient-variance tracking, weight-distribution statistics and rule reassignment."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import rules
from .layers import Module
from .rules import FeedbackRule
from .supernet import PARAM_FREE_OPS, CandidatePair, Genotype, admissible_rules
from .tensor import ActivationRecord, RngStream

GRADVAR_HEADER = ("# variance = mean over parameters of the per-parameter variance (ddof=0) of the "
                  "pseudo-gradient across the epoch's batch updates")


class GradVarianceTracker:
    """Trainer hook; streams per-parameter moments with Welford's update.

    With ``audit=True`` the epoch's batches are also kept so the streamed value
    can be checked against :func:`two_pass_variance`; the largest absolute gap
    seen so far is in ``audit_error``.
    """

    def __init__(self, audit: bool = False):
        self.log: list[tuple[int, float]] = []
        self.audit = audit
        self.audit_error = 0.0
        self._batches = []
        self._reset()

    def _reset(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def on_batch(self, grads) -> None:
        g = np.concatenate([np.ravel(a) for a in grads]) if len(grads) else np.zeros(0)
        if self.mean is None:
            self.mean = np.zeros_like(g)
            self.m2 = np.zeros_like(g)
        if g.shape != self.mean.shape:
            raise ValueError("pseudo-gradient size changed within an epoch")
        self.n += 1
        delta = g - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (g - self.mean)
        if self.audit:
            self._batches.append([g.copy()])

    def epoch_variance(self) -> float:
        if self.n == 0 or self.mean.size == 0:
            return float("nan")
        return float((self.m2 / self.n).mean())

    def on_epoch_end(self, epoch: int) -> float:
        v = self.epoch_variance()
        if self.audit and self._batches:
            self.audit_error = max(self.audit_error, abs(v - two_pass_variance(self._batches)))
            self._batches = []
        self.log.append((epoch, v))
        self._reset()
        return v

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(GRADVAR_HEADER + "\n")
            w = csv.writer(fh)
            w.writerow(("epoch", "variance"))
            w.writerows(self.log)


def two_pass_variance(grads_per_batch) -> float:
    """Reference statistic: stack the flattened batch gradients and take the column variance."""
    G = np.stack([np.concatenate([np.ravel(a) for a in g]) for g in grads_per_batch])
    return float(G.var(axis=0).mean())


def read_gradvar_csv(path) -> list[tuple[int, float]]:
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return [(int(e), float(v)) for e, v in rows[1:]]


# ----------------------------------------------------------------------------- weight statistics


@dataclass
class WeightStats:
    bin_edges: np.ndarray
    mass: np.ndarray
    tail_mass: float
    variance: float
    excess_kurtosis: float
    n: int
    dev_gaussian: float
    dev_student_t: float

    def summary(self) -> dict:
        return {"n": self.n, "variance": self.variance, "excess_kurtosis": self.excess_kurtosis,
                "tail_mass": self.tail_mass, "l1_deviation_gaussian": self.dev_gaussian,
                "l1_deviation_student_t10": self.dev_student_t}


def pooled_weights(model: Module) -> np.ndarray:
    """All convolution and dense kernels, flattened."""
    ws = [p.value.ravel() for name, p in model.named_parameters()
          if name.rsplit(".", 1)[-1] == "weight" and p.value.ndim >= 2]
    if not ws:
        raise ValueError("model has no convolution or dense weights")
    return np.concatenate(ws)


def weight_stats(w: np.ndarray, bins: int = 80, lo: float = -2.0, hi: float = 2.0) -> WeightStats:
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0:
        raise ValueError("empty weight set")
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(w, bins=edges)
    mass = counts / w.size
    tail = float(np.mean((w < lo) | (w > hi)))
    # exact test for a constant set: the two-pass variance of 0.3 repeated is ~1e-33, not 0
    var = float(w.var(ddof=1)) if w.size > 1 and np.ptp(w) > 0 else 0.0
    kurt = float(stats.kurtosis(w, fisher=True, bias=True)) if var > 0 else 0.0
    sd = np.sqrt(var)
    if sd > 0:
        ref_g = np.diff(stats.norm.cdf(edges, scale=sd))
        ref_t = np.diff(stats.t.cdf(edges, df=10, scale=sd / np.sqrt(10 / 8)))
        dev_g, dev_t = float(np.abs(mass - ref_g).sum()), float(np.abs(mass - ref_t).sum())
    else:
        dev_g = dev_t = float("nan")
    return WeightStats(edges, mass, tail, var, kurt, int(w.size), dev_g, dev_t)


def weight_distribution(model: Module, bins: int = 80) -> WeightStats:
    return weight_stats(pooled_weights(model), bins)


def write_weight_stats(ws: WeightStats, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_left", "bin_right", "mass"))
        w.writerows(zip(ws.bin_edges[:-1], ws.bin_edges[1:], ws.mass))
    Path(json_path).write_text(json.dumps(ws.summary(), indent=2) + "\n")


# ----------------------------------------------------------------------------- rule reassignment


def _admissible(op: str, mode: str):
    if op in PARAM_FREE_OPS and mode != "full":
        return (FeedbackRule.NONE,)
    return admissible_rules(op, mode)


def reassign_rules(genotype: Genotype, rng: RngStream, mode: str = "shuffle", space: str = "strict") -> Genotype:
    """Permute (shuffle) or redraw (resample) the learning rules; ops and sources stay put.

    Shuffling happens within groups of ops sharing an admissible rule set, so
    every rule lands on an op that accepts it and the overall multiset holds.
    """
    entries = list(genotype.normal) + list(genotype.reduce)
    pairs = [p for _, p in entries]
    if mode == "resample":
        new = []
        for p in pairs:
            allowed = _admissible(p.op, space)
            if not allowed:
                raise ValueError(f"op {p.op} has no admissible rule")
            new.append(CandidatePair(p.op, allowed[int(rng.integers(0, len(allowed)))]))
    elif mode == "shuffle":
        groups = defaultdict(list)
        for i, p in enumerate(pairs):
            groups[_admissible(p.op, space)].append(i)
        new = list(pairs)
        for key in sorted(groups, key=lambda k: [r.value for r in k]):
            idx = groups[key]
            perm = rng.permutation(len(idx))
            for dst, src in zip(idx, perm):
                new[dst] = CandidatePair(pairs[dst].op, pairs[idx[src]].rule)
    else:
        raise ValueError(f"unknown reassignment mode {mode!r}")
    k = len(genotype.normal)
    return genotype.with_pairs(new[:k], new[k:])


def same_topology(a: Genotype, b: Genotype) -> bool:
    def skeleton(g):
        return [(s, p.op) for s, p in g.normal], [(s, p.op) for s, p in g.reduce]
    return skeleton(a) == skeleton(b)


def single_rule_variant(genotype: Genotype, rule) -> Genotype:
    """Every parametric op trained with one rule; parameter-free ops keep 'none'."""
    rule = FeedbackRule.parse(rule)
    def conv(entries):
        return [p if p.op in PARAM_FREE_OPS else CandidatePair(p.op, rule) for _, p in entries]
    return genotype.with_pairs(conv(genotype.normal), conv(genotype.reduce))


# ----------------------------------------------------------------------------- mixed update decomposition


def mixed_update_decomposition(model, x, y, rule_set=(FeedbackRule.BP,) + rules.MATRIX_RULES) -> float:
    """Largest deviation between a mixed-rule MLP's backward pass and the
    indicator-weighted sum of per-rule updates built from the same incoming error.

    For hidden layer i with incoming error e_i the mixed pass must propagate
    sum_r [rule_i == r] (e_i M_r) * phi'(z_{i-1}), and its weight update must
    be e_i^T x_i whatever the rule. DFA layers are skipped: their error does
    not arrive through the layer above.
    """
    from .tensor import softmax_cross_entropy

    model.train()
    _, err = softmax_cross_entropy(model.forward(x), y)
    incoming, outgoing = {}, {}
    rng_states = {i: layer.feedback.rng.get_state() for i, layer in enumerate(model.layers)}

    def spy(i, fn):
        def wrapped(g):
            incoming[i] = g
            outgoing[i] = fn(g)
            return outgoing[i]
        return wrapped

    for i, layer in enumerate(model.layers):
        layer.backward = spy(i, layer.backward)
    try:
        model.zero_grad()
        model.backward(err)
    finally:
        for layer in model.layers:
            del layer.backward
    worst = 0.0
    for i in range(1, len(model.layers)):
        layer, below = model.layers[i], model.layers[i - 1]
        if below.rule is FeedbackRule.DFA:
            continue
        deriv = None if model.linear else model.acts[i - 1].deriv
        rec = ActivationRecord(layer.x, None, deriv)
        total = np.zeros_like(layer.x)
        for j, r in enumerate(rule_set):
            if r is layer.rule:
                layer.feedback.rng.set_state(rng_states[i])
                state = layer.feedback
            else:
                state = rules.FeedbackState.create(r, layer.weight.value, RngStream(0, (16, i, j)))
            dW, e_prev = rules.backward_dense(r, incoming[i], rec, state, 1.0)
            total = total + float(r is layer.rule) * e_prev
            worst = max(worst, float(np.abs(-dW - incoming[i].T @ layer.x).max()))
        mixed = outgoing[i] if deriv is None else outgoing[i] * deriv
        worst = max(worst, float(np.abs(mixed - total).max()))
        worst = max(worst, float(np.abs(layer.weight.grad - incoming[i].T @ layer.x).max()))
    return worst


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": float(v.min()), "max": float(v.max()), "spread": float(v.max() - v.min())}


def dump_json(obj, path) -> None:
    def enc(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        return str(o)
    Path(path).write_text(json.dumps(obj, indent=2, default=enc) + "\n")
