"""Cell search space over (operation, learning rule) pairs.

Two networks share the stem / cell stack / classifier layout:

* :class:`SearchNetwork` -- every edge is a softmax mixture over all candidate
  pairs, weighted by architecture logits (``alphas_normal``, ``alphas_reduce``).
* :class:`DiscreteNetwork` -- the network instantiated from a :class:`Genotype`,
  each op trained with the rule the genotype assigns to it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    HebbianConv2d,
    Identity,
    Linear,
    Module,
    ModuleList,
    Pool,
    PredictiveCodingConv2d,
    ReLU,
    Sequential,
    StreamFactory,
    Zero,
    drop_path,
)
from .models import Model
from .rules import FeedbackRule
from .tensor import RngStream, default_dtype, softmax

OPS = (
    "zero",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
CONV_OPS = OPS[4:]
PARAM_FREE_OPS = ("zero", "max_pool_3x3", "avg_pool_3x3")
CONV_RULES = (FeedbackRule.FA, FeedbackRule.USF, FeedbackRule.BRSF, FeedbackRule.FRSF)
SKIP_RULES = (FeedbackRule.USF, FeedbackRule.BRSF, FeedbackRule.FRSF)
EXTENDED_RULES = (FeedbackRule.HEBB, FeedbackRule.PC)
SPACE_MODES = ("strict", "extended", "full")


def admissible_rules(op: str, mode: str = "strict") -> tuple[FeedbackRule, ...]:
    if op not in OPS:
        raise ValueError(f"unknown operation token {op!r}")
    if mode == "full":
        return CONV_RULES
    if op in PARAM_FREE_OPS:
        return (FeedbackRule.NONE,)
    if op == "skip_connect":
        return SKIP_RULES
    return CONV_RULES + (EXTENDED_RULES if mode == "extended" else ())


@dataclass(frozen=True)
class CandidatePair:
    op: str
    rule: FeedbackRule = FeedbackRule.NONE

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown operation token {self.op!r}")
        object.__setattr__(self, "rule", FeedbackRule.parse(self.rule))

    @property
    def token(self) -> str:
        return f"{self.op}:{self.rule.value}"

    def __str__(self):
        return self.token


def candidate_pairs(mode: str = "strict") -> list[CandidatePair]:
    """Per-edge candidate list.

    ``strict`` pairs each op with the rules listed for it (22 pairs);
    ``extended`` also lets convolutions use hebb and pc (30); ``full`` crosses
    all 8 ops with the 4 feedback rules (32).
    """
    if mode not in SPACE_MODES:
        raise ValueError(f"unknown search space mode {mode!r}")
    return [CandidatePair(op, r) for op in OPS for r in admissible_rules(op, mode)]


def parse_pairs(tokens) -> list[CandidatePair]:
    out = []
    for t in tokens:
        if isinstance(t, CandidatePair):
            out.append(t)
            continue
        op, _, rule = str(t).partition(":")
        out.append(CandidatePair(op, rule or "none"))
    return out


@dataclass
class OpConfig:
    affine: bool = True
    pool_bn: bool = False
    hebbian_scale: float = 1e-4
    pc_steps: int = 3
    pc_gating: bool = False


# --------------------------------------------------------------------------
# operations


class ReLUConvBN(Sequential):
    def __init__(self, c_in, c_out, k, stride, padding, rule, rng, affine=True):
        super().__init__(ReLU(), Conv2d(c_in, c_out, k, stride, padding, rule=rule, rng=rng),
                         BatchNorm2d(c_out, affine))


class SepConv(Sequential):
    def __init__(self, c_in, c_out, k, stride, padding, rule, streams: StreamFactory, affine=True):
        super().__init__(
            ReLU(),
            Conv2d(c_in, c_in, k, stride, padding, groups=c_in, rule=rule, rng=streams.next()),
            Conv2d(c_in, c_in, 1, rule=rule, rng=streams.next()),
            BatchNorm2d(c_in, affine),
            ReLU(),
            Conv2d(c_in, c_in, k, 1, padding, groups=c_in, rule=rule, rng=streams.next()),
            Conv2d(c_in, c_out, 1, rule=rule, rng=streams.next()),
            BatchNorm2d(c_out, affine),
        )


class DilConv(Sequential):
    def __init__(self, c_in, c_out, k, stride, padding, dilation, rule, streams: StreamFactory, affine=True):
        super().__init__(
            ReLU(),
            Conv2d(c_in, c_in, k, stride, padding, dilation, groups=c_in, rule=rule, rng=streams.next()),
            Conv2d(c_in, c_out, 1, rule=rule, rng=streams.next()),
            BatchNorm2d(c_out, affine),
        )


class FactorizedReduce(Module):
    """Halve resolution with two offset stride-2 1x1 convolutions."""

    def __init__(self, c_in, c_out, rule, streams: StreamFactory, affine=True):
        if c_out % 2:
            raise ValueError("FactorizedReduce needs an even number of output channels")
        self.relu = ReLU()
        self.conv_1 = Conv2d(c_in, c_out // 2, 1, stride=2, rule=rule, rng=streams.next())
        self.conv_2 = Conv2d(c_in, c_out // 2, 1, stride=2, rule=rule, rng=streams.next())
        self.bn = BatchNorm2d(c_out, affine)

    def forward(self, x):
        x = self.relu.forward(x)
        self.shape = x.shape
        a = self.conv_1.forward(x)
        b = self.conv_2.forward(x[:, :, 1:, 1:])
        if b.shape[2:] != a.shape[2:]:
            b = np.pad(b, ((0, 0), (0, 0), (0, a.shape[2] - b.shape[2]), (0, a.shape[3] - b.shape[3])))
        self.half = a.shape[1]
        return self.bn.forward(np.concatenate([a, b], axis=1))

    def backward(self, g):
        g = self.bn.backward(g)
        ga, gb = g[:, :self.half], g[:, self.half:]
        gb = gb[:, :, :self.conv_2.x.shape[2] // 2 + self.conv_2.x.shape[2] % 2,
                :self.conv_2.x.shape[3] // 2 + self.conv_2.x.shape[3] % 2]
        gx = self.conv_1.backward(ga)
        gx[:, :, 1:, 1:] += self.conv_2.backward(np.ascontiguousarray(gb))
        return self.relu.backward(gx)


def make_op(pair: CandidatePair, c: int, stride: int, streams: StreamFactory, cfg: OpConfig) -> Module:
    op, rule = pair.op, pair.rule
    if op == "zero":
        return Zero(stride)
    if op in ("max_pool_3x3", "avg_pool_3x3"):
        pool = Pool(op[:3], stride)
        return Sequential(pool, BatchNorm2d(c, False)) if cfg.pool_bn else pool
    if op == "skip_connect":
        if stride == 1:
            return Identity()
        return FactorizedReduce(c, c, rule if rule is not FeedbackRule.NONE else "bp", streams, cfg.affine)
    k = int(op[-1])
    dilation = 2 if op.startswith("dil") else 1
    padding = dilation * (k - 1) // 2
    if rule is FeedbackRule.HEBB:
        conv = HebbianConv2d(c, c, k, stride, padding, dilation, rng=streams.next(),
                             hebbian_scale=cfg.hebbian_scale)
        return Sequential(ReLU(), conv, BatchNorm2d(c, cfg.affine))
    if rule is FeedbackRule.PC:
        conv = PredictiveCodingConv2d(c, c, k, stride, padding, dilation, rng=streams.next(),
                                      prediction_steps=cfg.pc_steps, gating=cfg.pc_gating)
        return Sequential(ReLU(), conv, BatchNorm2d(c, cfg.affine))
    if rule is FeedbackRule.NONE:
        rule = FeedbackRule.BP
    if dilation == 1:
        return SepConv(c, c, k, stride, padding, rule, streams, cfg.affine)
    return DilConv(c, c, k, stride, padding, dilation, rule, streams, cfg.affine)


# --------------------------------------------------------------------------
# mixed edges and cells


class MixedEdge(Module):
    """Softmax-weighted sum of one branch per candidate pair."""

    def __init__(self, c: int, stride: int, pairs, streams: StreamFactory, cfg: OpConfig):
        self.pairs = list(pairs)
        self.branches = ModuleList(make_op(p, c, stride, streams, cfg) for p in self.pairs)

    def forward(self, x, weights):
        self.weights = weights
        self.outs = [b.forward(x) for b in self.branches]
        y = weights[0] * self.outs[0]
        for w, o in zip(weights[1:], self.outs[1:]):
            y = y + w * o
        return y

    def backward(self, g):
        self.dweights = np.array([float((g * o).sum()) for o in self.outs])
        gx = None
        for w, b in zip(self.weights, self.branches):
            if isinstance(b, Zero):
                continue
            gb = b.backward(w * g)
            gx = gb if gx is None else gx + gb
        if gx is None:
            gx = self.branches[0].backward(g)
        return gx


def edge_sources(steps: int):
    """Source node of every edge, ordered node by node."""
    return [j for i in range(steps) for j in range(2 + i)]


class _CellBase(Module):
    def _preprocess(self, c_pp, c_p, c, reduction_prev, adapter_rule, streams, affine):
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, adapter_rule, streams, affine)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, 1, 1, 0, adapter_rule, streams.next(), affine)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, adapter_rule, streams.next(), affine)


class SearchCell(_CellBase):
    def __init__(self, steps, c_pp, c_p, c, reduction, reduction_prev, pairs, streams, cfg: OpConfig,
                 adapter_rule="usf"):
        self.steps, self.reduction = steps, reduction
        self._preprocess(c_pp, c_p, c, reduction_prev, adapter_rule, streams, cfg.affine)
        self.sources = edge_sources(steps)
        self.edges = ModuleList(
            MixedEdge(c, 2 if reduction and src < 2 else 1, pairs, streams, cfg) for src in self.sources)

    def forward(self, s0, s1, weights):
        states = [self.preprocess0.forward(s0), self.preprocess1.forward(s1)]
        e = 0
        for i in range(self.steps):
            acc = None
            for j in range(2 + i):
                out = self.edges[e].forward(states[j], weights[e])
                acc = out if acc is None else acc + out
                e += 1
            states.append(acc)
        self.node_channels = [s.shape[1] for s in states[2:]]
        return np.concatenate(states[2:], axis=1)

    def backward(self, g):
        grads = [None, None] + list(np.split(g, self.steps, axis=1))
        e = len(self.edges)
        for i in reversed(range(self.steps)):
            gi = grads[2 + i]
            for j in reversed(range(2 + i)):
                e -= 1
                gj = self.edges[e].backward(gi)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return self.preprocess0.backward(grads[0]), self.preprocess1.backward(grads[1])

    def edge_dweights(self) -> np.ndarray:
        return np.stack([edge.dweights for edge in self.edges])


class _CellNetwork(Model):
    """Stem, stacked cells with a two-input recurrence, pooled classifier."""

    def _build_stem(self, in_channels, c_stem, stem, streams, stem_rule, affine):
        if stem:
            self.stem = Sequential(Conv2d(in_channels, c_stem, 3, 1, 1, rule=stem_rule, rng=streams.next()),
                                   BatchNorm2d(c_stem, affine))
        else:
            self.stem = Identity()

    def _run_cells(self, x, cell_fn):
        s = self.stem.forward(x)
        s0 = s1 = s
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell_fn(i, cell, s0, s1)
        feat = self.gap.forward(s1)
        return self.classifier.forward(feat)

    def backward(self, g):
        g = self.gap.backward(self.classifier.backward(g))
        n = len(self.cells)
        # grads[k] is the gradient w.r.t. state k; state 0 and 1 are the stem output
        grads = [None] * (n + 2)
        grads[n + 1] = g
        for i in reversed(range(n)):
            g0, g1 = self._cell_backward(i, self.cells[i], grads[i + 2])
            grads[i] = g0 if grads[i] is None else grads[i] + g0
            grads[i + 1] = g1 if grads[i + 1] is None else grads[i + 1] + g1
        return self.stem.backward(grads[0] + grads[1])

    def _cell_backward(self, i, cell, g):
        return cell.backward(g)


def reduction_positions(layers: int) -> tuple[int, ...]:
    """Reduction cells sit at 1/3 and 2/3 of the depth."""
    return tuple(sorted({layers // 3, 2 * layers // 3}))


class SearchNetwork(_CellNetwork):
    def __init__(self, c: int, num_classes: int, layers: int, pairs=None, steps: int = 4,
                 stem_multiplier: int = 3, in_channels: int = 3, seed: int = 0, stem: bool = True,
                 reductions=None, cfg: OpConfig | None = None, stem_rule="bp", adapter_rule="usf",
                 head_rule="usf", alpha_init_scale: float = 1e-3):
        cfg = cfg or OpConfig(affine=False, pool_bn=True)
        self.pairs = parse_pairs(pairs) if pairs is not None else candidate_pairs("strict")
        self.steps = steps
        self.layers = layers
        streams = StreamFactory(seed)
        c_stem = stem_multiplier * c if stem else in_channels
        self._build_stem(in_channels, c_stem, stem, streams, stem_rule, cfg.affine)
        self.reductions = tuple(reduction_positions(layers) if reductions is None else reductions)
        c_pp, c_p, c_cur = c_stem, c_stem, c
        self.cells = ModuleList()
        reduction_prev = False
        for i in range(layers):
            reduction = i in self.reductions
            if reduction:
                c_cur *= 2
            cell = SearchCell(steps, c_pp, c_p, c_cur, reduction, reduction_prev, self.pairs, streams, cfg,
                              adapter_rule)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, steps * c_cur
        self.gap = GlobalAvgPool()
        self.classifier = Linear(c_p, num_classes, head_rule, streams.next())
        n_edges = len(edge_sources(steps))
        arng = RngStream(seed, (2, 0))
        k = len(self.pairs)
        self.alphas_normal = (alpha_init_scale * arng.normal((n_edges, k))).astype(default_dtype())
        self.alphas_reduce = (alpha_init_scale * arng.normal((n_edges, k))).astype(default_dtype())

    # -- architecture parameters -------------------------------------------
    @property
    def has_reduce(self) -> bool:
        return bool(self.reductions)

    @property
    def has_normal(self) -> bool:
        return len(self.reductions) < len(self.cells)

    def arch_parameters(self) -> list[np.ndarray]:
        return [self.alphas_normal, self.alphas_reduce]

    def flat_alphas(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arch_parameters()])

    def set_flat_alphas(self, v: np.ndarray) -> None:
        n = self.alphas_normal.size
        self.alphas_normal[...] = np.asarray(v[:n]).reshape(self.alphas_normal.shape)
        self.alphas_reduce[...] = np.asarray(v[n:]).reshape(self.alphas_reduce.shape)

    def edge_weights(self):
        return softmax(self.alphas_normal, axis=1), softmax(self.alphas_reduce, axis=1)

    def forward(self, x):
        wn, wr = self.edge_weights()
        return self._run_cells(x, lambda i, cell, s0, s1: cell.forward(s0, s1, wr if cell.reduction else wn))

    def alpha_grads(self) -> list[np.ndarray]:
        """dL/dalpha from the mixture weights cached by the last backward."""
        wn, wr = self.edge_weights()
        dn = np.zeros_like(self.alphas_normal)
        dr = np.zeros_like(self.alphas_reduce)
        for cell in self.cells:
            if cell.reduction:
                dr += cell.edge_dweights()
            else:
                dn += cell.edge_dweights()
        out = []
        for p, dp in ((wn, dn), (wr, dr)):
            out.append(p * (dp - (p * dp).sum(axis=1, keepdims=True)))
        return out

    def genotype(self) -> "Genotype":
        return derive_genotype(self.alphas_normal, self.alphas_reduce, self.pairs, self.steps)

    def weight_parameters(self):
        return self.parameters()


def alpha_entropy(alphas) -> float:
    """Mean softmax entropy over all edges."""
    rows = np.concatenate([np.atleast_2d(a) for a in alphas], axis=0)
    p = softmax(rows, axis=1)
    h = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)
    return float(h.mean())


# --------------------------------------------------------------------------
# genotypes


@dataclass(frozen=True)
class Genotype:
    """Two (source, pair) entries per intermediate node for each cell type."""

    normal: tuple
    reduce: tuple
    init_channels: int | None = None
    layers: int | None = None

    def __post_init__(self):
        for name in ("normal", "reduce"):
            entries = tuple((int(s), p if isinstance(p, CandidatePair) else parse_pairs([p])[0])
                            for s, p in getattr(self, name))
            object.__setattr__(self, name, entries)
        if len(self.normal) != len(self.reduce) or len(self.normal) % 2 or not self.normal:
            raise ValueError("genotype needs 2 entries per node in both cells")
        for entries in (self.normal, self.reduce):
            for idx, (src, pair) in enumerate(entries):
                node = idx // 2
                if not 0 <= src < node + 2:
                    raise ValueError(f"node {node} cannot consume state {src}")
                if pair.op == "zero":
                    raise ValueError("genotype cannot contain the zero op")

    @property
    def steps(self) -> int:
        return len(self.normal) // 2

    def to_dict(self) -> dict:
        def enc(entries):
            return [[src, p.op, p.rule.value] for src, p in entries]
        return {"version": 1, "normal": enc(self.normal), "reduce": enc(self.reduce),
                "init_channels": self.init_channels, "layers": self.layers}

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        def dec(rows):
            out = []
            for row in rows:
                if not isinstance(row, (list, tuple)) or len(row) != 3:
                    raise ValueError(f"malformed genotype entry {row!r}")
                src, op, rule = row
                if op not in OPS:
                    raise ValueError(f"unknown operation token {op!r}")
                out.append((int(src), CandidatePair(op, FeedbackRule.parse(rule))))
            return tuple(out)
        return cls(dec(d["normal"]), dec(d["reduce"]), d.get("init_channels"), d.get("layers"))

    def rules(self) -> list[FeedbackRule]:
        return [p.rule for _, p in self.normal + self.reduce]

    def with_pairs(self, normal_pairs, reduce_pairs) -> "Genotype":
        return Genotype(tuple((s, p) for (s, _), p in zip(self.normal, normal_pairs)),
                        tuple((s, p) for (s, _), p in zip(self.reduce, reduce_pairs)),
                        self.init_channels, self.layers)


def _derive_cell(alphas: np.ndarray, pairs, steps: int) -> tuple:
    w = softmax(alphas, axis=1)
    nonzero = np.array([p.op != "zero" for p in pairs])
    if not nonzero.any():
        raise ValueError("candidate list has no op besides zero")
    sources = edge_sources(steps)
    best_pair, strength = [], []
    for e in range(len(sources)):
        masked_logits = np.where(nonzero, alphas[e], -np.inf)
        best_pair.append(int(np.argmax(masked_logits)))  # argmax returns the lowest index on ties
        strength.append(float(np.max(np.where(nonzero, w[e], -np.inf))))
    entries = []
    e0 = 0
    for i in range(steps):
        idx = list(range(e0, e0 + 2 + i))
        chosen = sorted(sorted(idx, key=lambda e: -strength[e])[:2])
        entries.extend((sources[e], pairs[best_pair[e]]) for e in chosen)
        e0 += 2 + i
    return tuple(entries)


def derive_genotype(alphas_normal, alphas_reduce, pairs, steps: int, init_channels=None, layers=None) -> Genotype:
    pairs = parse_pairs(pairs)
    for a in (alphas_normal, alphas_reduce):
        if not np.all(np.isfinite(a)):
            raise ValueError("architecture logits must be finite")
    return Genotype(_derive_cell(np.asarray(alphas_normal), pairs, steps),
                    _derive_cell(np.asarray(alphas_reduce), pairs, steps), init_channels, layers)


# --------------------------------------------------------------------------
# discrete network


class DiscreteCell(_CellBase):
    def __init__(self, entries, c_pp, c_p, c, reduction, reduction_prev, streams, cfg: OpConfig,
                 adapter_rule="usf"):
        self.reduction = reduction
        self.steps = len(entries) // 2
        self._preprocess(c_pp, c_p, c, reduction_prev, adapter_rule, streams, cfg.affine)
        self.sources = [src for src, _ in entries]
        self.pairs = [pair for _, pair in entries]
        self.ops = ModuleList(make_op(pair, c, 2 if reduction and src < 2 else 1, streams, cfg)
                              for src, pair in entries)

    def forward(self, s0, s1, drop_prob=0.0, rng=None):
        states = [self.preprocess0.forward(s0), self.preprocess1.forward(s1)]
        self.masks = []
        for i in range(self.steps):
            acc = None
            for e in (2 * i, 2 * i + 1):
                out = self.ops[e].forward(states[self.sources[e]])
                mask = None
                if self.training and drop_prob > 0 and not isinstance(self.ops[e], Identity):
                    out, mask = drop_path(out, drop_prob, rng, True, return_mask=True)
                self.masks.append(mask)
                acc = out if acc is None else acc + out
            states.append(acc)
        return np.concatenate(states[2:], axis=1)

    def backward(self, g):
        grads = [None, None] + list(np.split(g, self.steps, axis=1))
        for i in reversed(range(self.steps)):
            for e in (2 * i + 1, 2 * i):
                ge = grads[2 + i]
                if self.masks[e] is not None:
                    ge = ge * self.masks[e]
                gs = self.ops[e].backward(ge)
                src = self.sources[e]
                grads[src] = gs if grads[src] is None else grads[src] + gs
        g0 = self.preprocess0.backward(grads[0]) if grads[0] is not None else None
        g1 = self.preprocess1.backward(grads[1]) if grads[1] is not None else None
        return g0, g1


class DiscreteNetwork(_CellNetwork):
    def __init__(self, genotype: Genotype, c: int, layers: int, num_classes: int, in_channels: int = 3,
                 stem_multiplier: int = 3, seed: int = 0, drop_path_prob: float = 0.0,
                 stem_rule="bp", adapter_rule="usf", head_rule="usf", cfg: OpConfig | None = None,
                 reductions=None):
        if layers < 1:
            raise ValueError("layers must be >= 1")
        cfg = cfg or OpConfig(affine=True)
        self.genotype = genotype
        self.drop_path_prob = drop_path_prob
        streams = StreamFactory(seed)
        self.drop_rng = RngStream(seed, (3, 0))
        c_stem = stem_multiplier * c
        self._build_stem(in_channels, c_stem, True, streams, stem_rule, cfg.affine)
        self.reductions = tuple(reduction_positions(layers) if reductions is None else reductions)
        c_pp, c_p, c_cur = c_stem, c_stem, c
        self.cells = ModuleList()
        reduction_prev = False
        for i in range(layers):
            reduction = i in self.reductions
            if reduction:
                c_cur *= 2
            entries = genotype.reduce if reduction else genotype.normal
            self.cells.append(DiscreteCell(entries, c_pp, c_p, c_cur, reduction, reduction_prev, streams,
                                           cfg, adapter_rule))
            reduction_prev = reduction
            c_pp, c_p = c_p, genotype.steps * c_cur
        self.gap = GlobalAvgPool()
        self.classifier = Linear(c_p, num_classes, head_rule, streams.next())

    def forward(self, x):
        p = self.drop_path_prob if self.training else 0.0
        return self._run_cells(x, lambda i, cell, s0, s1: cell.forward(s0, s1, p, self.drop_rng))

    def own_streams(self):
        return {"drop_rng": self.drop_rng}

    def _cell_backward(self, i, cell, g):
        g0, g1 = cell.backward(g)
        if g0 is None:
            g0 = np.zeros_like(g1)
        if g1 is None:
            g1 = np.zeros_like(g0)
        return g0, g1


def build_discrete_network(genotype: Genotype, init_channels: int, layers: int, num_classes: int,
                           **kwargs) -> DiscreteNetwork:
    if layers < 2:
        raise ValueError("layers must be >= 2")
    return DiscreteNetwork(genotype, init_channels, layers, num_classes, **kwargs)


def declared_rules(model: Module) -> dict:
    """Map every feedback-carrying layer to the rule it was built with."""
    out = {}
    for _, m in model.named_modules():
        if isinstance(m, (Conv2d, Linear)):
            out[m] = m.rule
        elif isinstance(m, HebbianConv2d):
            out[m] = FeedbackRule.HEBB
        elif isinstance(m, PredictiveCodingConv2d):
            out[m] = FeedbackRule.PC
    return out
