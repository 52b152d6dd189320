"""Shared fixtures for the property tests and the acceptance run."""
import functools

import numpy as np

from bionas import rules
from bionas.models import MLP, SmallConvNet
from bionas.rules import FeedbackRule, compute_feedback_matrix
from bionas.tensor import RngStream, softmax_cross_entropy


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def bp_equivalence_error(seed=0):
    """Worst relative error between BP pseudo-gradients and central differences, per parameter tensor."""
    rng = np.random.default_rng(seed)
    net = SmallConvNet(3, 4, 6, 3, ("bp", "bp", "bp"), seed=seed)
    x, y = rng.normal(size=(4, 3, 6, 6)), np.array([0, 1, 2, 1])
    loss = lambda: softmax_cross_entropy(net.forward(x), y)[0]
    net.zero_grad()
    net.backward(softmax_cross_entropy(net.forward(x), y)[1])
    worst = 0.0
    for _, p in net.named_parameters():
        fd = numeric_grad(loss, p.value)
        worst = max(worst, float(np.abs(p.grad - fd).max() / max(np.abs(fd).max(), 1e-12)))
    return worst, net.num_parameters()


def sign_concordance_run(rule, steps=50, lr=0.05, seed=0):
    """Count (step, layer) pairs where sign(B) != sign(W) after each update of a 3-layer net."""
    rng = RngStream(seed, (20, 0))
    net = MLP([6, 8, 8, 3], [rule] * 3, seed=seed)
    x, y = rng.normal(size=(16, 6)), rng.integers(0, 3, size=16)
    violations = checks = 0
    for _ in range(steps):
        net.zero_grad()
        net.backward(softmax_cross_entropy(net.forward(x), y)[1])
        for p in net.parameters():
            p.value -= lr * p.grad
        for layer in net.layers:
            B = compute_feedback_matrix(rule, layer.weight.value, layer.feedback)
            checks += 1
            violations += int(not np.array_equal(np.sign(B), np.sign(layer.weight.value)))
    return violations, checks


def fa_alignment_trace(seed=0, steps=500, lr=0.01, din=10, hidden=20, dout=5, n=64):
    """Angle in degrees between FA and BP hidden-layer deltas along an FA run on linear regression."""
    data = RngStream(seed, (19, 0))
    X = data.normal(size=(n, din))
    T = X @ data.normal(size=(din, dout)) / np.sqrt(din)
    net = MLP([din, hidden, dout], [FeedbackRule.FA, FeedbackRule.FA], seed=seed, linear=True, bias=False)
    angles = []
    for _ in range(steps):
        e = (net.forward(X) - T) / n
        net.zero_grad()
        with rules.exact_gradients():
            net.backward(e)
        d_bp = net.layers[0].weight.grad.copy()
        net.zero_grad()
        net.backward(e)
        d_fa = net.layers[0].weight.grad
        cos = float((d_fa * d_bp).sum() / (np.linalg.norm(d_fa) * np.linalg.norm(d_bp)))
        angles.append(float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))))
        for p in net.parameters():
            p.value -= lr * p.grad
    return angles


# a hand-written mixed-rule genotype standing in for a searched one in the attack and analysis tests
DESK_GENOTYPE_DICT = {
    "version": 1,
    "normal": [[0, "sep_conv_3x3", "usf"], [1, "skip_connect", "frsf"], [0, "dil_conv_3x3", "brsf"],
               [2, "max_pool_3x3", "none"]],
    "reduce": [[0, "sep_conv_3x3", "fa"], [1, "avg_pool_3x3", "none"], [0, "skip_connect", "usf"],
               [2, "dil_conv_3x3", "frsf"]],
    "init_channels": 4, "layers": 3,
}


@functools.lru_cache(maxsize=None)
def trained_desk_model():
    """(pixel-space model, train set, test set) after six epochs on the desk stripe task."""
    from bionas.experiments import desk_task, pixel_space, train_genotype
    from bionas.supernet import Genotype
    from bionas.trainer import TrainConfig

    train, test = desk_task(3, 100, 8, 0.1, seed=0)
    cfg = TrainConfig(lr=0.05, epochs=6, batch_size=32, cutout_length=0, drop_path_prob=0.0, init_channels=4,
                      layers=3)
    out = train_genotype(Genotype.from_dict(DESK_GENOTYPE_DICT), cfg, train, test, seed=0)
    return pixel_space(out.model, train), train, test


def resume_mismatch(tmp_dir, epochs: int = 4, split: int = 2) -> int:
    """Number of tensors differing between an uninterrupted run and one checkpointed at `split` and resumed.

    Drop path and cutout are switched on so the model and trainer rng streams matter.
    """
    from bionas.data import gen_synthetic
    from bionas.persistence import collect_state, load_checkpoint, save_checkpoint
    from bionas.supernet import Genotype, build_discrete_network
    from bionas.trainer import TrainConfig, Trainer

    ds = gen_synthetic(3, 20, 8, 0.1, seed=0)
    x = ds.normalized()
    cfg = TrainConfig(lr=0.05, epochs=epochs, batch_size=16, cutout_length=3, drop_path_prob=0.2, init_channels=4,
                      layers=3)
    g = Genotype.from_dict(DESK_GENOTYPE_DICT)

    def fresh():
        m = build_discrete_network(g, 4, 3, 3, in_channels=3, seed=0, drop_path_prob=0.2)
        return m, Trainer(m, cfg, seed=0)

    m1, t1 = fresh()
    t1.fit(x, ds.labels)
    m2, t2 = fresh()
    t2.fit(x, ds.labels, until_epoch=split)
    path = f"{tmp_dir}/mid.bin"
    save_checkpoint(path, m2, t2)
    m3, t3 = fresh()
    load_checkpoint(path, m3, t3)
    t3.fit(x, ds.labels)
    a, _, _ = collect_state(m1, t1)
    b, _, _ = collect_state(m3, t3)
    if a.keys() != b.keys():
        return len(a.keys() ^ b.keys())
    return sum(not np.array_equal(a[k], b[k]) for k in a)
