"""Adversarial attacks in [0, 1] pixel space with budget checks on every iterate.

White-box attacks query exact input gradients whatever rule trained the
model. The black-box attacks only ever see a :class:`PredictOnly` oracle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Model
from .tensor import NumericalError, RngStream, softmax

ATTACKS = ("fgsm", "pgd", "tpgd", "apgd", "one_pixel", "square", "transfer")
ATTACK_CSV_COLUMNS = ("attack", "epsilon", "steps", "clean_acc", "robust_acc", "n_samples", "seed")
_TOL = 1e-12


class BudgetViolation(AssertionError):
    pass


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.35
    alpha_step: float = 2 / 255
    steps: int = 10
    restarts: int = 1
    targeted: bool = False
    random_start: bool = True
    pixels: int = 1
    de_population: int = 10
    de_steps: int = 10
    queries: int = 1000

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0 or self.alpha_step < 0:
            raise ValueError("epsilon and alpha_step must be >= 0")
        if self.steps < 0 or self.restarts < 1 or self.pixels < 1 or self.queries < 1:
            raise ValueError("invalid attack iteration settings")

    @classmethod
    def preset(cls, kind: str) -> "AttackConfig":
        """Default parameters for each attack."""
        table = {
            "fgsm": dict(epsilon=0.35, steps=1),
            "pgd": dict(epsilon=0.35, alpha_step=2 / 255, steps=10, random_start=True),
            "tpgd": dict(epsilon=8 / 255, alpha_step=2 / 255, steps=7, targeted=True, random_start=True),
            "apgd": dict(epsilon=8 / 255, steps=50, restarts=1),
            "one_pixel": dict(epsilon=1.0, pixels=1, de_population=10, de_steps=10, steps=10),
            "square": dict(epsilon=8 / 255, queries=1000, steps=1000),
            "transfer": dict(epsilon=8 / 255, steps=1),
        }
        return cls(kind=kind, **table[kind])


@dataclass
class AttackResult:
    adversarial: np.ndarray
    clean_acc: float
    robust_acc: float
    flipped: np.ndarray


class PredictOnly:
    """Logit oracle for black-box attacks; it exposes no gradient path."""

    __slots__ = ("_fn", "queries")

    def __init__(self, model: Model):
        predict = model.predict
        self._fn = lambda x: np.array(predict(x), copy=True)
        self.queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.queries += len(x)
        return self._fn(x)


def check_linf(x0: np.ndarray, adv: np.ndarray, eps: float) -> None:
    if adv.min() < -_TOL or adv.max() > 1 + _TOL:
        raise BudgetViolation("adversarial input left [0, 1]")
    dev = float(np.abs(adv - x0).max()) if adv.size else 0.0
    if dev > eps + 1e-9:
        raise BudgetViolation(f"L-inf deviation {dev} exceeds epsilon {eps}")


def check_l0(x0: np.ndarray, adv: np.ndarray, k: int) -> None:
    if adv.min() < -_TOL or adv.max() > 1 + _TOL:
        raise BudgetViolation("adversarial input left [0, 1]")
    changed = np.any(adv != x0, axis=1).reshape(len(x0), -1).sum(axis=1)
    if np.any(changed > k):
        raise BudgetViolation(f"{int(changed.max())} pixels changed, budget {k}")


def _project(x0, x, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _grad(model: Model, x, y):
    _, g = model.input_gradient(x, y)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite input gradient")
    return g


def _per_sample_loss(logits, y):
    p = softmax(logits, axis=1)
    return -np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))


def fgsm(model: Model, x, y, epsilon: float = 0.35) -> np.ndarray:
    adv = np.clip(x + epsilon * np.sign(_grad(model, x, y)), 0.0, 1.0)
    check_linf(x, adv, epsilon)
    return adv


def random_targets(y, num_classes: int, rng: RngStream) -> np.ndarray:
    """A uniformly drawn class different from each true label."""
    shift = rng.integers(1, num_classes, size=len(y))
    return (np.asarray(y) + shift) % num_classes


def pgd(model: Model, x, y, cfg: AttackConfig, rng: RngStream | None = None, targets=None) -> np.ndarray:
    """L-inf PGD; with ``cfg.targeted`` it descends the loss of ``targets``."""
    if cfg.steps < 1:
        raise ValueError("pgd needs at least one step")
    eps, a = cfg.epsilon, cfg.alpha_step
    if cfg.targeted and targets is None:
        if rng is None:
            raise ValueError("targeted pgd needs targets or an rng")
        targets = random_targets(y, model.predict(x[:1]).shape[1], rng)
    adv = x.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random start needs an rng")
        adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    check_linf(x, adv, eps)
    for _ in range(cfg.steps):
        if cfg.targeted:
            adv = adv - a * np.sign(_grad(model, adv, targets))
        else:
            adv = adv + a * np.sign(_grad(model, adv, y))
        adv = _project(x, adv, eps)
        check_linf(x, adv, eps)
    return adv


def apgd_checkpoints(steps: int) -> list[int]:
    """Iterations at which the step size may be halved."""
    p = [0.0, 0.22]
    while p[-1] < 1.0:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(math.ceil(q * steps)) for q in p if q <= 1.0})


def apgd(model: Model, x, y, epsilon: float = 8 / 255, steps: int = 50, restarts: int = 1,
         rng: RngStream | None = None, rho: float = 0.75, momentum: float = 0.75) -> np.ndarray:
    """Auto-PGD on cross-entropy: momentum steps, checkpoint step halving, best iterate kept."""
    if steps < 2:
        raise ValueError("apgd needs at least two steps")
    rng = rng or RngStream(0, (12, 0))
    n = len(y)
    shape = (n,) + (1,) * (x.ndim - 1)
    best_adv, best_loss = x.copy(), np.full(n, -np.inf)
    if epsilon == 0:
        return x.copy()
    checks = set(apgd_checkpoints(steps)[1:])
    for _ in range(restarts):
        t = rng.uniform(-1.0, 1.0, size=x.shape)
        t_max = np.abs(t).reshape(n, -1).max(axis=1).reshape(shape)
        x_k = _project(x, x + epsilon * t / np.maximum(t_max, 1e-12), epsilon)
        eta = np.full(shape, 2.0 * epsilon)

        def loss_grad(z):
            logits, g = model.logits_and_input_gradient(z, y)
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite input gradient")
            return _per_sample_loss(logits, y), g

        f_k, g_k = loss_grad(x_k)
        f_max, x_max = f_k.copy(), x_k.copy()
        x_prev = x_k
        x_next = _project(x, x_k + eta * np.sign(g_k), epsilon)
        improved = np.zeros(n)
        last_check, eta_at_check, fmax_at_check = 0, eta.copy(), f_max.copy()
        for k in range(1, steps):
            check_linf(x, x_next, epsilon)
            f_next, g_next = loss_grad(x_next)
            improved += f_next > f_k
            better = f_next > f_max
            f_max = np.where(better, f_next, f_max)
            x_max = np.where(better.reshape(shape), x_next, x_max)
            x_prev, x_k, f_k, g_k = x_k, x_next, f_next, g_next
            if k in checks:
                h = k - last_check
                cond1 = improved < rho * h
                cond2 = (eta_at_check.ravel() == eta.ravel()) & (fmax_at_check == f_max)
                halve = (cond1 | cond2).reshape(shape)
                eta = np.where(halve, eta / 2.0, eta)
                x_k = np.where(halve, x_max, x_k)
                if halve.any():
                    f_k = np.where(halve.ravel(), f_max, f_k)
                    _, g_k = loss_grad(x_k)
                improved[:] = 0
                last_check, eta_at_check, fmax_at_check = k, eta.copy(), f_max.copy()
            z = _project(x, x_k + eta * np.sign(g_k), epsilon)
            x_next = _project(x, x_k + momentum * (z - x_k) + (1 - momentum) * (x_k - x_prev), epsilon)
        f_last, _ = loss_grad(x_next)
        better = f_last > f_max
        f_max = np.where(better, f_last, f_max)
        x_max = np.where(better.reshape(shape), x_next, x_max)
        upd = f_max > best_loss
        best_loss = np.where(upd, f_max, best_loss)
        best_adv = np.where(upd.reshape(shape), x_max, best_adv)
    check_linf(x, best_adv, epsilon)
    return best_adv


def _apply_pixels(img: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    c = img.shape[0]
    out = img.copy()
    for j in range(k):
        r, col = int(cand[j * (2 + c)]), int(cand[j * (2 + c) + 1])
        out[:, r, col] = cand[j * (2 + c) + 2:(j + 1) * (2 + c)]
    return out


def one_pixel(oracle, x, y, k: int = 1, pop: int = 10, de_steps: int = 10, rng: RngStream | None = None,
              F: float = 0.5, CR: float = 0.9) -> np.ndarray:
    """DE/rand/1/bin over k (row, col, channel values) tuples, minimising true-class probability."""
    if not isinstance(oracle, PredictOnly):
        oracle = PredictOnly(oracle)
    n, c, h, w = x.shape
    if k < 1 or k > h * w:
        raise ValueError("need 1 <= k <= number of pixels")
    if pop < 4:
        raise ValueError("DE/rand/1 needs a population of at least 4")
    rng = rng or RngStream(0, (13, 0))
    dim = k * (2 + c)
    lo = np.tile(np.r_[0.0, 0.0, np.zeros(c)], k)
    hi = np.tile(np.r_[h - 1, w - 1, np.ones(c)], k)
    coord = np.tile(np.r_[True, True, np.zeros(c, bool)], k)

    def fix(v):
        v = np.clip(v, lo, hi)
        return np.where(coord, np.round(v), v)

    def fitness(img, yi, cands):
        batch = np.stack([_apply_pixels(img, cd, k) for cd in cands])
        return softmax(oracle(batch), axis=1)[:, yi]

    out = x.copy()
    for i in range(n):
        P = lo + rng.random((pop, dim)) * (hi - lo)
        P[:, coord] = rng.integers(0, hi[coord].astype(int) + 1, size=(pop, int(coord.sum())))
        fit = fitness(x[i], y[i], P)
        for _ in range(de_steps):
            trial = np.empty_like(P)
            for j in range(pop):
                a, b, cc = rng.permutation(np.delete(np.arange(pop), j))[:3]
                mutant = P[a] + F * (P[b] - P[cc])
                cross = rng.random(dim) < CR
                cross[int(rng.integers(0, dim))] = True
                trial[j] = fix(np.where(cross, mutant, P[j]))
            tf = fitness(x[i], y[i], trial)
            keep = tf <= fit
            P[keep], fit[keep] = trial[keep], tf[keep]
        out[i] = _apply_pixels(x[i], P[int(np.argmin(fit))], k)
    check_l0(x, out, k)
    return out


def margin(logits: np.ndarray, y) -> np.ndarray:
    """True-class logit minus the best other logit; negative means misclassified."""
    idx = np.arange(len(y))
    true = logits[idx, y]
    other = logits.copy()
    other[idx, y] = -np.inf
    return true - other.max(axis=1)


def square_fraction(p0: float, it: int, n_iters: int) -> float:
    """Patch area fraction: p0 halved at the standard fractions of a 10000-query run."""
    it = int(it / n_iters * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128),
                       (8000, 256)):
        if it <= bound:
            return p0 / div
    return p0 / 512


def square_attack(oracle, x, y, epsilon: float = 8 / 255, queries: int = 1000, rng: RngStream | None = None,
                  p0: float = 0.05) -> np.ndarray:
    """L-inf square attack; accepts a proposal only when the margin strictly decreases."""
    if queries < 1:
        raise ValueError("queries must be >= 1")
    if not isinstance(oracle, PredictOnly):
        oracle = PredictOnly(oracle)
    rng = rng or RngStream(0, (14, 0))
    n, c, h, w = x.shape
    stripes = np.where(rng.random((n, c, 1, w)) < 0.5, -epsilon, epsilon)
    adv = np.clip(x + stripes, 0.0, 1.0)
    m = margin(oracle(adv), y)
    check_linf(x, adv, epsilon)
    for it in range(queries - 1):
        active = np.flatnonzero(m > 0)
        if active.size == 0:
            break
        p = square_fraction(p0, it, queries)
        s = int(math.ceil(0.8 * math.sqrt(h * w * p)))
        s = min(max(s, 1), h - 1 if h > 1 else 1)
        prop = adv[active].copy()
        for j, i in enumerate(active):
            r0 = int(rng.integers(0, h - s + 1))
            c0 = int(rng.integers(0, w - s + 1))
            signs = np.where(rng.random((c, 1, 1)) < 0.5, -epsilon, epsilon)
            prop[j, :, r0:r0 + s, c0:c0 + s] = np.clip(x[i, :, r0:r0 + s, c0:c0 + s] + signs, 0.0, 1.0)
        m_new = margin(oracle(prop), y[active])
        accept = m_new < m[active]
        adv[active[accept]] = prop[accept]
        m[active[accept]] = m_new[accept]
        check_linf(x, adv, epsilon)
    return adv


def transfer_attack(surrogate: Model, target: Model, x, y, epsilon: float = 8 / 255):
    """FGSM examples crafted on the surrogate, scored on the target. Returns (robust_acc, x_adv)."""
    t_oracle = PredictOnly(target)
    probe_t = t_oracle(x[:1])
    probe_s = surrogate.predict(x[:1])
    if probe_t.shape[1] != probe_s.shape[1]:
        raise ValueError(f"surrogate predicts {probe_s.shape[1]} classes, target {probe_t.shape[1]}")
    adv = fgsm(surrogate, x, y, epsilon)
    return float((t_oracle(adv).argmax(1) == y).mean()), adv


def accuracy(model: Model, x, y) -> float:
    return float((model.predict(x).argmax(1) == y).mean())


def run_attack(model: Model, x, y, cfg: AttackConfig, rng: RngStream | None = None,
               surrogate: Model | None = None) -> AttackResult:
    rng = rng or RngStream(0, (15, 0))
    clean_pred = model.predict(x).argmax(1)
    kind = cfg.kind
    if kind == "fgsm":
        adv = fgsm(model, x, y, cfg.epsilon)
    elif kind in ("pgd", "tpgd"):
        adv = pgd(model, x, y, cfg, rng)
    elif kind == "apgd":
        adv = apgd(model, x, y, cfg.epsilon, cfg.steps, cfg.restarts, rng)
    elif kind == "one_pixel":
        adv = one_pixel(PredictOnly(model), x, y, cfg.pixels, cfg.de_population, cfg.de_steps, rng)
    elif kind == "square":
        adv = square_attack(PredictOnly(model), x, y, cfg.epsilon, cfg.queries, rng)
    else:
        if surrogate is None:
            raise ValueError("transfer attack needs a surrogate model")
        _, adv = transfer_attack(surrogate, model, x, y, cfg.epsilon)
    adv_pred = model.predict(adv).argmax(1)
    return AttackResult(adv, float((clean_pred == y).mean()), float((adv_pred == y).mean()),
                        adv_pred != clean_pred)


def write_attack_rows(path, rows) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ATTACK_CSV_COLUMNS)
        if new:
            wr.writeheader()
        for r in rows:
            wr.writerow(r)
