"""Training harness: momentum SGD on rule-produced pseudo-gradients."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .layers import Module, drop_path  # noqa: F401  (drop_path is part of this module's surface)
from .tensor import NumericalError, RngStream, softmax_cross_entropy

TRAIN_LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "grad_variance",
                     "wall_seconds")


@dataclass
class TrainConfig:
    lr: float = 0.025
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 3e-4
    epochs: int = 600
    batch_size: int = 96
    clip_norm: float = 5.0
    cutout_length: int = 16
    drop_path_prob: float = 0.2
    schedule: str = "cosine"
    label_smoothing: float = 0.0
    init_channels: int = 36
    layers: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "momentum", "weight_decay", "clip_norm", "label_smoothing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.drop_path_prob < 1.0:
            raise ValueError("drop_path_prob must be in [0, 1)")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def updated(self, **kw) -> "TrainConfig":
        known = {f.name for f in fields(self)}
        bad = set(kw) - known
        if bad:
            raise ValueError(f"unknown config keys {sorted(bad)}")
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.schedule == "cosine":
        return cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0
    return cfg.lr * (1.0 - epoch / cfg.epochs)


def cutout(image: np.ndarray, length: int, rng: RngStream) -> np.ndarray:
    """Zero one length x length square centred uniformly on the image (clipped)."""
    if length < 0:
        raise ValueError("cutout length must be >= 0")
    if length == 0:
        return image
    h, w = image.shape[-2:]
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = max(cy - length // 2, 0), min(cy + length // 2 + length % 2, h)
    x0, x1 = max(cx - length // 2, 0), min(cx + length // 2 + length % 2, w)
    out = image.copy()
    out[..., y0:y1, x0:x1] = 0.0
    return out


def cutout_batch(x: np.ndarray, length: int, rng: RngStream) -> np.ndarray:
    if length == 0:
        return x
    return np.stack([cutout(img, length, rng) for img in x])


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if math.isfinite(max_norm) and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class SGD:
    """Momentum SGD with coupled weight decay and optional Nesterov lookahead.

    Buffers are keyed by parameter name so that they survive checkpointing.
    """

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0, nesterov=False, clip_norm=math.inf):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.clip_norm = clip_norm
        self.buffers: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, model: Module, cfg: TrainConfig) -> "SGD":
        return cls(model.named_parameters(), cfg.momentum, cfg.weight_decay, cfg.nesterov, cfg.clip_norm)

    def pseudo_gradients(self):
        return [(n, p) for n, p in self.params if p.grad is not None]

    def step(self, lr: float):
        """Apply one update; returns the pre-clip pseudo-gradient list and its norm."""
        live = self.pseudo_gradients()
        raw = [p.grad for _, p in live]
        clipped, norm = clip_by_global_norm(raw, self.clip_norm)
        for (name, p), g in zip(live, clipped):
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            if self.momentum:
                prev = self.buffers.get(name)
                v = g.copy() if prev is None else self.momentum * prev + g
                self.buffers[name] = v
                d = g + self.momentum * v if self.nesterov else v
            else:
                d = g
            p.value -= lr * d
        return raw, norm


def train_step(model: Module, batch, cfg: TrainConfig, opt: SGD, lr: float, hook=None):
    """One forward / rule-driven backward / SGD update. Returns (loss, accuracy)."""
    x, y = batch
    model.train()
    logits = model.forward(x)
    loss, err = softmax_cross_entropy(logits, y, cfg.label_smoothing)
    if not math.isfinite(loss):
        raise NumericalError("non-finite training loss")
    model.zero_grad()
    model.backward(err)
    raw, _ = opt.step(lr)
    if hook is not None:
        hook.on_batch(raw)
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def evaluate(model: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """Top-1 accuracy and mean cross-entropy, in eval mode."""
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was = model.training
    model.eval()
    correct, total_loss = 0, 0.0
    try:
        for i in range(0, n, batch_size):
            logits = model.forward(x[i:i + batch_size])
            yb = y[i:i + batch_size]
            loss, _ = softmax_cross_entropy(logits, yb)
            total_loss += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
    finally:
        model.train(was)
    return correct / n, total_loss / n


class CancelToken:
    """Cooperative cancellation checked at batch boundaries."""

    def __init__(self):
        self.cancelled = False

    def cancel(self, *_):
        self.cancelled = True


class Trainer:
    """Epoch loop with deterministic batch order, logging and checkpoint hooks."""

    def __init__(self, model: Module, cfg: TrainConfig, seed: int | None = None):
        self.model = model
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        self.opt = SGD.from_config(model, cfg)
        self.order_rng = RngStream(seed, (4, 0))
        self.aug_rng = RngStream(seed, (5, 0))
        self.epoch = 0
        self.history: list[dict] = []

    def streams(self) -> dict[str, RngStream]:
        return {"trainer.order_rng": self.order_rng, "trainer.aug_rng": self.aug_rng}

    def run_epoch(self, x, y, hook=None, cancel: CancelToken | None = None):
        cfg = self.cfg
        lr = lr_at_epoch(cfg, self.epoch)
        if hasattr(self.model, "drop_path_prob"):
            self.model.drop_path_prob = cfg.drop_path_prob
        order = self.order_rng.permutation(len(y))
        losses, accs, sizes = [], [], []
        for i in range(0, len(y), cfg.batch_size):
            if cancel is not None and cancel.cancelled:
                break
            idx = order[i:i + cfg.batch_size]
            xb = cutout_batch(x[idx], cfg.cutout_length, self.aug_rng)
            loss, acc = train_step(self.model, (xb, y[idx]), cfg, self.opt, lr, hook)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(idx))
        if not sizes:
            return lr, float("nan"), float("nan")
        w = np.asarray(sizes, dtype=float)
        return lr, float(np.dot(losses, w) / w.sum()), float(np.dot(accs, w) / w.sum())

    def fit(self, x, y, x_val=None, y_val=None, log_path=None, hook=None, cancel=None,
            on_epoch_end=None, until_epoch: int | None = None):
        stop = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        writer, fh = None, None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists() or self.epoch == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS)
            if new:
                writer.writeheader()
        try:
            while self.epoch < stop:
                t0 = time.perf_counter()
                lr, tl, ta = self.run_epoch(x, y, hook, cancel)
                vl = va = float("nan")
                if x_val is not None and len(y_val):
                    va, vl = evaluate(self.model, x_val, y_val)
                gv = hook.on_epoch_end(self.epoch) if hook is not None else float("nan")
                row = {"epoch": self.epoch, "lr": lr, "train_loss": tl, "train_acc": ta, "val_loss": vl,
                       "val_acc": va, "grad_variance": gv, "wall_seconds": time.perf_counter() - t0}
                self.history.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if cancel is not None and cancel.cancelled:
                    break
                self.epoch += 1
                if on_epoch_end is not None:
                    on_epoch_end(self)
        finally:
            if fh is not None:
                fh.close()
        return self.history
