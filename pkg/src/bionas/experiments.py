"""End-to-end pipelines shared by the CLI and the scripts in scripts/."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (GradVarianceTracker, reassign_rules, same_topology, single_rule_variant,
                       summarize)
from .config import load_preset
from .data import Dataset, gen_synthetic
from .models import NormalizedModel
from .search import SearchConfig, run_search
from .supernet import Genotype, build_discrete_network
from .tensor import RngStream
from .trainer import TrainConfig, Trainer, evaluate


# search settings for the 8x8 synthetic task: a three-cell supernet with two intermediate nodes per cell
DESK_SEARCH = dict(epochs=4, batch_size=32, eta_w=0.05, eta_alpha=0.05, init_channels=4, layers=3, steps=2)


@dataclass
class TrainOutcome:
    model: object
    trainer: Trainer
    test_acc: float
    test_loss: float


def desk_task(classes: int = 3, per_class: int = 100, side: int = 8, noise: float = 0.1, seed: int = 0):
    """Train and test splits of the synthetic stripe task drawn from independent seeds."""
    train = gen_synthetic(classes, per_class, side, noise, seed=seed)
    test = gen_synthetic(classes, max(per_class // 2, 1), side, noise, seed=seed + 1000)
    test.mean, test.std = train.mean, train.std
    return train, test


def normalize_with(ds: Dataset, ref: Dataset) -> np.ndarray:
    m = np.asarray(ref.mean).reshape(1, -1, 1, 1)
    s = np.asarray(ref.std).reshape(1, -1, 1, 1)
    return (ds.images - m) / np.where(s > 0, s, 1.0)


def train_genotype(genotype: Genotype, cfg: TrainConfig, train: Dataset, test: Dataset, seed: int = 0,
                   hook=None, log_path=None, cancel=None, model_kw=None) -> TrainOutcome:
    num_classes = max(train.num_classes, test.num_classes)
    model = build_discrete_network(genotype, cfg.init_channels, cfg.layers, num_classes,
                                   in_channels=train.images.shape[1], seed=seed, drop_path_prob=cfg.drop_path_prob,
                                   **(model_kw or {}))
    trainer = Trainer(model, cfg, seed=seed)
    xt, xv = normalize_with(train, train), normalize_with(test, train)
    trainer.fit(xt, train.labels, xv, test.labels, log_path=log_path, hook=hook, cancel=cancel)
    acc, loss = evaluate(model, xv, test.labels)
    return TrainOutcome(model, trainer, acc, loss)


def pixel_space(model, train: Dataset) -> NormalizedModel:
    return NormalizedModel(model, train.mean, train.std)


def gradvar_experiment(genotype: Genotype, cfg: TrainConfig, train: Dataset, test: Dataset, out_dir,
                       rules=("fa", "usf", "brsf", "frsf"), seed: int = 0, audit_tol: float = 1e-10) -> dict:
    """Train the mixed genotype and each single-rule variant, one gradvar CSV per run.

    Every run audits the streamed variance against the two-pass statistic and
    fails if they disagree by more than ``audit_tol``. Whether the mixed run's
    median variance is lower is recorded, not enforced.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = {"mixed": genotype}
    variants.update({r: single_rule_variant(genotype, r) for r in rules})
    report = {}
    for name, g in variants.items():
        tracker = GradVarianceTracker(audit=True)
        kw = {} if name == "mixed" else {"adapter_rule": name, "head_rule": name}
        res = train_genotype(g, cfg, train, test, seed=seed, hook=tracker,
                             log_path=out_dir / f"train_{name}.csv", model_kw=kw)
        if not tracker.audit_error <= audit_tol:
            raise AssertionError(f"{name}: streaming variance off two-pass by {tracker.audit_error:.3g}")
        tracker.write_csv(out_dir / f"gradvar_{name}.csv")
        v = [val for _, val in tracker.log]
        report[name] = {"median_variance": float(np.median(v)), "variances": v, "test_acc": res.test_acc,
                        "audit_error": tracker.audit_error}
    singles = [report[r]["median_variance"] for r in rules]
    report["mixed_lower_than_all_single"] = bool(report["mixed"]["median_variance"] < min(singles))
    report["mixed_lower_than_median_single"] = bool(report["mixed"]["median_variance"] < float(np.median(singles)))
    return report


def reassign_experiment(genotype: Genotype, cfg: TrainConfig, train: Dataset, test: Dataset, n: int = 5,
                        mode: str = "shuffle", seed: int = 0) -> dict:
    """Retrain n genotypes whose rules were reassigned with seeds 1..n."""
    rows = []
    for k in range(1, n + 1):
        g = reassign_rules(genotype, RngStream(k, (17, 0)), mode)
        if not same_topology(g, genotype):
            raise AssertionError("rule reassignment changed the topology")
        res = train_genotype(g, cfg, train, test, seed=seed)
        rows.append({"variant": k, "rules": [p.token for _, p in g.normal + g.reduce], "test_acc": res.test_acc})
    base = train_genotype(genotype, cfg, train, test, seed=seed)
    return {"mode": mode, "searched_acc": base.test_acc, "variants": rows,
            "spread": summarize([r["test_acc"] for r in rows])}


def desk_end_to_end(seed: int = 0, engine: str = "darts", out_dir=None) -> dict:
    """Search on the synthetic stripe task, retrain the derived genotype with desk-eval, evaluate."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    train, test = desk_task(seed=seed)
    scfg = SearchConfig(engine=engine, seed=seed, **DESK_SEARCH)
    res = run_search(train.normalized(), train.labels, scfg,
                     log_path=out_dir / "search_log.csv" if out_dir is not None else None)
    t_search = time.perf_counter() - t0
    cfg = load_preset("desk-eval").updated(seed=seed)
    out = train_genotype(res.genotype, cfg, train, test, seed=seed,
                         log_path=out_dir / "train_log.csv" if out_dir is not None else None)
    rules_used = sorted({p.rule.value for _, p in res.genotype.normal + res.genotype.reduce})
    return {"genotype": res.genotype, "rules": rules_used, "test_acc": out.test_acc, "test_loss": out.test_loss,
            "search_seconds": t_search, "total_seconds": time.perf_counter() - t0, "outcome": out}
