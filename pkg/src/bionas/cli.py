"""Command line entry point: ``bionas <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort,
130 interrupted (logs and a checkpoint are flushed first).
"""
from __future__ import annotations

import argparse
import json
import signal
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, attacks, experiments
from .config import PRESETS, ConfigError, load_preset, read_flat_toml, train_config_from_dict, write_flat_toml
from .data import DataError, Dataset, gen_synthetic, load_cifar10_bin
from .models import SmallConvNet
from .persistence import CheckpointError, GenotypeFormatError, load_checkpoint, load_genotype, save_checkpoint, \
    save_genotype
from .search import SearchConfig, run_search
from .supernet import build_discrete_network
from .tensor import NumericalError, RngStream, set_default_dtype
from .trainer import CancelToken, Trainer, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERRUPT = 0, 2, 3, 4, 130


def _add_data_args(p):
    p.add_argument("--data", choices=("synth", "cifar"), default="synth")
    p.add_argument("--data-path", help="directory holding data_batch_*.bin / test_batch.bin")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)


def _add_train_args(p, preset):
    p.add_argument("--preset", choices=PRESETS, default=preset)
    p.add_argument("--config", help="flat TOML overriding preset keys")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bionas", description="Architecture and learning-rule search.")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--precision", choices=("f32", "f64"), default="f64")
    ap.add_argument("--threads", type=int, default=1)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run architecture search and write genotype.json")
    s.add_argument("--engine", choices=("darts", "cmaes"), default="darts")
    s.add_argument("--config", help="flat TOML of search settings")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", default="runs/search")
    _add_data_args(s)

    t = sub.add_parser("train", help="train a genotype from scratch")
    t.add_argument("--genotype", required=True)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--resume", help="checkpoint to resume from")
    _add_train_args(t, "desk-eval")
    _add_data_args(t)

    a = sub.add_parser("attack", help="attack a trained checkpoint")
    a.add_argument("--kind", choices=attacks.ATTACKS, required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--genotype", required=True)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--pixels", type=int)
    a.add_argument("--n-samples", type=int, default=100)
    a.add_argument("--out", default="runs/attack.csv")
    _add_data_args(a)

    an = sub.add_parser("analyze", help="gradient variance, weight statistics, rule reassignment")
    an.add_argument("what", choices=("gradvar", "weights", "reassign"))
    an.add_argument("--genotype", required=True)
    an.add_argument("--checkpoint", help="trained weights (weights analysis)")
    an.add_argument("--n", type=int, default=5)
    an.add_argument("--mode", choices=("shuffle", "resample"), default="shuffle")
    an.add_argument("--out", default="runs/analysis")
    _add_train_args(an, "desk-eval")
    _add_data_args(an)

    d = sub.add_parser("data", help="dataset utilities")
    d.add_argument("what", choices=("fetch-check", "synth"))
    d.add_argument("--out", default="synth.npz")
    _add_data_args(d)
    return ap


# ----------------------------------------------------------------------------- helpers


def load_data(args) -> tuple[Dataset, Dataset]:
    if args.data == "synth":
        return experiments.desk_task(args.classes, args.per_class, args.side, args.noise, args.seed)
    if not args.data_path:
        raise ConfigError("--data cifar needs --data-path")
    root = Path(args.data_path)
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise DataError(f"{root}: expected data_batch_*.bin and test_batch.bin")
    return load_cifar10_bin(train_files), load_cifar10_bin(test_file)


def train_config(args):
    cfg = load_preset(args.preset)
    if args.config:
        cfg = train_config_from_dict(read_flat_toml(args.config), cfg)
    over = {"seed": args.seed}
    if args.epochs:
        over["epochs"] = args.epochs
    return train_config_from_dict(over, cfg)


def search_config(args) -> SearchConfig:
    d = read_flat_toml(args.config) if args.config else {}
    d.update(engine=args.engine, seed=args.seed)
    if args.epochs:
        d["epochs"] = args.epochs
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return SearchConfig(**{**experiments.DESK_SEARCH, **d})
    except TypeError as exc:
        raise ConfigError(f"bad search config: {exc}") from exc


def _install_cancel() -> CancelToken:
    token = CancelToken()
    signal.signal(signal.SIGINT, token.cancel)
    return token


def _model_from_checkpoint(args, train: Dataset):
    genotype = load_genotype(args.genotype)
    from .persistence import read_checkpoint_file
    _, state = read_checkpoint_file(args.checkpoint)
    meta = state.get("meta", {})
    cfg = train_config_from_dict(meta.get("train_config", {}))
    model = build_discrete_network(genotype, cfg.init_channels, cfg.layers, meta.get("num_classes", train.num_classes),
                                   in_channels=train.images.shape[1], seed=cfg.seed)
    load_checkpoint(args.checkpoint, model)
    return model, cfg, meta


# ----------------------------------------------------------------------------- commands


def cmd_search(args) -> int:
    cfg = search_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_flat_toml(out / "config.toml", cfg.to_dict())
    train, _ = load_data(args)
    cancel = _install_cancel()
    res = run_search(train.normalized(), train.labels, cfg, log_path=out / "search_log.csv", cancel=cancel)
    save_genotype(res.genotype, out / "genotype.json")
    print(json.dumps(res.genotype.to_dict()))
    return EXIT_INTERRUPT if cancel.cancelled else EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(args)
    genotype = load_genotype(args.genotype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_flat_toml(out / "config.toml", cfg.to_dict())
    train, test = load_data(args)
    model = build_discrete_network(genotype, cfg.init_channels, cfg.layers, train.num_classes,
                                   in_channels=train.images.shape[1], seed=cfg.seed)
    trainer = Trainer(model, cfg)
    if args.resume:
        load_checkpoint(args.resume, model, trainer)
    meta = {"train_config": cfg.to_dict(), "num_classes": train.num_classes, "mean": train.mean, "std": train.std}
    ckpt = out / "checkpoint.bin"
    cancel = _install_cancel()
    xt, xv = experiments.normalize_with(train, train), experiments.normalize_with(test, train)
    trainer.fit(xt, train.labels, xv, test.labels, log_path=out / "train_log.csv", cancel=cancel,
                on_epoch_end=lambda tr: save_checkpoint(ckpt, model, tr, meta))
    save_checkpoint(ckpt, model, trainer, meta)
    acc, loss = evaluate(model, xv, test.labels)
    (out / "result.json").write_text(json.dumps({"test_acc": acc, "test_loss": loss, "epochs": trainer.epoch}) + "\n")
    print(f"test_acc={acc:.4f} test_loss={loss:.4f}")
    return EXIT_INTERRUPT if cancel.cancelled else EXIT_OK


def cmd_attack(args) -> int:
    train, test = load_data(args)
    model, _, meta = _model_from_checkpoint(args, train)
    net = experiments.pixel_space(model, train)
    cfg = attacks.AttackConfig.preset(args.kind)
    over = {k: v for k, v in (("epsilon", args.epsilon), ("steps", args.steps), ("pixels", args.pixels))
            if v is not None}
    if args.kind == "square" and args.steps is not None:
        over["queries"] = args.steps
    if args.kind == "one_pixel" and args.steps is not None:
        over["de_steps"] = args.steps
    cfg = attacks.AttackConfig(**{**asdict(cfg), **over})
    n = min(args.n_samples, len(test))
    x, y = test.images[:n], test.labels[:n]
    rng = RngStream(args.seed, (18, 0))
    surrogate = None
    if cfg.kind == "transfer":
        sur = SmallConvNet(train.images.shape[1], 8, 16, train.num_classes, ("bp", "bp", "bp"), seed=args.seed + 1)
        scfg = train_config_from_dict({"epochs": 10, "lr": 0.05, "batch_size": 32, "cutout_length": 0,
                                       "drop_path_prob": 0.0, "weight_decay": 0.0})
        Trainer(sur, scfg).fit(experiments.normalize_with(train, train), train.labels)
        surrogate = experiments.pixel_space(sur, train)
    res = attacks.run_attack(net, x, y, cfg, rng, surrogate)
    row = {"attack": cfg.kind, "epsilon": cfg.epsilon, "steps": cfg.steps, "clean_acc": res.clean_acc,
           "robust_acc": res.robust_acc, "n_samples": n, "seed": args.seed}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    attacks.write_attack_rows(args.out, [row])
    print(json.dumps(row))
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    genotype = load_genotype(args.genotype)
    train, test = load_data(args)
    if args.what == "weights":
        if not args.checkpoint:
            raise ConfigError("analyze weights needs --checkpoint")
        model, _, _ = _model_from_checkpoint(args, train)
        ws = analysis.weight_distribution(model)
        analysis.write_weight_stats(ws, out / "weightstats.csv", out / "weightstats_summary.json")
        print(json.dumps(ws.summary()))
        return EXIT_OK
    cfg = train_config(args)
    write_flat_toml(out / "config.toml", cfg.to_dict())
    if args.what == "gradvar":
        report = experiments.gradvar_experiment(genotype, cfg, train, test, out, seed=args.seed)
    else:
        report = experiments.reassign_experiment(genotype, cfg, train, test, args.n, args.mode, seed=args.seed)
    analysis.dump_json(report, out / f"{args.what}_report.json")
    print(json.dumps({k: v for k, v in report.items() if k != "variants"}, default=str))
    return EXIT_OK


def cmd_data(args) -> int:
    if args.what == "fetch-check":
        args.data = "cifar"
        train, test = load_data(args)
        print(f"train={len(train)} test={len(test)} classes={train.num_classes}")
        return EXIT_OK
    ds = gen_synthetic(args.classes, args.per_class, args.side, args.noise, args.seed)
    np.savez(args.out, images=ds.images, labels=ds.labels)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


COMMANDS = {"search": cmd_search, "train": cmd_train, "attack": cmd_attack, "analyze": cmd_analyze,
            "data": cmd_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    set_default_dtype(np.float32 if args.precision == "f32" else np.float64)
    previous_sigint = signal.getsignal(signal.SIGINT)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, GenotypeFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        signal.signal(signal.SIGINT, previous_sigint)
        set_default_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
