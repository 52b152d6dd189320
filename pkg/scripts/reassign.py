"""Retrain a genotype with its learning rules shuffled or resampled and report the accuracy spread."""
import argparse
import json

from bionas.analysis import dump_json
from bionas.config import load_preset
from bionas.experiments import desk_task, reassign_experiment
from bionas.persistence import load_genotype
from bionas.supernet import Genotype
from gradvar import DEFAULT


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--genotype")
    ap.add_argument("--n", type=int, default=5)
    ap.add_argument("--mode", choices=("shuffle", "resample"), default="shuffle")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/reassign_report.json")
    args = ap.parse_args()
    g = load_genotype(args.genotype) if args.genotype else Genotype.from_dict(DEFAULT)
    train, test = desk_task(seed=args.seed)
    rep = reassign_experiment(g, load_preset("desk-eval"), train, test, args.n, args.mode, seed=args.seed)
    dump_json(rep, args.out)
    print(json.dumps({"searched_acc": rep["searched_acc"], **rep["spread"]}))


if __name__ == "__main__":
    main()
