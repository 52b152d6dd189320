"""Per-epoch gradient variance for a mixed-rule genotype and its single-rule variants."""
import argparse
import json

from bionas.analysis import dump_json
from bionas.config import load_preset
from bionas.experiments import desk_task, gradvar_experiment
from bionas.persistence import load_genotype
from bionas.supernet import Genotype

# a mixed-rule genotype used when no --genotype is given
DEFAULT = {"version": 1,
           "normal": [[0, "sep_conv_3x3", "usf"], [1, "skip_connect", "frsf"], [0, "dil_conv_3x3", "brsf"],
                      [2, "max_pool_3x3", "none"]],
           "reduce": [[0, "sep_conv_3x3", "fa"], [1, "avg_pool_3x3", "none"], [0, "skip_connect", "usf"],
                      [2, "dil_conv_3x3", "frsf"]]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--genotype")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/gradvar")
    args = ap.parse_args()
    g = load_genotype(args.genotype) if args.genotype else Genotype.from_dict(DEFAULT)
    train, test = desk_task(seed=args.seed)
    rep = gradvar_experiment(g, load_preset("desk-eval"), train, test, args.out, seed=args.seed)
    dump_json(rep, f"{args.out}/gradvar_report.json")
    print(json.dumps({k: v["median_variance"] if isinstance(v, dict) else v for k, v in rep.items()}))


if __name__ == "__main__":
    main()
