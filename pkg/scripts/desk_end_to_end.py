"""Search, retrain and evaluate on the 3-class 8x8 stripe task; writes logs and genotype.json."""
import argparse
import json
from pathlib import Path

from bionas.experiments import desk_end_to_end
from bionas.persistence import save_genotype


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--engine", choices=("darts", "cmaes"), default="darts")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    out = Path(args.out)
    r = desk_end_to_end(args.seed, args.engine, out)
    save_genotype(r["genotype"], out / "genotype.json")
    summary = {k: r[k] for k in ("rules", "test_acc", "test_loss", "search_seconds", "total_seconds")}
    (out / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
