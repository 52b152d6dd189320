"""How often each search engine picks the planted (op, rule) winner on the orientation task."""
import argparse
import time

from bionas.data import gen_orientation_task
from bionas.search import picks_planted_winner, planted_config, run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--engine", choices=("darts", "cmaes"), default="darts")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int, help="override the engine's default epoch count")
    args = ap.parse_args()
    ds = gen_orientation_task(256, side=8, noise=0.1, seed=100)
    wins = 0
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        res = run_search(ds.images, ds.labels, planted_config(args.engine, seed, args.epochs))
        ok = picks_planted_winner(res.genotype)
        wins += ok
        print(f"seed {seed}: {'hit ' if ok else 'miss'} {[p.token for _, p in res.genotype.normal]} "
              f"{time.perf_counter() - t0:.1f}s", flush=True)
    print(f"{args.engine}: {wins}/{args.seeds}")


if __name__ == "__main__":
    main()
