"""Train the desk model and run every attack preset on 100 test images; one CSV row per attack."""
import argparse
from pathlib import Path

from bionas import attacks as A
from bionas.experiments import desk_task, pixel_space, train_genotype
from bionas.models import SmallConvNet
from bionas.persistence import load_genotype
from bionas.supernet import Genotype
from bionas.tensor import RngStream
from bionas.trainer import TrainConfig, Trainer
from gradvar import DEFAULT


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--genotype")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/attacks.csv")
    args = ap.parse_args()
    g = load_genotype(args.genotype) if args.genotype else Genotype.from_dict(DEFAULT)
    train, test = desk_task(seed=args.seed)
    cfg = TrainConfig(lr=0.05, epochs=6, batch_size=32, cutout_length=0, drop_path_prob=0.0, init_channels=4,
                      layers=3)
    net = pixel_space(train_genotype(g, cfg, train, test, seed=args.seed).model, train)
    sur = SmallConvNet(3, 8, 16, train.num_classes, seed=args.seed + 1)
    Trainer(sur, TrainConfig(lr=0.05, epochs=10, batch_size=32, cutout_length=0, weight_decay=0.0)).fit(
        train.normalized(), train.labels)
    x, y = test.images[:100], test.labels[:100]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    for kind in A.ATTACKS:
        c = A.AttackConfig.preset(kind)
        res = A.run_attack(net, x, y, c, RngStream(args.seed, (15, 0)), pixel_space(sur, train))
        row = dict(attack=kind, epsilon=c.epsilon, steps=c.steps, clean_acc=res.clean_acc,
                   robust_acc=res.robust_acc, n_samples=len(y), seed=args.seed)
        A.write_attack_rows(args.out, [row])
        print(row)


if __name__ == "__main__":
    main()
