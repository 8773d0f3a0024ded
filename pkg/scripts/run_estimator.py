"""Train the degradation estimator on graded blur+noise pairs and report held-out Pearson."""
import argparse

import torch

from uwdiff.data import split_corpus
from uwdiff.estimator import EstimatorConfig, EstimatorHParams, save_estimator, train_estimator
from uwdiff.synthetic import make_pairs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--save", default=None, help="optional path for the trained estimator")
    args = ap.parse_args()
    torch.set_num_threads(1)

    split = split_corpus(make_pairs(args.n, 64, seed=0, kind="blur_noise"), 0.25, 0)
    cfg = EstimatorConfig(base_channels=16, num_stages=3, head_hidden=32, input_side=64)
    run = train_estimator(split, cfg, EstimatorHParams(epochs=args.epochs, batch_size=16, lr=2e-3))
    for row in run.history:
        print(f"epoch {row['epoch']:3d}  train_mse {row['train_mse']:.4f}  val_mse {row['val_mse']:.4f}"
              f"  val_pearson {row['val_pearson']:.4f}")
    if args.save:
        save_estimator(run, args.save)


if __name__ == "__main__":
    main()
