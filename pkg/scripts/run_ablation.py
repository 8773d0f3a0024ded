"""Module and loss ablation grids on the toy overfit setting."""
import argparse

import torch

from uwdiff.data import DatasetSplit
from uwdiff.synthetic import make_pairs
from uwdiff.trainer import loss_grid, module_grid, run_ablation, toy_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", choices=["module", "loss", "both"], default="both")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    torch.set_num_threads(1)

    pairs = make_pairs(8, 64, seed=0)
    split = DatasetSplit(tuple(pairs), (), 0)
    grids = {"module": module_grid, "loss": loss_grid}
    names = list(grids) if args.grid == "both" else [args.grid]
    for name in names:
        rows = run_ablation(grids[name](toy_config()), split, out_dir=f"{args.out}/{name}")
        print(f"== {name} grid")
        for r in rows:
            print(f"{r['name']:24s} psnr {r['psnr']:.3f}  ssim {r['ssim']:.4f}  loss {r['final_train_loss']:.4f}")


if __name__ == "__main__":
    main()
