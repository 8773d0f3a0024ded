"""Write a synthetic paired corpus (raw/ and reference/) that the CLI can read."""
import argparse

from uwdiff.data import write_pairs
from uwdiff.synthetic import make_pairs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--side", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kind", choices=["underwater", "blur_noise"], default="underwater")
    args = ap.parse_args()
    write_pairs(make_pairs(args.n, args.side, seed=args.seed, kind=args.kind), args.out)
    print(f"wrote {args.n} pairs to {args.out}")


if __name__ == "__main__":
    main()
