"""Sweep sentence length and vocabulary size on phantoms and print the Dice table.

    python3 scripts/ablation_sweep.py --out runs/ablation --epochs 6
"""
import argparse
import logging
from pathlib import Path

from symseg.config import SymSegConfig
from symseg.pipeline import DEFAULT_GRID, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--interpret", action="store_true", help="also run the symbol regressions per cell")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = SymSegConfig.desk(epochs=args.epochs, n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    res = run_ablation(cfg, args.out, DEFAULT_GRID, interpret=args.interpret)
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    print(f"dice spread {res.dice_spread:.4f}")


if __name__ == "__main__":
    main()
