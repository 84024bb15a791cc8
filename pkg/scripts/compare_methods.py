#!/usr/bin/env python3
"""Run all seven training methods on one shared dataset and emit the aligned
loss-versus-rounds CSV (thin wrapper over `fdgnn compare`).

Desk scale by default; --full switches to the 100-node setup. Worker
parallelism is capped by FDGNN_THREADS.

Example:
    python scripts/compare_methods.py --out cmp/
    FDGNN_THREADS=2 python scripts/compare_methods.py --full --out cmp_full/
"""
import argparse
import sys

from fdgnn.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--full", action="store_true")
    parser.add_argument("--out", default="cmp")
    args = parser.parse_args()

    if args.full:
        scale = ["--n", "100", "--n-train", "1000", "--n-test", "200",
                 "--batch", "100", "--epochs", "1000", "--eval-every", "100"]
    else:
        scale = ["--n", "30", "--n-train", "300", "--n-test", "100",
                 "--batch", "30", "--epochs", "300", "--eval-every", "100"]
    argv = ["compare", "--graph", "ba", "--m", "2", "--noise-var", "0.01",
            "--lr", "1e-3", "--seed", str(args.seed), "--out", args.out, *scale]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
