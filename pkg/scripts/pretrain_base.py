"""Train the multi-task base model that adapter experiments start from."""

import argparse
import logging

from lpgflow.protocols import PRETRAIN_TASKS, pretrain_base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/base")
    ap.add_argument("--pairs", type=int, default=30, help="pairs per task")
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tasks", default=",".join(PRETRAIN_TASKS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    path = pretrain_base(args.out, args.pairs, args.steps, args.lr, args.seed, tuple(args.tasks.split(",")))
    print(path)


if __name__ == "__main__":
    main()
