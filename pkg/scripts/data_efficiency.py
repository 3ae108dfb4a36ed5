"""canny2img adapters on 1, 10 and 100 pairs, scored on a shared held-out set."""

import argparse
import logging

from lpgflow.protocols import data_efficiency_sweep, pretrain_base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base", default=None)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--sizes", default="1,10,100")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--eval-pairs", type=int, default=32)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = args.base or pretrain_base("runs/base")
    sizes = tuple(int(s) for s in args.sizes.split(","))
    reports = data_efficiency_sweep(base, args.out, sizes, args.steps, args.lr, args.eval_pairs)
    print("pairs  edge_alignment  psnr    ssim")
    for n, rep in reports.items():
        agg = rep.aggregate()
        print(f"{n:5d}  {agg['edge_alignment']['mean']:.4f}          "
              f"{agg['psnr']['mean']:.2f}  {agg['ssim']['mean']:.3f}")


if __name__ == "__main__":
    main()
