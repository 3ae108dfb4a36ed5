"""Few-pair colorisation: loss trend and PSNR gain.

By default a fresh model is trained in full mode.  With --lora-on-base a LoRA
is trained on a pretrained base instead (the base is built if --base is omitted).
"""

import argparse
import json
import logging
from pathlib import Path

from lpgflow.protocols import colorize_trend, pretrain_base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lora-on-base", action="store_true")
    ap.add_argument("--base", default=None, help="base checkpoint; trained into runs/base if omitted")
    ap.add_argument("--out", default="runs/colorize")
    ap.add_argument("--pairs", type=int, default=10)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = None
    if args.lora_on_base:
        base = args.base or pretrain_base("runs/base")
    res = colorize_trend(args.out, base, args.pairs, args.steps, args.lr, seed=args.seed)
    summary = {"first100": res.first100, "last100": res.last100, "loss_ratio": res.loss_ratio,
               "psnr_base": res.psnr_baseline, "psnr_tuned": res.psnr_tuned, "seconds": res.seconds}
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
