"""Ablation: learned prompt tokens against a LoRA adapter on the same few pairs."""

import argparse
import logging

import numpy as np

from lpgflow import checkpoint as ckpt_io
from lpgflow.config import RunConfig
from lpgflow.evaluate import psnr
from lpgflow.model import count_trainable
from lpgflow.protocols import pretrain_base, window_means
from lpgflow.sample import sample_batch
from lpgflow.taskdata import build_dataset
from lpgflow.train import load_pairs, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base", default=None)
    ap.add_argument("--task", default="colorize")
    ap.add_argument("--pairs", type=int, default=10)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = args.base or pretrain_base("runs/base")
    manifest = build_dataset(args.task, args.pairs, 7, f"{args.out}/data")
    data = load_pairs([manifest])
    w = data.canvas.shape[2] // 2
    model = ckpt_io.model_from_checkpoint(ckpt_io.load(base))
    for mode in ("lora", "prompt"):
        cfg = RunConfig.from_dict({"tuning_mode": mode, "task": {"kind": args.task},
                                   "optimizer": {"lr": args.lr, "train_steps": args.steps},
                                   "paths": {"manifest": [str(manifest)], "base_checkpoint": str(base)}})
        res = train(cfg, data=data, out_dir=f"{args.out}/{mode}")
        first, last = window_means(res.losses)
        out = sample_batch(model, data.canvas[:, :, :w], data.caption, seed=0,
                           adapters=[res.adapter] if res.adapter else None, prompt=res.prompt)
        score = np.mean([psnr(a, b) for a, b in zip(out.right, data.canvas[:, :, w:])])
        params = count_trainable(res.model, res.adapter, res.prompt)
        print(f"{mode:6s} params={params:7d} loss {first:.4f}->{last:.4f} psnr {score:.2f}")


if __name__ == "__main__":
    main()
