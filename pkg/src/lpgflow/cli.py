"""Command-line entry point: ``lpgflow {datagen,train,sample,eval,inspect-ckpt}``.

Exit codes: 0 success, 2 usage, 3 numeric fault, 4 dimension mismatch,
5 no data, 6 corrupt file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import load_config
from .errors import ContractViolation, CorruptFile, DimensionMismatch, NumericFault
from .evaluate import MetricReport, attention_heatmaps, config_digest, edge_alignment, psnr, ssim
from .images import load_png, save_png
from .sample import sample_batch
from .taskdata import CAPTION_LEN, PAD, TASK_KINDS, TOKEN_ID, build_dataset, edge_map
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIMS, EXIT_NODATA, EXIT_CORRUPT = 0, 2, 3, 4, 5, 6

log = logging.getLogger("lpgflow")


class NoData(Exception):
    pass


def cmd_datagen(args) -> int:
    manifest = build_dataset(args.task, args.count, args.seed, args.out, size=args.size)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    out = Path(args.out or config.paths.out_dir)
    result = train(config, out_dir=out)
    for name, path in sorted(result.paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def caption_from_words(task: str, words: list[str]) -> np.ndarray:
    ids = [TOKEN_ID[task]]
    for w in words:
        if w not in TOKEN_ID:
            raise ContractViolation(f"unknown caption word {w!r}")
        ids.append(TOKEN_ID[w])
    ids = ids[:CAPTION_LEN]
    return np.asarray(ids + [PAD] * (CAPTION_LEN - len(ids)), dtype=np.int64)


def cmd_sample(args) -> int:
    model = ckpt_io.model_from_checkpoint(ckpt_io.load(args.checkpoint))
    adapters = [ckpt_io.adapter_from_checkpoint(ckpt_io.load(p), model.config) for p in args.adapter]
    prompt = ckpt_io.prompt_from_checkpoint(ckpt_io.load(args.prompt), model.config) if args.prompt else None
    left = load_png(args.left)
    caption = caption_from_words(args.task, args.caption)
    interval = args.attn_interval if args.dump_attn else None
    result = sample_batch(model, left[None], caption[None], steps=args.steps, seed=args.seed,
                          adapters=adapters, prompt=prompt, attn_interval=interval)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(args.out, result.right[0])
    if args.dump_attn:
        attention_heatmaps(result.attention, args.dump_attn, upscale=model.config.patch_size)
    print(args.out)
    return EXIT_OK


def evaluate_dirs(pred_dir, gt_dir, metrics: list[str]) -> MetricReport:
    pred = {p.name: p for p in sorted(Path(pred_dir).glob("*.png"))}
    gt = {p.name: p for p in sorted(Path(gt_dir).glob("*.png"))}
    common = sorted(set(pred) & set(gt))
    report = MetricReport(skipped=sorted(set(pred) ^ set(gt)),
                          config_digest=config_digest({"metrics": metrics, "pairs": common}))
    for name in common:
        a, b = load_png(pred[name]), load_png(gt[name])
        values = {}
        if "psnr" in metrics:
            values["psnr"] = psnr(a, b)
        if "ssim" in metrics:
            values["ssim"] = ssim(a, b)
        if "edge" in metrics:
            values["edge_alignment"] = edge_alignment(a, edge_map(b))
        report.add(name, **values)
    return report


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in ("psnr", "ssim", "edge"):
            raise ContractViolation(f"unknown metric {m!r}")
    report = evaluate_dirs(args.pred, args.gt, metrics)
    if not report.per_image:
        raise NoData("no prediction/ground-truth filenames in common")
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(ckpt_io.read_header(args.path), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpgflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="synthesise a task dataset")
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="fine-tune from a JSON run config")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. optimizer.lr=2e-4")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate the right canvas for a left image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapter", action="append", default=[])
    p.add_argument("--prompt", default=None, help="prompt-token file from prompt-mode training")
    p.add_argument("--left", required=True)
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--caption", nargs="*", default=[], help="extra caption words")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attn", default=None, metavar="DIR")
    p.add_argument("--attn-interval", type=int, default=10)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint header")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DimensionMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMS
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NODATA
    except CorruptFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
