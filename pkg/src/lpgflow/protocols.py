"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

A LoRA on a zero-initialised output head cannot move the prediction, so
adapter runs start from a base model trained in full mode on a mix
of tasks that excludes the ones being evaluated.  This stands in for the
pretrained inpainting backbone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .evaluate import MetricReport, config_digest, edge_alignment, psnr, ssim
from .model import DiT
from .sample import sample_batch
from .taskdata import build_dataset, edge_map
from .train import TrainResult, load_pairs, train

log = logging.getLogger(__name__)

PRETRAIN_TASKS = ("refinpaint", "deblur", "superres4x", "img2depth", "depth2img", "seg2img", "img2seg")


@dataclass
class TrendResult:
    first100: float
    last100: float
    psnr_baseline: float
    psnr_tuned: float
    seconds: float
    losses: list[float] = field(default_factory=list)

    @property
    def loss_ratio(self) -> float:
        return self.last100 / self.first100


def window_means(losses, width: int = 100) -> tuple[float, float]:
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size < width:
        raise ValueError(f"need at least {width} losses, got {arr.size}")
    return float(arr[:width].mean()), float(arr[-width:].mean())


def pretrain_base(out_dir: str | Path, pairs_per_task: int = 30, steps: int = 2500, lr: float = 1e-3,
                  seed: int = 0, tasks=PRETRAIN_TASKS) -> Path:
    """Full-mode training on a multi-task mix; returns the ``model.lpgf`` path.

    Reuses an existing checkpoint in ``out_dir``.
    """
    out = Path(out_dir)
    target = out / "model.lpgf"
    if target.exists():
        return target
    manifests = [str(build_dataset(t, pairs_per_task, 1000 + i, out / "data" / t)) for i, t in enumerate(tasks)]
    cfg = RunConfig.from_dict({"tuning_mode": "full", "seed": seed,
                               "optimizer": {"lr": lr, "train_steps": steps},
                               "paths": {"manifest": manifests}})
    train(cfg, out_dir=out)
    return target


def finetune(base: str | Path, manifest: str | Path, task: str, steps: int, lr: float,
             seed: int = 0, out_dir: str | Path | None = None) -> TrainResult:
    cfg = RunConfig.from_dict({"tuning_mode": "lora", "seed": seed, "task": {"kind": task},
                               "optimizer": {"lr": lr, "train_steps": steps},
                               "paths": {"manifest": [str(manifest)], "base_checkpoint": str(base)}})
    return train(cfg, out_dir=out_dir)


def colorize_trend(work: str | Path, base: str | Path | None = None, pairs: int = 10, steps: int = 2000,
                   lr: float = 1e-4, eval_scenes: int = 8, seed: int = 0) -> TrendResult:
    """Colorisation on a few pairs; PSNR before and after training on held-in scenes.

    Without ``base`` a fresh model is trained in full mode and the baseline is
    that model at initialisation.  With ``base`` a LoRA is trained on top of it
    and the baseline is the base without the adapter.
    """
    t0 = time.time()
    work = Path(work)
    manifest = build_dataset("colorize", pairs, 7, work / "data")
    data = load_pairs([manifest])
    n = min(eval_scenes, len(data.canvas))
    w = data.canvas.shape[2] // 2
    lefts, gts, caps = data.canvas[:n, :, :w], data.canvas[:n, :, w:], data.caption[:n]
    if base is None:
        cfg = RunConfig.from_dict({"tuning_mode": "full", "seed": seed, "task": {"kind": "colorize"},
                                   "optimizer": {"lr": lr, "train_steps": steps},
                                   "paths": {"manifest": [str(manifest)]}})
        before = DiT(cfg.model, seed=seed)
        result = train(cfg, data=data, out_dir=work / "run")
        runs = (("base", before, None), ("tuned", ckpt_io.model_from_checkpoint(ckpt_io.load(work / "run" / "model.lpgf")), None))
    else:
        result = finetune(base, manifest, "colorize", steps, lr, seed, work / "run")
        model = ckpt_io.model_from_checkpoint(ckpt_io.load(base))
        runs = (("base", model, None), ("tuned", model, [result.adapter]))
    first, last = window_means(result.losses)
    scores = {}
    for name, model, adapters in runs:
        out = sample_batch(model, lefts, caps, steps=50, seed=seed, adapters=adapters)
        scores[name] = float(np.mean([psnr(a, b) for a, b in zip(out.right, gts)]))
    return TrendResult(first, last, scores["base"], scores["tuned"], time.time() - t0, result.losses)


def evaluate_edges(model: DiT, adapter, data, seed: int = 0) -> MetricReport:
    """Edge alignment of generated images against their edge-map conditions."""
    w = data.canvas.shape[2] // 2
    lefts = data.canvas[:, :, :w]
    out = sample_batch(model, lefts, data.caption, steps=50, seed=seed,
                       adapters=[adapter] if adapter is not None else None)
    report = MetricReport(config_digest=config_digest({"eval": "canny2img", "n": len(lefts), "seed": seed}))
    for i, (gen, gt) in enumerate(zip(out.right, data.canvas[:, :, w:])):
        report.add(f"{i:05d}", edge_alignment=edge_alignment(gen, lefts[i][..., 0]),
                   psnr=psnr(gen, gt), ssim=ssim(gen, gt))
    return report


def data_efficiency_sweep(base: str | Path, work: str | Path, sizes=(1, 10, 100), steps: int = 1000,
                          lr: float = 1e-3, eval_pairs: int = 32, seed: int = 0) -> dict[int, MetricReport]:
    """canny2img adapters trained on growing pair counts, scored on one held-out set."""
    work = Path(work)
    held = load_pairs([build_dataset("canny2img", eval_pairs, 999, work / "heldout")])
    model = ckpt_io.model_from_checkpoint(ckpt_io.load(base))
    reports = {}
    for n in sizes:
        manifest = build_dataset("canny2img", n, 11, work / f"train_{n}")
        result = finetune(base, manifest, "canny2img", steps, lr, seed, work / f"run_{n}")
        report = evaluate_edges(model, result.adapter, held, seed)
        (work / f"report_{n}.json").write_text(report.to_json() + "\n")
        reports[n] = report
        log.info("pairs %d edge_alignment %.4f", n, report.aggregate()["edge_alignment"]["mean"])
    return reports
