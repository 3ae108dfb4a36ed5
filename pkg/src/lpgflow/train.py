"""Rectified-flow fine-tuning loop for LoRA, prompt-token and full training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import RunConfig
from .errors import ContractViolation, NumericFault
from .flow import interpolate, rf_loss, sample_timesteps
from .images import load_mask_png, load_png
from .lpg import stitch
from .model import DiT, LoraAdapter, PromptTokens, init_prompt_tokens
from .taskdata import CAPTION_LEN, PAD, TOKEN_ID, PairBatch, read_manifest

log = logging.getLogger(__name__)


def load_pairs(manifests: list[str | Path]) -> PairBatch:
    if not manifests:
        raise ContractViolation("no manifest given")
    canv, masks, masked, caps, tasks = [], [], [], [], []
    for man in manifests:
        if not Path(man).exists():
            raise FileNotFoundError(f"manifest {man} not found")
        for rec in read_manifest(man):
            left, right = load_png(rec["left"]), load_png(rec["right"])
            mode = "full" if rec["mask"] == "full" else load_mask_png(rec["mask"])
            st = stitch(left, right, mode)
            canv.append(st.canvas)
            masks.append(st.mask)
            masked.append(st.masked)
            cap = list(rec["caption_tokens"])[:CAPTION_LEN]
            caps.append(cap + [PAD] * (CAPTION_LEN - len(cap)))
            tasks.append(rec["task"])
    if not canv:
        raise ContractViolation("manifests contain no pairs")
    return PairBatch(canvas=np.stack(canv), mask=np.stack(masks), masked=np.stack(masked),
                     caption=np.asarray(caps, dtype=np.int64), tasks=tasks)


def task_description(kind: str) -> list[int]:
    return [TOKEN_ID[kind], TOKEN_ID["image"]]


@dataclass
class TrainResult:
    model: DiT
    losses: list[float]
    adapter: LoraAdapter | None = None
    prompt: PromptTokens | None = None
    paths: dict[str, Path] = field(default_factory=dict)


def draw_batch(data: PairBatch, seed: int, step: int, batch_size: int):
    """Minibatch, noise and timesteps for one step from the ``(seed, step)`` stream."""
    rng = nx.rng_stream(seed, "train-batch", step)
    idx = rng.integers(0, len(data.canvas), size=batch_size)
    z0 = data.canvas[idx]
    eps = rng.standard_normal(size=z0.shape).astype(np.float32)
    t = sample_timesteps(rng, batch_size)
    return idx, z0, eps, t


def train(config: RunConfig, data: PairBatch | None = None, model: DiT | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run ``optimizer.train_steps`` updates and optionally write artifacts.

    Written to ``out_dir``: ``loss.csv``, ``model.lpgf`` and, depending on
    the tuning mode, ``adapter.lpgf`` or ``prompt.lpgf``.
    """
    config.validate()
    if data is None:
        data = load_pairs(config.paths.manifest)
    if model is None:
        if config.paths.base_checkpoint:
            model = ckpt_io.model_from_checkpoint(ckpt_io.load(config.paths.base_checkpoint))
        else:
            model = DiT(config.model, seed=config.seed)
    mc = model.config
    opt = config.optimizer
    adapter = prompt = None
    if config.tuning_mode == "full":
        model.set_trainable(True)
        params = model.parameters()
    else:
        model.set_trainable(False)
        if config.tuning_mode == "lora":
            adapter = LoraAdapter.create(mc, config.task.kind, nx.rng_stream(config.seed, "lora-init"))
            params = adapter.parameters()
        else:
            prompt = init_prompt_tokens(task_description(config.task.kind), model.params["tok.embed"],
                                        mc.num_prompt_tokens)
            params = [prompt.tokens]
    optimizer = nx.AdamW(params, lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps,
                         weight_decay=opt.weight_decay)

    losses: list[float] = []
    for step in range(opt.train_steps):
        idx, z0, eps, t = draw_batch(data, config.seed, step, opt.batch_size)
        sample = interpolate(z0, eps, t)
        v = model(sample.z_t, data.masked[idx], data.mask[idx], data.caption[idx], t,
                  adapter=adapter, prompt=prompt)
        loss = rf_loss(v, z0, eps)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault("loss is not finite", step=step)
        optimizer.zero_grad()
        nx.backward(loss)
        optimizer.step()
        losses.append(value)
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, value)

    result = TrainResult(model=model, losses=losses, adapter=adapter, prompt=prompt)
    if out_dir is not None:
        result.paths = write_artifacts(result, config, Path(out_dir))
    return result


def write_loss_csv(path: Path, losses: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n")


def write_artifacts(result: TrainResult, config: RunConfig, out: Path) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    steps = len(result.losses)
    paths = {"loss": out / "loss.csv", "model": out / "model.lpgf"}
    write_loss_csv(paths["loss"], result.losses)
    ckpt_io.save(paths["model"], ckpt_io.model_checkpoint(result.model, steps, config.to_dict()))
    if result.adapter is not None:
        paths["adapter"] = out / "adapter.lpgf"
        ckpt_io.save(paths["adapter"], ckpt_io.adapter_checkpoint(result.adapter, steps, result.model.config))
    if result.prompt is not None:
        paths["prompt"] = out / "prompt.lpgf"
        ckpt_io.save(paths["prompt"], ckpt_io.prompt_checkpoint(result.prompt, config.task.kind, steps))
    return paths
