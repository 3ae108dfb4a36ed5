"""Generate right canvases from left references with the Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .flow import euler_sample, make_schedule, recompose
from .lpg import crop_right, stitch
from .model import DiT, LoraAdapter, PromptTokens, left_mass, lora_merge


@dataclass
class SampleOutput:
    right: np.ndarray                      # (B, H, W, 3) in [0, 1]
    canvas: np.ndarray                     # (B, H, 2W, 3) after recomposition
    attention: list[dict] = field(default_factory=list)


def combine_adapters(adapters: list[LoraAdapter] | None) -> LoraAdapter | None:
    if not adapters:
        return None
    return adapters[0] if len(adapters) == 1 else lora_merge(adapters)


def sample_batch(model: DiT, lefts: np.ndarray, captions: np.ndarray, steps: int = 50, seed: int = 0,
                 adapters: list[LoraAdapter] | None = None, prompt: PromptTokens | None = None,
                 attn_interval: int | None = None, targets: np.ndarray | None = None) -> SampleOutput:
    """Sample the right half for each left image.

    With ``targets`` and stitched masks given, partial masks are honoured;
    otherwise the whole right canvas is generated.  Attention summaries are
    recorded every ``attn_interval`` steps when requested.
    """
    lefts = np.asarray(lefts, dtype=np.float32)
    if lefts.ndim == 3:
        lefts = lefts[None]
        captions = np.asarray(captions)[None]
    bsz, h, w, c = lefts.shape
    stitched = [stitch(lefts[i], np.zeros_like(lefts[i]) if targets is None else targets[i], "full")
                for i in range(bsz)]
    mask = np.stack([s.mask for s in stitched])
    masked = np.stack([s.masked for s in stitched])
    adapter = combine_adapters(adapters)
    eps = nx.rng_stream(seed, "sample-noise").standard_normal(size=(bsz, h, 2 * w, c)).astype(np.float32)
    grid_h, grid_w = h // model.config.patch_size, 2 * w // model.config.patch_size
    records: list[dict] = []
    state = {"step": 0}

    def on_step(i, t, z):
        state["step"] = i

    def velocity(z, t):
        rec = [] if attn_interval and state["step"] % attn_interval == 0 else None
        v = model(z, masked, mask, captions, np.full(bsz, t), adapter=adapter, prompt=prompt, record=rec)
        if rec is not None:
            for layer, (att, n_cond) in enumerate(rec):
                lm = left_mass(att[0], n_cond, grid_w)   # (heads, n_right) for the first sample
                records.append({"step": state["step"], "layer": layer,
                                "left_mass": lm.mean(axis=0).reshape(grid_h, grid_w // 2),
                                "row_sums": att.sum(axis=-1)})
        return v.data

    z = euler_sample(velocity, eps, make_schedule(steps), on_step=on_step)
    canvas = np.clip(recompose(z, masked, mask), 0.0, 1.0)
    return SampleOutput(right=crop_right(canvas), canvas=canvas, attention=records)
