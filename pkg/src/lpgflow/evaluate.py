"""Image metrics, aggregate reports and attention heatmap export."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ContractViolation
from .images import save_png
from .taskdata import edge_map, luminance

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM on luminance over every valid 8x8 window (stride 1)."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a = luminance(a).astype(np.float64) if a.shape[2] == 3 else a[:, :, 0]
        b = luminance(b).astype(np.float64) if b.shape[2] == 3 else b[:, :, 0]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractViolation("image smaller than the SSIM window")
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def edge_alignment(generated, condition_edges) -> float:
    """F1 between the generated image's edges and the condition edges.

    A predicted edge pixel counts as correct if a condition edge lies within
    one pixel of it (and vice versa for recall).  Returns 0 when either
    side has no edges.
    """
    gen = np.asarray(generated, dtype=np.float32)
    cond = np.asarray(condition_edges, dtype=np.float32)
    if cond.ndim == 3:
        cond = cond[..., 0]
    g = edge_map(gen) > 0.5
    c = cond > 0.5
    if g.shape != c.shape:
        raise ContractViolation("generated image and edge map differ in size")
    if not g.any() or not c.any():
        return 0.0
    ring = np.ones((3, 3), dtype=bool)
    precision = float((g & ndimage.binary_dilation(c, structure=ring)).sum() / g.sum())
    recall = float((c & ndimage.binary_dilation(g, structure=ring)).sum() / c.sum())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


METRICS = {"psnr": psnr, "ssim": ssim}


@dataclass
class MetricReport:
    per_image: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    config_digest: str = ""

    def add(self, name: str, **values: float) -> None:
        self.per_image.append({"name": name, **values})

    def aggregate(self) -> dict:
        keys = sorted({k for row in self.per_image for k in row if k != "name"})
        agg: dict = {"count": len(self.per_image)}
        for k in keys:
            vals = np.array([row[k] for row in self.per_image if k in row], dtype=np.float64)
            agg[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "count": int(vals.size)}
        return agg

    def to_dict(self) -> dict:
        return {"per_image": self.per_image, "aggregate": self.aggregate(),
                "skipped": self.skipped, "config_digest": self.config_digest}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def attention_heatmaps(records: list[dict], out_dir: str | Path, upscale: int = 1) -> list[Path]:
    """One grayscale PNG per recorded (step, layer).

    Each record carries ``step``, ``layer`` and ``left_mass`` shaped as the
    right-canvas patch grid.  Values are scaled so the brightest patch of
    each image is 255.
    """
    if not records:
        raise ContractViolation("no attention records to render")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        mass = np.asarray(rec["left_mass"], dtype=np.float64)
        peak = mass.max()
        img = mass / peak if peak > 0 else np.zeros_like(mass)
        if upscale > 1:
            img = np.kron(img, np.ones((upscale, upscale)))
        path = out / f"attn_step{rec['step']:03d}_layer{rec['layer']}.png"
        save_png(path, img[:, :, None])
        paths.append(path)
    return paths
