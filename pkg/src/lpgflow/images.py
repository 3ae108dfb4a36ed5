"""PNG round-trips for canvases and masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation


def to_uint8(canvas: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(canvas, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, canvas: np.ndarray) -> None:
    arr = to_uint8(canvas)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    # fixed encoder settings keep output bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: str | Path) -> np.ndarray:
    """RGB PNG -> float32 ``(H, W, 3)`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask -> 8-bit single channel, 0 = keep, 255 = generate."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[:, :, 0]
    if not np.all((m == 0) | (m == 1)):
        raise ContractViolation("mask must be binary")
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path, format="PNG", optimize=False,
                                                               compress_level=6)


def load_mask_png(path: str | Path) -> np.ndarray:
    """Mask PNG -> float32 ``(H, W, 1)`` with values in {0, 1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)[:, :, None]
