"""Left-prompt-guided canvas construction.

The reference image sits on the left half of a ``H x 2W`` canvas and the
target on the right.  A binary mask (1 = generate) only ever covers the
right half; the masked latent is the canvas with masked pixels zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FallbackToRandomMask


@dataclass
class StitchedInput:
    canvas: np.ndarray      # (H, 2W, C)
    mask: np.ndarray        # (H, 2W, 1), 1 = to generate
    masked: np.ndarray      # canvas * (1 - mask)

    @property
    def width(self) -> int:
        return self.canvas.shape[1] // 2


@dataclass
class MatchSet:
    """Correspondences between a reference view and a target view.

    Points are ``(x, y)`` in continuous pixel coordinates, pixel ``(r, c)``
    spanning ``[c, c + 1) x [r, r + 1)``.
    """

    left: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    right: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.confidence)


@dataclass
class MatchingMask:
    mask: np.ndarray                 # stitched (H, 2W, 1)
    vertices: np.ndarray             # (n, 2) target coords, angle ordered
    crop: tuple[float, float, float, float]   # x0, y0, x1, y1 in target coords
    crop_fraction: float             # crop area / matched bounding-box area


def check_canvas(img: np.ndarray, name: str = "canvas") -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ContractViolation(f"{name} must be H x W x C")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ContractViolation(f"{name} values must be finite and within [0, 1]")
    return img


def rasterize_polygon(vertices, height: int, width: int) -> np.ndarray:
    """Even-odd fill of a polygon, sampled at pixel centres -> bool ``(H, W)``."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        return np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def _place_right(target_mask: np.ndarray) -> np.ndarray:
    h, w = target_mask.shape[:2]
    out = np.zeros((h, 2 * w, 1), dtype=np.float32)
    out[:, w:, 0] = target_mask.reshape(h, w)
    return out


def masked_latent(canvas: np.ndarray, mask: np.ndarray) -> np.ndarray:
    canvas = np.asarray(canvas)
    mask = np.asarray(mask, dtype=canvas.dtype)
    if mask.shape[:-1] != canvas.shape[:-1] or mask.shape[-1] != 1:
        raise ContractViolation(f"mask {mask.shape} does not fit canvas {canvas.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractViolation("mask values must be 0 or 1")
    return canvas * (1 - mask)


def stitch(reference: np.ndarray, target: np.ndarray, mask_mode="full") -> StitchedInput:
    """Place ``reference`` left and ``target`` right on one canvas.

    ``mask_mode`` is ``"full"`` (whole right half generated), ``"none"``,
    an ``(n, 2)`` polygon in target coordinates (partial mask; empty means
    no masking), or a precomputed mask of shape ``(H, W)``/``(H, W, 1)``
    for the target or ``(H, 2W, 1)`` for the whole canvas.
    """
    reference = check_canvas(reference, "reference")
    target = check_canvas(target, "target")
    if reference.shape != target.shape:
        raise ContractViolation(f"reference {reference.shape} and target {target.shape} differ")
    h, w, _ = reference.shape
    canvas = np.concatenate([reference, target], axis=1)
    if isinstance(mask_mode, str):
        if mask_mode == "full":
            mask = _place_right(np.ones((h, w), dtype=np.float32))
        elif mask_mode == "none":
            mask = np.zeros((h, 2 * w, 1), dtype=np.float32)
        else:
            raise ContractViolation(f"unknown mask mode {mask_mode!r}")
    else:
        arr = np.asarray(mask_mode)
        if arr.ndim == 2 and arr.shape[1] == 2 and arr.shape != (h, w):
            mask = _place_right(rasterize_polygon(arr, h, w).astype(np.float32))
        elif arr.size == 0:
            mask = np.zeros((h, 2 * w, 1), dtype=np.float32)
        elif arr.shape[:2] == (h, w):
            mask = _place_right(arr.astype(np.float32))
        elif arr.shape == (h, 2 * w, 1):
            mask = arr.astype(np.float32)
            if np.any(mask[:, :w] != 0):
                raise ContractViolation("the reference half must never be masked")
        else:
            raise ContractViolation(f"mask of shape {arr.shape} does not fit a {h}x{w} target")
    return StitchedInput(canvas=canvas, mask=mask, masked=masked_latent(canvas, mask))


def crop_right(stitched: np.ndarray) -> np.ndarray:
    """Right half of a stitched ``(..., H, 2W, C)`` canvas."""
    stitched = np.asarray(stitched)
    width = stitched.shape[-2]
    if width % 2:
        raise ContractViolation(f"stitched width {width} is odd")
    return stitched[..., width // 2:, :].copy()


def random_polygon_mask(height: int, width: int, rng: np.random.Generator,
                        coverage=(0.10, 0.60), max_tries: int = 100) -> np.ndarray:
    """Irregular polygon (5-15 vertices) on the right half of a ``H x 2W`` canvas.

    ``width`` is the width of one half.  Retries until the polygon covers
    a fraction of the right half inside ``coverage``.
    """
    if height < 8 or width < 8:
        raise ContractViolation("random masks need at least 8x8 targets")
    for _ in range(max_tries):
        n = int(rng.integers(5, 16))
        cx = rng.uniform(0.25, 0.75) * width
        cy = rng.uniform(0.25, 0.75) * height
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n))
        radius = rng.uniform(0.15, 0.6, size=n) * min(height, width)
        xs = np.clip(cx + radius * np.cos(angles), 0.0, width)
        ys = np.clip(cy + radius * np.sin(angles), 0.0, height)
        m = rasterize_polygon(np.stack([xs, ys], axis=1), height, width)
        frac = m.mean()
        if coverage[0] <= frac <= coverage[1]:
            return _place_right(m.astype(np.float32))
    raise ContractViolation(f"no polygon met the coverage bounds after {max_tries} tries")


def matching_mask(matches: MatchSet, height: int, width: int, rng: np.random.Generator,
                  conf_threshold: float = 0.8, crop_range=(0.2, 0.5),
                  vertex_range=(15, 30)) -> MatchingMask:
    """Polygon mask whose vertices are confident correspondences in a sub-crop.

    Matches below ``conf_threshold`` are dropped (``>=`` keeps).  A random
    axis-aligned crop covering a ``crop_range`` fraction of the area of the
    remaining points' bounding box is chosen, then ``vertex_range`` target
    points inside it become polygon vertices ordered by angle around their
    centroid.  Raises :class:`FallbackToRandomMask` when too few points
    survive.
    """
    if len(matches) == 0:
        raise ContractViolation("matching mask needs at least one correspondence")
    vmin, vmax = vertex_range
    keep = matches.confidence >= conf_threshold
    pts = np.asarray(matches.right, dtype=np.float64)[keep]
    if len(pts) < vmin:
        raise FallbackToRandomMask(f"only {len(pts)} confident matches")
    bx0, by0 = pts.min(axis=0)
    bx1, by1 = pts.max(axis=0)
    bw, bh = bx1 - bx0, by1 - by0
    if bw <= 0 or bh <= 0:
        raise FallbackToRandomMask("matched region is degenerate")

    frac = rng.uniform(crop_range[0], crop_range[1])
    fw = rng.uniform(frac, 1.0)
    fh = frac / fw
    cw, ch = fw * bw, fh * bh
    x0 = bx0 + rng.uniform(0.0, bw - cw)
    y0 = by0 + rng.uniform(0.0, bh - ch)
    x1, y1 = x0 + cw, y0 + ch
    inside = pts[(pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)]
    if len(inside) < vmin:
        raise FallbackToRandomMask(f"only {len(inside)} confident matches inside the crop")

    n = int(rng.integers(vmin, min(vmax, len(inside)) + 1))
    chosen = inside[rng.choice(len(inside), size=n, replace=False)]
    centre = chosen.mean(axis=0)
    order = np.argsort(np.arctan2(chosen[:, 1] - centre[1], chosen[:, 0] - centre[0]), kind="stable")
    verts = chosen[order]
    m = rasterize_polygon(verts, height, width)
    return MatchingMask(mask=_place_right(m.astype(np.float32)), vertices=verts,
                        crop=(float(x0), float(y0), float(x1), float(y1)),
                        crop_fraction=float(cw * ch / (bw * bh)))


def crop_pixel_set(crop, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside an ``(x0, y0, x1, y1)`` rectangle."""
    x0, y0, x1, y1 = crop
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
