"""Procedural scenes and task pairs for every supported LPG task.

A scene is a handful of anti-aliased shapes over a gradient background.
Depth, segmentation and edge maps are rendered from the same object list,
so generation and perception pairs are exact inverses of each other.
Ref-inpainting pairs come from a homography-warped second view whose
correspondences are known exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import lpg
from .errors import ContractViolation, FallbackToRandomMask
from .images import save_mask_png, save_png
from .numerics import rng_stream

SEG_PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
    [250, 190, 212], [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200],
    [128, 0, 0],
], dtype=np.float32) / 255.0

NAMED_COLORS = {
    "red": (0.86, 0.16, 0.14), "green": (0.18, 0.70, 0.24), "blue": (0.16, 0.30, 0.86),
    "yellow": (0.95, 0.85, 0.15), "cyan": (0.15, 0.80, 0.85), "magenta": (0.85, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10), "purple": (0.50, 0.20, 0.70), "white": (0.96, 0.96, 0.96),
    "black": (0.06, 0.06, 0.06),
}
SHAPE_KINDS = ("disc", "rectangle", "triangle")

GENERATION = {"canny2img": "edges", "depth2img": "depth", "seg2img": "seg"}
PERCEPTION = {"img2canny": "edges", "img2depth": "depth", "img2seg": "seg"}
RESTORATION = ("colorize", "deblur", "superres4x", "superres8x", "superres16x")
TASK_KINDS = tuple(GENERATION) + tuple(PERCEPTION) + RESTORATION + ("refinpaint",)

PAD = 0
VOCAB = ("<pad>",) + TASK_KINDS + tuple(NAMED_COLORS) + SHAPE_KINDS + ("scene", "image", "map")
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
CAPTION_LEN = 8

EDGE_THRESHOLD = 0.25
REC601 = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class SceneObject:
    kind: str
    color: str
    depth: float
    geometry: dict


@dataclass
class Scene:
    rgb: np.ndarray        # (H, W, 3)
    depth: np.ndarray      # (H, W), near = 1, background = 0
    seg: np.ndarray        # (H, W, 3) palette colours
    edges: np.ndarray      # (H, W) in {0, 1}
    ids: np.ndarray        # (H, W) object index + 1, 0 = background
    objects: list[SceneObject]
    seed: int


@dataclass
class TaskSpec:
    kind: str
    direction: str
    sigma: float = 0.1
    factor: int = 1
    caption_prefix: tuple[int, ...] = ()

    @classmethod
    def from_kind(cls, kind: str, sigma: float = 0.1) -> "TaskSpec":
        if kind not in TASK_KINDS:
            raise ContractViolation(f"unknown task kind {kind!r}; expected one of {', '.join(TASK_KINDS)}")
        if kind in GENERATION:
            direction = "map_left"
        elif kind in PERCEPTION:
            direction = "rgb_left"
        elif kind == "refinpaint":
            direction = "reference_left"
        else:
            direction = "degraded_left"
        factor = int(kind[len("superres"):-1]) if kind.startswith("superres") else 1
        return cls(kind=kind, direction=direction, sigma=sigma, factor=factor,
                   caption_prefix=(TOKEN_ID[kind],))


@dataclass
class TrainPair:
    left: np.ndarray
    right: np.ndarray
    mask_mode: object          # "full" or a stitched (H, 2W, 1) mask
    task: str
    caption: list[int]
    matches: lpg.MatchSet | None = None
    mask_source: str = "full"  # full | random | matching


# ---------------------------------------------------------------------------
# map extractors
# ---------------------------------------------------------------------------

def luminance(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float32)[..., :3] @ REC601).astype(np.float32)


def edge_map(rgb: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Sobel edges: per-channel gradient magnitude (a unit step reads 1.0), max over channels."""
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    mags = []
    for ch in range(img.shape[2]):
        gx = ndimage.sobel(img[:, :, ch], axis=1, mode="nearest") / 4.0
        gy = ndimage.sobel(img[:, :, ch], axis=0, mode="nearest") / 4.0
        mags.append(np.hypot(gx, gy))
    return (np.max(mags, axis=0) >= threshold).astype(np.float32)


def to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(gray, dtype=np.float32)[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

_SS = 4  # supersampling factor for anti-aliasing


def _coverage(obj: SceneObject, size: int) -> np.ndarray:
    n = size * _SS
    ys, xs = (np.mgrid[0:n, 0:n] + 0.5) / _SS
    g = obj.geometry
    if obj.kind == "disc":
        inside = (xs - g["cx"]) ** 2 + (ys - g["cy"]) ** 2 <= g["r"] ** 2
    elif obj.kind == "rectangle":
        inside = (xs >= g["x0"]) & (xs <= g["x1"]) & (ys >= g["y0"]) & (ys <= g["y1"])
    else:
        (ax, ay), (bx, by), (cx, cy) = g["points"]
        d1 = (xs - bx) * (ay - by) - (ax - bx) * (ys - by)
        d2 = (xs - cx) * (by - cy) - (bx - cx) * (ys - cy)
        d3 = (xs - ax) * (cy - ay) - (cx - ax) * (ys - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        inside = ~(neg & pos)
    return inside.reshape(size, _SS, size, _SS).mean(axis=(1, 3))


def _random_object(rng: np.random.Generator, size: int) -> SceneObject:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    color = list(NAMED_COLORS)[int(rng.integers(len(NAMED_COLORS)))]
    s = float(size)
    if kind == "disc":
        geom = {"cx": rng.uniform(0.15, 0.85) * s, "cy": rng.uniform(0.15, 0.85) * s,
                "r": rng.uniform(0.1, 0.28) * s}
    elif kind == "rectangle":
        w, h = rng.uniform(0.2, 0.55, size=2) * s
        x0, y0 = rng.uniform(0.0, s - w), rng.uniform(0.0, s - h)
        geom = {"x0": x0, "y0": y0, "x1": x0 + w, "y1": y0 + h}
    else:
        c = rng.uniform(0.2, 0.8, size=2) * s
        pts = c + rng.uniform(-0.3, 0.3, size=(3, 2)) * s
        geom = {"points": [tuple(map(float, p)) for p in pts]}
    geom = {k: (float(v) if not isinstance(v, list) else v) for k, v in geom.items()}
    return SceneObject(kind=kind, color=color, depth=0.0, geometry=geom)


def gen_scene(seed: int, size: int = 32) -> Scene:
    """Deterministic random scene: 2-6 shapes at distinct depths."""
    rng = rng_stream(seed, "scene")
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    for _ in range(100):
        c0, c1 = rng.uniform(0.2, 0.8, size=(2, 3))
        ang = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(ang) * xs + np.sin(ang) * ys)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        rgb = (c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None])

        n = int(rng.integers(2, 7))
        objects = [_random_object(rng, size) for _ in range(n)]
        ids = np.zeros((size, size), dtype=np.int64)
        # drawn back to front; list order is depth order
        for k, obj in enumerate(objects):
            obj.depth = (k + 1) / n
            cov = _coverage(obj, size)[..., None]
            rgb = rgb * (1 - cov) + np.asarray(NAMED_COLORS[obj.color])[None, None, :] * cov
            ids[cov[..., 0] >= 0.5] = k + 1
        visible = np.bincount(ids.ravel(), minlength=n + 1)[1:]
        if np.all(visible > 0):
            break
    else:
        raise ContractViolation("could not place visible objects")

    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    depth_lut = np.array([0.0] + [o.depth for o in objects], dtype=np.float32)
    seg = SEG_PALETTE[np.minimum(ids, len(SEG_PALETTE) - 1)]
    return Scene(rgb=rgb, depth=depth_lut[ids], seg=seg.astype(np.float32), edges=edge_map(rgb),
                 ids=ids, objects=objects, seed=int(seed))


def caption_tokens(task: TaskSpec, scene: Scene) -> list[int]:
    words = []
    for obj in reversed(scene.objects):  # front-most first
        if obj.color not in words:
            words.append(obj.color)
    ids = list(task.caption_prefix) + [TOKEN_ID[w] for w in words]
    ids = ids[:CAPTION_LEN]
    return ids + [PAD] * (CAPTION_LEN - len(ids))


# ---------------------------------------------------------------------------
# degradations and pairs
# ---------------------------------------------------------------------------

def degrade(canvas: np.ndarray, kind: str, params: dict | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    params = params or {}
    img = np.asarray(canvas, dtype=np.float32)
    if kind == "deblur":
        if rng is None:
            raise ContractViolation("deblur degradation needs an rng")
        sigma = float(params.get("sigma", 0.1))
        return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0).astype(np.float32)
    if kind.startswith("superres"):
        k = int(params.get("factor", kind[len("superres"):-1] or 4))
        h, w, c = img.shape
        if h % k or w % k:
            raise ContractViolation(f"{h}x{w} image not divisible by super-resolution factor {k}")
        small = img.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))
        return np.repeat(np.repeat(small, k, axis=0), k, axis=1).astype(np.float32)
    if kind == "colorize":
        return to_rgb(luminance(img))
    raise ContractViolation(f"no degradation for task {kind!r}")


def scene_map(scene: Scene, which: str) -> np.ndarray:
    if which == "edges":
        return to_rgb(scene.edges)
    if which == "depth":
        return to_rgb(scene.depth)
    return scene.seg.copy()


def random_homography(rng: np.random.Generator, size: int) -> np.ndarray:
    s = float(size)
    ang = rng.uniform(-0.25, 0.25)
    sc = rng.uniform(0.9, 1.1)
    tx = rng.choice([-1.0, 1.0]) * rng.uniform(0.25, 0.6) * s
    ty = rng.uniform(-0.2, 0.2) * s
    c = s / 2
    rot = np.array([[sc * np.cos(ang), -sc * np.sin(ang), 0.0],
                    [sc * np.sin(ang), sc * np.cos(ang), 0.0],
                    [0.0, 0.0, 1.0]])
    persp = np.eye(3)
    persp[2, :2] = rng.uniform(-0.004, 0.004, size=2)
    centre = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    uncentre = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    shift = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1.0]])
    return shift @ centre @ persp @ rot @ uncentre


def apply_homography(hmat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ hmat.T
    return hom[:, :2] / hom[:, 2:3]


def warp_view(scene: Scene | np.ndarray, homography: np.ndarray, rng: np.random.Generator):
    """Render a second view ``I2(x) = I1(H^-1 x)`` with bilinear sampling.

    Returns ``(view, matches, overlap)``; matches pair every reference pixel
    centre that lands inside the second view with its image under ``H``,
    and ``overlap`` is the fraction of second-view pixels whose pre-image
    lies inside the reference.
    """
    img = scene.rgb if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float32)
    hmat = np.asarray(homography, dtype=np.float64)
    if hmat.shape != (3, 3) or abs(np.linalg.det(hmat)) <= 1e-3:
        raise ContractViolation("homography must be an invertible 3x3 matrix")
    h, w, c = img.shape
    inv = np.linalg.inv(hmat)
    ys, xs = np.mgrid[0:h, 0:w]
    centres = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    pre = apply_homography(inv, centres)
    u = pre[:, 0] - 0.5
    v = pre[:, 1] - 0.5
    valid = (u >= -1e-9) & (u <= w - 1 + 1e-9) & (v >= -1e-9) & (v <= h - 1 + 1e-9)
    view = np.zeros((h * w, c), dtype=np.float32)
    for ch in range(c):
        view[:, ch] = ndimage.map_coordinates(img[:, :, ch].astype(np.float64), [v, u], order=1,
                                              mode="nearest")
    view[~valid] = 0.0
    view = np.clip(view.reshape(h, w, c), 0.0, 1.0)

    mapped = apply_homography(hmat, centres)
    inb = (mapped[:, 0] >= 0) & (mapped[:, 0] < w) & (mapped[:, 1] >= 0) & (mapped[:, 1] < h)
    conf = rng.uniform(0.7, 1.0, size=int(inb.sum()))
    matches = lpg.MatchSet(left=centres[inb], right=mapped[inb], confidence=conf)
    return view, matches, float(valid.mean())


def overlap_filter(fraction: float) -> bool:
    if not 0.0 <= fraction <= 1.0:
        raise ContractViolation("overlap fraction must lie in [0, 1]")
    return 0.40 <= fraction <= 0.70


def mask_mode_sampler(rng: np.random.Generator, p_matching: float = 0.25) -> str:
    return "matching" if rng.random() < p_matching else "random"


def make_pair(task: TaskSpec, scene: Scene, rng: np.random.Generator,
              p_matching: float = 0.25) -> TrainPair:
    kind = task.kind
    cap = caption_tokens(task, scene)
    if kind in GENERATION:
        return TrainPair(scene_map(scene, GENERATION[kind]), scene.rgb.copy(), "full", kind, cap)
    if kind in PERCEPTION:
        return TrainPair(scene.rgb.copy(), scene_map(scene, PERCEPTION[kind]), "full", kind, cap)
    if kind in RESTORATION:
        params = {"sigma": task.sigma, "factor": task.factor}
        return TrainPair(degrade(scene.rgb, kind, params, rng), scene.rgb.copy(), "full", kind, cap)

    size = scene.rgb.shape[0]
    for _ in range(200):
        hmat = random_homography(rng, size)
        view, matches, overlap = warp_view(scene, hmat, rng)
        if overlap_filter(overlap):
            break
    else:
        raise ContractViolation("no homography met the overlap window")
    source = mask_mode_sampler(rng, p_matching)
    if source == "matching":
        try:
            mask = lpg.matching_mask(matches, size, size, rng).mask
        except FallbackToRandomMask:
            source = "random"
    if source == "random":
        mask = lpg.random_polygon_mask(size, size, rng)
    return TrainPair(scene.rgb.copy(), view, mask, kind, cap, matches=matches, mask_source=source)


def scene_seed(seed: int, index: int) -> int:
    return int(rng_stream(seed, "dataset-scene", index).integers(0, 2 ** 31 - 1))


def build_dataset(task: str | TaskSpec, count: int, seed: int, out_dir: str | Path,
                  size: int = 32) -> Path:
    """Write ``count`` pairs as PNGs plus ``manifest.jsonl``; returns the manifest path."""
    spec = task if isinstance(task, TaskSpec) else TaskSpec.from_kind(task)
    if count < 1:
        raise ContractViolation("count must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        s = scene_seed(seed, i)
        scene = gen_scene(s, size)
        pair = make_pair(spec, scene, rng_stream(seed, "pair", i))
        left_name, right_name = f"{i:05d}_left.png", f"{i:05d}_right.png"
        save_png(out / left_name, pair.left)
        save_png(out / right_name, pair.right)
        mask_field = "full"
        if not isinstance(pair.mask_mode, str):
            mask_field = f"{i:05d}_mask.png"
            save_mask_png(out / mask_field, pair.mask_mode)
        lines.append(json.dumps({"left": left_name, "right": right_name, "mask": mask_field,
                                 "task": spec.kind, "caption_tokens": pair.caption, "seed": s},
                                sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            for key in ("left", "right"):
                rec[key] = str(path.parent / rec[key])
            if rec["mask"] != "full":
                rec["mask"] = str(path.parent / rec["mask"])
            records.append(rec)
    return records


@dataclass
class PairBatch:
    """In-memory stack of stitched pairs ready for the model."""

    canvas: np.ndarray   # (N, H, 2W, 3)
    mask: np.ndarray     # (N, H, 2W, 1)
    masked: np.ndarray   # (N, H, 2W, 3)
    caption: np.ndarray  # (N, CAPTION_LEN)
    tasks: list[str] = field(default_factory=list)
