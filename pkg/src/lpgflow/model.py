"""Diffusion-transformer velocity network with LoRA and prompt-token tuning.

The network sees the channel concatenation ``[z_t; z0_masked; mask]`` of a
stitched canvas, cut into ``p x p`` patches.  Task caption tokens (and, in
prompt-tuning mode, learned prompt tokens) are prepended to the visual
sequence and every block runs joint self-attention over both.  Rotary
position encoding uses separate row and column frequencies; column indices
run continuously across the seam of the stitched canvas.

By default the output head estimates the clean canvas and the velocity is
formed analytically as ``(z_t - z0_hat) / max(t, t_floor)``; a per-pixel
skip path lets that estimate copy the masked latent where pixels are known.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, DimensionMismatch
from .numerics import Tensor

LORA_SITES = ("q", "k", "v", "o", "fc1", "fc2")


@dataclass
class ModelConfig:
    patch_size: int = 8
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    image_channels: int = 3
    in_channels: int = 7
    token_vocab_size: int = 64
    num_prompt_tokens: int = 50
    lora_rank: int = 8
    lora_scale: float = 1.0
    mlp_ratio: int = 4
    time_freq_dim: int = 64
    rope_base: float = 10000.0
    parameterization: str = "data"   # "data": head predicts z0, converted to velocity; "velocity": direct
    t_floor: float = 0.05

    def __post_init__(self):
        if self.parameterization not in ("data", "velocity"):
            raise ContractViolation("parameterization must be 'data' or 'velocity'")
        if not 0.0 < self.t_floor <= 1.0:
            raise ContractViolation("t_floor must lie in (0, 1]")
        if self.in_channels != 2 * self.image_channels + 1:
            raise ContractViolation("in_channels must equal 2 * image_channels + 1")
        if self.hidden_dim % (2 * self.num_heads):
            raise ContractViolation("hidden_dim must be divisible by 2 * num_heads")
        for name in ("patch_size", "hidden_dim", "num_layers", "num_heads", "token_vocab_size",
                     "num_prompt_tokens", "lora_rank", "mlp_ratio", "time_freq_dim"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.time_freq_dim % 2:
            raise ContractViolation("time_freq_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def site_dims(self, site: str) -> tuple[int, int]:
        """(d_in, d_out) of a LoRA-targeted linear layer."""
        d, f = self.hidden_dim, self.hidden_dim * self.mlp_ratio
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "fc1": (d, f), "fc2": (f, d)}[site]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

def patchify(x, patch_size: int):
    """Cut ``(B, H, W, C)`` canvases into flattened ``p x p`` patches.

    Returns ``(patches, positions)`` where patches is ``(B, N, p*p*C)`` in
    row-major patch order and positions is an ``(N, 2)`` int array of
    (row, col) patch coordinates.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, h, w, c = x.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ContractViolation(f"canvas {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    t = x.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return t, np.stack([rows, cols], axis=1)


def unpatchify(tokens, patch_size: int, height: int, width: int) -> Tensor:
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    b, n, k = tokens.shape
    p = patch_size
    gh, gw = height // p, width // p
    c = k // (p * p)
    if gh * gw != n or c * p * p != k:
        raise ContractViolation("token count does not match canvas geometry")
    return tokens.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, height, width, c)


def pool_mask(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Average a ``(B, H, W, 1)`` mask over each patch -> ``(B, N)``."""
    b, h, w, _ = mask.shape
    p = patch_size
    m = mask.reshape(b, h // p, p, w // p, p).mean(axis=(2, 4))
    return m.reshape(b, -1)


# ---------------------------------------------------------------------------
# rotary position encoding
# ---------------------------------------------------------------------------

def _axis_pairs(head_dim: int) -> tuple[int, int]:
    pairs = head_dim // 2
    return pairs // 2, pairs - pairs // 2


def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angle for every (token, rotary pair): shape ``(T, head_dim // 2)``.

    The first half of the pairs rotate with the row index, the rest with
    the column index; pair ``j`` of an axis with ``n`` pairs turns at
    ``base ** (-j / n)`` radians per unit position.
    """
    if head_dim % 2:
        raise ContractViolation("head_dim must be even for rotary encoding")
    positions = np.asarray(positions, dtype=np.float64)
    n_row, n_col = _axis_pairs(head_dim)
    f_row = base ** (-np.arange(n_row) / max(n_row, 1))
    f_col = base ** (-np.arange(n_col) / max(n_col, 1))
    return np.concatenate([positions[:, :1] * f_row, positions[:, 1:2] * f_col], axis=1)


def _rotate_half_matrix(head_dim: int) -> np.ndarray:
    r = np.zeros((head_dim, head_dim))
    for j in range(head_dim // 2):
        # (x0, x1) -> (-x1, x0)
        r[2 * j + 1, 2 * j] = -1.0
        r[2 * j, 2 * j + 1] = 1.0
    return r


def rope_apply(q, k, positions: np.ndarray, base: float = 10000.0):
    """Rotate query/key vectors ``(..., T, head_dim)`` by their 2-D positions."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    hd = q.shape[-1]
    if hd % 2 or k.shape[-1] != hd:
        raise ContractViolation("rotary encoding needs matching even head dims")
    ang = rope_angles(positions, hd, base)
    cos = Tensor(np.repeat(np.cos(ang), 2, axis=1))
    sin = Tensor(np.repeat(np.sin(ang), 2, axis=1))
    rot = Tensor(_rotate_half_matrix(hd))
    return q * cos + (q @ rot) * sin, k * cos + (k @ rot) * sin


# ---------------------------------------------------------------------------
# adapters and prompt tokens
# ---------------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Low-rank factor pairs keyed by site id ``"blocks.{i}.{q|k|v|o|fc1|fc2}"``.

    ``A`` is ``(r, d_in)`` and ``B`` is ``(d_out, r)``; the site output gains
    ``scale * B @ A @ x``.
    """

    task: str
    rank: int
    scale: float
    factors: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, task: str, rng: np.random.Generator,
               rank: int | None = None, scale: float | None = None) -> "LoraAdapter":
        r = rank or config.lora_rank
        adapter = cls(task=task, rank=r, scale=config.lora_scale if scale is None else scale)
        for i in range(config.num_layers):
            for site in LORA_SITES:
                d_in, d_out = config.site_dims(site)
                if r > min(d_in, d_out):
                    raise ContractViolation(f"rank {r} exceeds layer width at {site}")
                a = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(r, d_in))
                adapter.factors[f"blocks.{i}.{site}"] = (
                    Tensor(a, requires_grad=True), Tensor(np.zeros((d_out, r)), requires_grad=True))
        return adapter

    def parameters(self) -> list[Tensor]:
        return [t for site in sorted(self.factors) for t in self.factors[site]]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def check_compatible(self, config: ModelConfig) -> None:
        expected = {f"blocks.{i}.{s}" for i in range(config.num_layers) for s in LORA_SITES}
        if set(self.factors) != expected:
            raise DimensionMismatch("adapter sites do not match the model's layers")
        for site, (a, b) in self.factors.items():
            d_in, d_out = config.site_dims(site.split(".")[-1])
            if a.shape[1] != d_in or b.shape[0] != d_out or a.shape[0] != b.shape[1]:
                raise DimensionMismatch(f"adapter factor shapes at {site} do not fit the model")


def lora_apply(x, w0, a, b, scale: float, bias=None) -> Tensor:
    """``x @ W0 (+ bias) + scale * (x @ A.T) @ B.T`` for row-vector inputs.

    ``W0`` is stored ``(d_in, d_out)`` so that ``x @ W0`` maps row vectors.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w0 = w0 if isinstance(w0, Tensor) else Tensor(w0)
    h = x @ w0
    if bias is not None:
        h = h + bias
    if a is None:
        return h
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape[0] != b.shape[1]:
        raise ContractViolation(f"LoRA rank mismatch: A has {a.shape[0]} rows, B has {b.shape[1]} columns")
    if a.shape[1] != w0.shape[0] or b.shape[0] != w0.shape[1]:
        raise DimensionMismatch("LoRA factors do not fit the base weight")
    delta = (x @ a.transpose()) @ b.transpose()
    return h + (delta if scale == 1.0 else delta * scale)


def lora_merge(adapters: list[LoraAdapter]) -> LoraAdapter:
    """Combine adapters into one whose delta is the sum of their deltas.

    Factors are stacked along the rank axis, so each site computes
    ``sum_i scale_i * B_i A_i x`` in one pass.
    """
    if not adapters:
        raise ContractViolation("nothing to merge")
    sites = set(adapters[0].factors)
    for ad in adapters[1:]:
        if set(ad.factors) != sites:
            raise ContractViolation("adapters target different layer sites")
        for s in sites:
            if (ad.factors[s][0].shape[1] != adapters[0].factors[s][0].shape[1]
                    or ad.factors[s][1].shape[0] != adapters[0].factors[s][1].shape[0]):
                raise DimensionMismatch(f"adapter widths differ at {s}")
    if len(adapters) == 1:
        only = adapters[0]
        return LoraAdapter(task=only.task, rank=only.rank, scale=only.scale,
                           factors={s: (Tensor(a.data), Tensor(b.data)) for s, (a, b) in only.factors.items()})
    same_scale = all(ad.scale == adapters[0].scale for ad in adapters)
    merged = LoraAdapter(task="+".join(ad.task for ad in adapters),
                         rank=sum(ad.rank for ad in adapters),
                         scale=adapters[0].scale if same_scale else 1.0)
    for s in sorted(sites):
        a = np.concatenate([ad.factors[s][0].data * (1.0 if same_scale else ad.scale)
                            for ad in adapters], axis=0)
        b = np.concatenate([ad.factors[s][1].data for ad in adapters], axis=1)
        merged.factors[s] = (Tensor(a), Tensor(b))
    return merged


@dataclass
class PromptTokens:
    tokens: Tensor
    trainable: bool = True

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def init_prompt_tokens(description_token_ids, embedding_table, num_prompt_tokens: int = 50,
                       trainable: bool = True) -> PromptTokens:
    """Every prompt row starts at the mean embedding of the task description."""
    ids = np.asarray(description_token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ContractViolation("task description must contain at least one token")
    table = embedding_table.data if isinstance(embedding_table, Tensor) else np.asarray(embedding_table)
    mean_row = table[ids].mean(axis=0)
    rows = np.tile(mean_row[None, :], (num_prompt_tokens, 1))
    return PromptTokens(Tensor(rows, requires_grad=trainable), trainable)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class DiT:
    """Single-stream diffusion transformer predicting rectified-flow velocity."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = nx.rng_stream(seed, "model-init")
        c = config
        d, f = c.hidden_dim, c.hidden_dim * c.mlp_ratio
        patch_in = c.patch_size ** 2 * c.in_channels
        patch_out = c.patch_size ** 2 * c.image_channels

        def dense(name, d_in, d_out, std=None):
            std = 1.0 / math.sqrt(d_in) if std is None else std
            self.params[name] = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), name=name)

        def zeros(name, *shape):
            self.params[name] = Tensor(np.zeros(shape), name=name)

        dense("patch.w", patch_in, d)
        zeros("patch.b", d)
        self.params["mask.embed"] = Tensor(rng.normal(0.0, 0.02, size=(d,)), name="mask.embed")
        self.params["tok.embed"] = Tensor(rng.normal(0.0, 1.0, size=(c.token_vocab_size, d)), name="tok.embed")
        dense("time.w1", c.time_freq_dim, d)
        zeros("time.b1", d)
        dense("time.w2", d, d)
        zeros("time.b2", d)
        for i in range(c.num_layers):
            pre = f"blocks.{i}."
            dense(pre + "ada.w", d, 6 * d, std=0.02)
            zeros(pre + "ada.b", 6 * d)
            for site in ("q", "k", "v", "o"):
                dense(pre + site + ".w", d, d)
                zeros(pre + site + ".b", d)
            dense(pre + "fc1.w", d, f)
            zeros(pre + "fc1.b", f)
            dense(pre + "fc2.w", f, d)
            zeros(pre + "fc2.b", d)
        dense("final.ada.w", d, 2 * d, std=0.02)
        zeros("final.ada.b", 2 * d)
        zeros("out.w", d, patch_out)
        zeros("out.b", patch_out)
        # per-pixel path: timestep-dependent weights on z_t, z0_masked and mask
        zeros("skip.w", d, 3)
        zeros("skip.b", 3)
        if c.parameterization == "data":
            # start from z0 estimate = masked latent, which is exact on known pixels
            self.params["skip.b"].data[1] = 1.0

    # -- parameter management ------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in sorted(self.params)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) ^ set(state))
            raise DimensionMismatch(f"checkpoint tensors do not match model: {missing[:4]}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise DimensionMismatch(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=np.float32).copy()

    # -- forward -------------------------------------------------------------

    def _linear(self, x: Tensor, layer: int, site: str, adapter: LoraAdapter | None) -> Tensor:
        pre = f"blocks.{layer}.{site}"
        a = b = None
        if adapter is not None and pre in adapter.factors:
            a, b = adapter.factors[pre]
        return lora_apply(x, self.params[pre + ".w"], a, b,
                          adapter.scale if adapter is not None else 1.0, bias=self.params[pre + ".b"])

    def forward(self, z_t, z0_masked, mask, cond_ids, t, adapter: LoraAdapter | None = None,
                prompt: PromptTokens | None = None, use_condition: bool = True,
                record: list | None = None) -> Tensor:
        """Velocity for a batch of stitched canvases.

        ``z_t``/``z0_masked``: ``(B, H, 2W, C)``; ``mask``: ``(B, H, 2W, 1)``;
        ``cond_ids``: ``(B, L)`` ints; ``t``: ``(B,)`` in [0, 1].  When
        ``record`` is a list, each block appends its ``(B, heads, T, T)``
        attention probabilities and the number of condition tokens.
        """
        c = self.config
        p = self.params
        zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        zm = z0_masked if isinstance(z0_masked, Tensor) else Tensor(z0_masked)
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        if zt.ndim != 4 or zt.shape != zm.shape or m.shape != zt.shape[:3] + (1,):
            raise ContractViolation(
                f"inconsistent input triple: z_t {zt.shape}, z0_masked {zm.shape}, mask {m.shape}")
        if zt.shape[3] != c.image_channels:
            raise ContractViolation("channel count does not match config")
        bsz, height, width, _ = zt.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (bsz,))
        if np.any(t < 0) or np.any(t > 1):
            raise ContractViolation("t must lie in [0, 1]")

        x = nx.concat([zt, zm, Tensor(m)], axis=-1)
        patches, pos = patchify(x, c.patch_size)
        h = patches @ p["patch.w"] + p["patch.b"]
        pooled = Tensor(pool_mask(m, c.patch_size)[:, :, None])
        h = h + pooled * p["mask.embed"]

        temb = Tensor(timestep_embedding(t, c.time_freq_dim))
        cvec = nx.silu(temb @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
        cact = nx.silu(cvec)

        pieces = []
        if prompt is not None:
            pieces.append(Tensor(np.ones((bsz, 1, 1))) * prompt.tokens)
        if use_condition:
            ids = np.asarray(cond_ids, dtype=np.int64).reshape(bsz, -1)
            pieces.append(nx.embedding(p["tok.embed"], ids))
        n_cond = sum(piece.shape[1] for piece in pieces)
        seq = nx.concat(pieces + [h], axis=1) if pieces else h
        positions = np.concatenate([np.zeros((n_cond, 2), dtype=np.int64), pos], axis=0)

        d, nh, hd = c.hidden_dim, c.num_heads, c.head_dim
        ntok = seq.shape[1]
        for i in range(c.num_layers):
            mod = (cact @ p[f"blocks.{i}.ada.w"] + p[f"blocks.{i}.ada.b"]).reshape(bsz, 1, 6 * d)
            sh1, sc1, g1, sh2, sc2, g2 = (mod[:, :, j * d:(j + 1) * d] for j in range(6))

            xn = nx.layernorm(seq) * (sc1 + 1.0) + sh1
            q = self._linear(xn, i, "q", adapter).reshape(bsz, ntok, nh, hd).transpose(0, 2, 1, 3)
            k = self._linear(xn, i, "k", adapter).reshape(bsz, ntok, nh, hd).transpose(0, 2, 1, 3)
            v = self._linear(xn, i, "v", adapter).reshape(bsz, ntok, nh, hd).transpose(0, 2, 1, 3)
            q, k = rope_apply(q, k, positions, c.rope_base)
            att = nx.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)), axis=-1)
            if record is not None:
                record.append((att.data.copy(), n_cond))
            o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, ntok, d)
            seq = seq + self._linear(o, i, "o", adapter) * (g1 + 1.0)

            xn = nx.layernorm(seq) * (sc2 + 1.0) + sh2
            ff = self._linear(nx.gelu(self._linear(xn, i, "fc1", adapter)), i, "fc2", adapter)
            seq = seq + ff * (g2 + 1.0)

        vis = seq[:, n_cond:, :] if n_cond else seq
        fmod = (cact @ p["final.ada.w"] + p["final.ada.b"]).reshape(bsz, 1, 2 * d)
        vis = nx.layernorm(vis) * (fmod[:, :, d:] + 1.0) + fmod[:, :, :d]
        out = unpatchify(vis @ p["out.w"] + p["out.b"], c.patch_size, height, width)
        coef = (cact @ p["skip.w"] + p["skip.b"]).reshape(bsz, 1, 1, 3)
        skip = zt * coef[..., 0:1] + zm * coef[..., 1:2] + Tensor(m) * coef[..., 2:3]
        head = out + skip
        if c.parameterization == "velocity":
            return head
        # v = (z_t - z0_hat) / t, with t floored so errors are not amplified without bound
        inv_t = 1.0 / np.maximum(t, c.t_floor)
        return (zt - head) * Tensor(inv_t.reshape(bsz, 1, 1, 1))

    __call__ = forward


def predict_velocity(model: DiT, z_t, z0_masked, mask, cond_ids, t,
                     adapter: LoraAdapter | None = None, prompt: PromptTokens | None = None,
                     record: list | None = None) -> Tensor:
    """Functional entry point around :meth:`DiT.forward`; accepts unbatched inputs."""
    z_t = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t)
    batched = z_t.ndim == 4
    if not batched:
        z_t = z_t[None]
        z0_masked = np.asarray(z0_masked)[None]
        mask = np.asarray(mask)[None]
        cond_ids = np.asarray(cond_ids)[None]
    out = model.forward(z_t, z0_masked, mask, cond_ids, t, adapter=adapter, prompt=prompt, record=record)
    return out if batched else out.reshape(out.shape[1:])


def attention_scores(model: DiT, inputs: dict, layer: int, head: int):
    """Attention distribution of one head plus left-canvas mass per right query.

    ``inputs`` holds the keyword arguments of :meth:`DiT.forward`.  Returns
    ``(probs, left_mass)`` with probs ``(B, T, T)`` and left_mass
    ``(B, n_right)`` for right-canvas query tokens in patch order.
    """
    c = model.config
    if not (0 <= layer < c.num_layers and 0 <= head < c.num_heads):
        raise ContractViolation(f"layer {layer} / head {head} outside model config")
    record: list = []
    model.forward(**inputs, record=record)
    att, n_cond = record[layer]
    probs = att[:, head]
    width = np.asarray(inputs["z_t"].data if isinstance(inputs["z_t"], Tensor) else inputs["z_t"]).shape[2]
    return probs, left_mass(probs, n_cond, width // c.patch_size)


def left_mass(probs: np.ndarray, n_cond: int, grid_w: int) -> np.ndarray:
    """Mass each right-canvas query puts on left-canvas keys.

    ``probs`` is ``(..., T, T)``; visual tokens follow ``n_cond`` condition
    tokens in row-major patch order over a grid ``grid_w`` patches wide.
    """
    n_vis = probs.shape[-1] - n_cond
    cols = np.arange(n_vis) % grid_w
    left = cols < grid_w // 2
    right_q = n_cond + np.nonzero(~left)[0]
    left_k = n_cond + np.nonzero(left)[0]
    sub = probs[..., right_q, :]
    return sub[..., left_k].sum(axis=-1)


def count_trainable(model: DiT, adapter: LoraAdapter | None = None,
                    prompt: PromptTokens | None = None) -> int:
    total = sum(p.data.size for p in model.parameters() if p.requires_grad)
    if adapter is not None:
        total += sum(t.data.size for t in adapter.parameters() if t.requires_grad)
    if prompt is not None and prompt.tokens.requires_grad:
        total += prompt.tokens.data.size
    return total
