"""Binary checkpoint format.

Layout::

    b"LPGF" | u32 version | u64 header length | header JSON | tensor blobs

All integers are little-endian.  The header maps tensor names to shape,
dtype ("f32"), byte offset (relative to the first blob) and byte length,
and carries a ``kind`` tag ("base", "lora" or "prompt"), the step count
and free-form metadata.  Tensors are laid out in sorted name order and the
header is serialised with sorted keys, so saving the same content twice
gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, CorruptFile, DimensionMismatch
from .model import DiT, LoraAdapter, ModelConfig, PromptTokens
from .numerics import Tensor

MAGIC = b"LPGF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    step: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"tensor {name} has non-finite values")
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {"kind": ckpt.kind, "tensors": entries, "step": int(ckpt.step),
              "config": ckpt.config, "meta": ckpt.meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def _header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise CorruptFile("file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFile("bad magic")
    if version != VERSION:
        raise CorruptFile(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise CorruptFile("truncated header")
    try:
        header = json.loads(buf[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile("header is not valid JSON") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors", {}), dict):
        raise CorruptFile("header has the wrong structure")
    return header, start + hlen


def decode(buf: bytes) -> Checkpoint:
    header, base = _header(buf)
    tensors = {}
    spans = []
    for name, info in header.get("tensors", {}).items():
        try:
            if info.get("dtype") != "f32":
                raise CorruptFile(f"unsupported dtype for {name}")
            off, length = int(info["offset"]), int(info["length"])
            shape = tuple(int(s) for s in info["shape"])
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"malformed entry for {name}") from exc
        if length != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or min(shape, default=0) < 0:
            raise CorruptFile(f"inconsistent size for {name}")
        if base + off + length > len(buf):
            raise CorruptFile(f"truncated blob for {name}")
        spans.append((off, off + length))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=length // 4, offset=base + off).reshape(shape).astype(np.float32)
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptFile("overlapping tensor blobs")
    return Checkpoint(kind=header.get("kind", ""), tensors=tensors, step=int(header.get("step", 0)),
                      config=header.get("config", {}), meta=header.get("meta", {}))


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def read_header(path: str | Path) -> dict:
    """Header of a checkpoint whose blobs have also been validated."""
    buf = Path(path).read_bytes()
    decode(buf)
    return _header(buf)[0]


# -- model objects <-> checkpoints ----------------------------------------------

def model_checkpoint(model: DiT, step: int = 0, run_config: dict | None = None) -> Checkpoint:
    return Checkpoint(kind="base", tensors=model.state_dict(), step=step,
                      config=run_config or {}, meta={"model": model.config.to_dict()})


def model_from_checkpoint(ckpt: Checkpoint) -> DiT:
    if ckpt.kind != "base":
        raise ContractViolation(f"expected a base checkpoint, got kind {ckpt.kind!r}")
    model = DiT(ModelConfig(**ckpt.meta["model"]))
    model.load_state_dict(ckpt.tensors)
    return model


def adapter_checkpoint(adapter: LoraAdapter, step: int = 0, model_config: ModelConfig | None = None) -> Checkpoint:
    tensors = {}
    for site, (a, b) in adapter.factors.items():
        tensors[site + ".A"] = a.data
        tensors[site + ".B"] = b.data
    meta = {"task": adapter.task, "rank": adapter.rank, "scale": adapter.scale}
    if model_config is not None:
        meta["hidden_dim"] = model_config.hidden_dim
        meta["num_layers"] = model_config.num_layers
    return Checkpoint(kind="lora", tensors=tensors, step=step, meta=meta)


def adapter_from_checkpoint(ckpt: Checkpoint, model_config: ModelConfig | None = None) -> LoraAdapter:
    if ckpt.kind != "lora":
        raise ContractViolation(f"expected a lora checkpoint, got kind {ckpt.kind!r}")
    adapter = LoraAdapter(task=ckpt.meta.get("task", ""), rank=int(ckpt.meta["rank"]),
                          scale=float(ckpt.meta["scale"]))
    sites = sorted({name.rsplit(".", 1)[0] for name in ckpt.tensors})
    for site in sites:
        try:
            a, b = ckpt.tensors[site + ".A"], ckpt.tensors[site + ".B"]
        except KeyError as exc:
            raise CorruptFile(f"adapter site {site} lacks a factor") from exc
        adapter.factors[site] = (Tensor(a), Tensor(b))
    if model_config is not None:
        adapter.check_compatible(model_config)
    return adapter


def prompt_checkpoint(prompt: PromptTokens, task: str, step: int = 0) -> Checkpoint:
    return Checkpoint(kind="prompt", tensors={"prompt": prompt.tokens.data}, step=step, meta={"task": task})


def prompt_from_checkpoint(ckpt: Checkpoint, model_config: ModelConfig | None = None) -> PromptTokens:
    if ckpt.kind != "prompt":
        raise ContractViolation(f"expected a prompt checkpoint, got kind {ckpt.kind!r}")
    tokens = ckpt.tensors["prompt"]
    if model_config is not None and tokens.shape[1] != model_config.hidden_dim:
        raise DimensionMismatch("prompt token width does not match the model")
    return PromptTokens(Tensor(tokens), trainable=False)
