"""Run configuration: strict JSON parsing, validation and dotted overrides."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ContractViolation
from .model import ModelConfig
from .taskdata import TASK_KINDS

TUNING_MODES = ("lora", "prompt", "full")
SEED_ENV = "LPGFLOW_SEED"


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    train_steps: int = 2000

    def validate(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ContractViolation("optimizer.lr must be a positive finite number")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractViolation(f"optimizer.{name} must lie in [0, 1)")
        if not self.eps > 0 or self.weight_decay < 0:
            raise ContractViolation("optimizer.eps must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.train_steps < 0:
            raise ContractViolation("optimizer.batch_size must be >= 1 and train_steps >= 0")


@dataclass
class FlowConfig:
    sample_steps: int = 50
    t_sampling: str = "uniform"
    attn_interval: int = 10

    def validate(self):
        if self.sample_steps < 1 or self.attn_interval < 1:
            raise ContractViolation("flow.sample_steps and flow.attn_interval must be >= 1")
        if self.t_sampling != "uniform":
            raise ContractViolation("flow.t_sampling supports only 'uniform'")


@dataclass
class TaskConfig:
    kind: str = "colorize"
    sigma: float = 0.1
    p_matching: float = 0.25
    image_size: int = 32

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ContractViolation(f"task.kind {self.kind!r} is not a known task")
        if not 0.0 <= self.p_matching <= 1.0 or self.sigma < 0:
            raise ContractViolation("task.p_matching must lie in [0, 1] and sigma >= 0")
        if self.image_size < 8:
            raise ContractViolation("task.image_size must be >= 8")


@dataclass
class PathsConfig:
    manifest: list[str] = field(default_factory=list)
    base_checkpoint: str = ""
    out_dir: str = "runs/default"

    def validate(self):
        if isinstance(self.manifest, str):
            self.manifest = [self.manifest] if self.manifest else []


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    tuning_mode: str = "lora"
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        for part in (self.optimizer, self.flow, self.task, self.paths):
            part.validate()
        if self.tuning_mode not in TUNING_MODES:
            raise ContractViolation(f"tuning_mode must be one of {TUNING_MODES}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ContractViolation("seed must be a non-negative integer")
        if self.task.image_size % self.model.patch_size:
            raise ContractViolation("task.image_size must be a multiple of model.patch_size")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "").validate()


_SECTIONS = {"model": ModelConfig, "optimizer": OptimizerConfig, "flow": FlowConfig,
             "task": TaskConfig, "paths": PathsConfig}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ContractViolation(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ContractViolation(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, prefix + name + ".")
        else:
            kwargs[name] = _coerce(known[name], value, prefix + name)
    return cls(**kwargs)


def _coerce(f, value, path: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ContractViolation(f"{path} must be an integer")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ContractViolation(f"{path} must be a number")
        return float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ContractViolation(f"{path} must be a string")
    return value


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ContractViolation(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractViolation(f"cannot override below scalar key in {text!r}")
        node[path[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                seed_flag: int | None = None) -> RunConfig:
    """Config file, then ``--set`` overrides; seed precedence is flag > env > file."""
    data = json.loads(Path(path).read_text()) if path else {}
    data = apply_overrides(data, overrides or [])
    env_seed = os.environ.get(SEED_ENV)
    if seed_flag is not None:
        data["seed"] = seed_flag
    elif env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ContractViolation(f"{SEED_ENV} must be an integer") from exc
    return RunConfig.from_dict(data)
