"""Rectified-flow interpolation, loss, schedules and Euler sampling.

Convention: ``t = 0`` is clean data and ``t = 1`` is Gaussian noise, so
``z_t = (1 - t) z0 + t eps`` and the regression target is ``eps - z0``.
Sampling integrates from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, NumericFault
from .numerics import Tensor


@dataclass
class FlowSample:
    z_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z0: np.ndarray


@dataclass
class FlowSchedule:
    timesteps: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.float64)
        if ts.ndim != 1 or ts.size < 2 or ts[0] != 1.0 or ts[-1] != 0.0 or np.any(np.diff(ts) >= 0):
            raise ContractViolation("schedule must decrease strictly from 1 to 0")
        self.timesteps = ts

    @property
    def num_steps(self) -> int:
        return self.timesteps.size - 1


def _broadcast_t(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractViolation("t must lie in [0, 1]")
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(z0: np.ndarray, eps: np.ndarray, t) -> FlowSample:
    """Point on the straight path from data (t=0) to noise (t=1).

    ``t`` is a scalar or one value per leading batch entry.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ContractViolation(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    tb = _broadcast_t(t, z0.ndim).astype(z0.dtype)
    z_t = (1 - tb) * z0 + tb * eps
    return FlowSample(z_t=z_t, t=np.asarray(t, dtype=np.float64), eps=eps, z0=z0)


def velocity_target(z0, eps) -> np.ndarray:
    return np.asarray(eps) - np.asarray(z0)


def rf_loss(v_pred, z0, eps) -> Tensor:
    """Mean squared error between predicted velocity and ``eps - z0``."""
    v = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    target = velocity_target(z0, eps)
    if v.shape != target.shape:
        raise ContractViolation(f"prediction {v.shape} and target {target.shape} differ in shape")
    diff = v - Tensor(target)
    return nx.mean(nx.mul(diff, diff))


def make_schedule(n: int) -> FlowSchedule:
    """Uniform grid ``t_i = i / n`` listed from ``i = n`` down to ``0``."""
    if n < 1:
        raise ContractViolation("need at least one sampling step")
    ts = np.arange(n, -1, -1, dtype=np.float64) / n
    return FlowSchedule(ts)


def sample_timesteps(rng: np.random.Generator, batch: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=batch)


def euler_sample(velocity_fn: Callable[[np.ndarray, float], np.ndarray], eps_start: np.ndarray,
                 schedule: FlowSchedule, on_step: Callable[[int, float, np.ndarray], None] | None = None
                 ) -> np.ndarray:
    """Integrate ``dz = v dt`` from noise at ``t = 1`` to data at ``t = 0``.

    ``velocity_fn(z, t)`` already has the masked latent, mask and condition
    bound in.  ``on_step(i, t, z)`` fires before each update with the step
    index counted from 0.
    """
    z = np.array(eps_start, copy=True)
    ts = schedule.timesteps
    for i in range(schedule.num_steps):
        t_cur, t_next = ts[i], ts[i + 1]
        if on_step is not None:
            on_step(i, float(t_cur), z)
        v = velocity_fn(z, float(t_cur))
        v = np.asarray(v.data if isinstance(v, Tensor) else v)
        z = (z + (t_next - t_cur) * v).astype(z.dtype)
        if not np.all(np.isfinite(z)):
            raise NumericFault("non-finite sampler state", step=i)
    return z


def recompose(z: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep sampled content where ``mask == 1`` and the known pixels elsewhere."""
    z = np.asarray(z)
    original = np.asarray(original)
    mask = np.asarray(mask)
    if z.shape != original.shape or mask.shape[:-1] != z.shape[:-1]:
        raise ContractViolation("recompose inputs differ in shape")
    return np.where(mask > 0.5, z, original)
