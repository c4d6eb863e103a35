"""Conditional flow matching on the linear path x_t = (1 - t) x0 + t x1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as T


@dataclass(frozen=True)
class GuidanceConfig:
    dropout_p: float = 0.1
    weight: float = 3.0
    shift: float = 1.0
    steps: int = 25

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.shift < 1.0:
            raise ValueError("shift must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: float

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ValueError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")

    @property
    def xt(self) -> np.ndarray:
        return interpolate(self.x0, self.x1, self.t)

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0


def interpolate(x0, x1, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    return (1.0 - t) * x0 + t * x1


def cfm_loss(v_pred, x0, x1) -> T.Tensor:
    """Mean squared error between predicted velocity and x1 - x0."""
    target = np.asarray(x1) - np.asarray(x0)
    return T.mse(v_pred, T.Tensor(target))


def shift_t(u, s: float):
    """Monotone remap of [0, 1] onto itself; s > 1 pushes mass toward t = 1."""
    if s < 1.0:
        raise ValueError("shift must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    return s * u / (1.0 + (s - 1.0) * u)


def sample_t(rng: np.random.Generator, s: float = 1.0) -> float:
    return float(shift_t(rng.random(), s))


def guided_velocity(v_cond, v_uncond, w: float):
    # written as a blend so w = 0 and w = 1 return the inputs exactly
    return (1.0 - w) * v_uncond + w * v_cond


def drop_condition(rng: np.random.Generator, p: float) -> bool:
    """One Bernoulli(p) draw from the caller's dedicated dropout stream."""
    return bool(rng.random() < p)


def time_grid(steps: int, shift: float = 1.0) -> np.ndarray:
    return shift_t(np.linspace(0.0, 1.0, steps + 1), shift)


def euler_sample(velocity: Callable, shape, steps: int, seed: int, cond=None, shift: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Integrate dx/dt = velocity(x, t, cond) from Gaussian noise at t=0 to t=1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    grid = time_grid(steps, shift)
    for k in range(steps):
        dt = grid[k + 1] - grid[k]
        x = x + dtype(dt) * np.asarray(velocity(x, float(grid[k]), cond), dtype=dtype)
    return x
