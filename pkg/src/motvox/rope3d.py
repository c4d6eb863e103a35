"""Rotary position encodings: 1D for text/image, interleaved 3D for voxels.

Rotation pairs (dims 2k, 2k+1) are striped over the axes by pair index:
pair k rotates with the x coordinate when k % 3 == 0, y when k % 3 == 1 and
z when k % 3 == 2, at frequency base ** (-2k / D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_POSITION = 1 << 20


class RopeConfigError(ValueError):
    pass


class PositionOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base_freq: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 6:
            raise RopeConfigError(f"head_dim must be a positive multiple of 6, got {self.head_dim}")

    @property
    def pairs(self) -> int:
        return self.head_dim // 2

    def axis_sets(self) -> tuple:
        k = np.arange(self.pairs)
        return tuple(np.flatnonzero(k % 3 == a) for a in range(3))

    def freqs(self) -> np.ndarray:
        k = np.arange(self.pairs, dtype=np.float64)
        return self.base_freq ** (-2.0 * k / self.head_dim)


def angles(positions, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle per (token, pair) for position triples of shape (n, 3)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    owner = np.arange(cfg.pairs) % 3
    return pos[:, owner] * cfg.freqs()[None, :]


def tables(positions, cfg: RopeConfig, dtype=np.float32):
    theta = angles(positions, cfg)
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def _rotate(v, theta):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    c, s = np.cos(theta), np.sin(theta)
    out[..., 0::2] = v[..., 0::2] * c - v[..., 1::2] * s
    out[..., 1::2] = v[..., 0::2] * s + v[..., 1::2] * c
    return out


def apply_mrope(v, p, cfg: RopeConfig) -> np.ndarray:
    """Rotate a head vector by the 3D position ``p = (x, y, z)``."""
    v = np.asarray(v)
    if v.shape[-1] != cfg.head_dim:
        raise RopeConfigError(f"vector has {v.shape[-1]} dims, config expects {cfg.head_dim}")
    return _rotate(v, angles([p], cfg)[0])


def apply_rope1d(v, pos: int, cfg: RopeConfig) -> np.ndarray:
    return apply_mrope(v, (pos, pos, pos), cfg)


def turn_offset(turn: int, grid_n: int) -> int:
    return turn * grid_n * 4


def positions_for_block(kind: str, turn: int, grid_n: int, *, coords=None, count: int = 0, start: int = 0) -> np.ndarray:
    """Position triples for one block.

    Latent blocks pass voxel ``coords`` (n, 3); text and image blocks pass a
    token ``count`` and the running index ``start`` within their turn. Every
    component is shifted by the turn offset.
    """
    off = turn_offset(turn, grid_n)
    if coords is not None:
        pos = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + off
    else:
        idx = np.arange(start, start + count, dtype=np.int64) + off
        pos = np.repeat(idx[:, None], 3, axis=1)
    if pos.size and (pos.min() < 0 or pos.max() >= MAX_POSITION):
        raise PositionOverflowError(f"{kind} block position outside [0, 2^20)")
    return pos
