"""Slow, independent reference implementations used by the tests."""

from __future__ import annotations

import math

import numpy as np


def token_owner(table) -> dict:
    owner = {}
    for b_idx, b in enumerate(table.blocks):
        for t in range(b.start, b.stop):
            owner[t] = b_idx
    return owner


def token_visible(table, i: int, j: int, history_visible: bool = True, owner=None) -> bool:
    """Token-level visibility from first principles, one (query, key) pair at a time."""
    owner = owner or token_owner(table)
    bq, bk = owner[i], owner[j]
    q, k = table.blocks[bq], table.blocks[bk]
    latent = lambda blk: blk.kind.token not in ("text", "image")
    noisy = lambda blk: blk.kind.token.startswith("noise")
    if bq == bk:
        return True if latent(q) else j <= i
    if bk > bq or noisy(k):
        return False
    if not history_visible and latent(k) and k.turn < q.turn:
        return False
    return True


def dense_mask(table, history_visible: bool = True) -> np.ndarray:
    n = table.n_tokens
    owner = token_owner(table)
    return np.array([[token_visible(table, i, j, history_visible, owner) for j in range(n)] for i in range(n)])


def render_grid(table, dense: np.ndarray) -> str:
    """Classify each block pair of a dense mask as C / B / F / ·."""
    rows = []
    for qi, q in enumerate(table.blocks):
        row = []
        for ki, k in enumerate(table.blocks):
            sub = dense[q.start : q.stop, k.start : k.stop]
            if not sub.any():
                row.append("·")
            elif sub.all():
                row.append("B" if qi == ki else "F")
            elif np.array_equal(sub, np.tri(*sub.shape, dtype=bool)):
                row.append("C")
            else:
                row.append("?")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"


def count_tokens(traj, mode: str, with_image: bool = True) -> int:
    """Token count of a packed trajectory, from the layout rules alone."""
    total = 0
    states = traj.states()
    texts = [traj.caption] + [t.instruction for t in traj.turns]
    for k, (asset, text) in enumerate(zip(states, texts)):
        total += len(text) + 2
        if k == 0 and with_image:
            total += (asset.grid_n // 4) ** 2
        coarse = (asset.grid_n // 2) ** 3
        if mode == "train":
            total += 2 * coarse + 4 * len(asset)
        elif k == len(states) - 1:
            total += coarse
        else:
            total += coarse + 2 * len(asset)
    return total


def mrope_complex(v, p, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotate via complex multiplication, one pair at a time."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    for k in range(head_dim // 2):
        theta = base ** (-2.0 * k / head_dim)
        z = complex(v[2 * k], v[2 * k + 1]) * np.exp(1j * p[k % 3] * theta)
        out[2 * k], out[2 * k + 1] = z.real, z.imag
    return out


def attention_loop(q, k, v, mask):
    """Per head, per query row softmax over visible keys."""
    h, n, d = q.shape
    out = np.zeros((h, n, v.shape[-1]))
    for a in range(h):
        for i in range(n):
            vis = np.flatnonzero(mask[i])
            s = np.array([q[a, i] @ k[a, j] for j in vis]) / math.sqrt(d)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[a, i] = w @ v[a, vis]
    return out


def adamw_scalar(p, g, lr, t, m=0.0, v=0.0, b1=0.9, b2=0.95, eps=1e-8, wd=0.05):
    """One AdamW step on a Python float, written out longhand."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p = p * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p, m, v


def cross_entropy_rows(logits, targets) -> float:
    total = 0.0
    for row, t in zip(np.asarray(logits, dtype=np.float64), targets):
        mx = row.max()
        total += -(row[t] - mx - math.log(np.exp(row - mx).sum()))
    return total / len(targets)


def voxel_iou(a_coords, b_coords) -> float:
    a = set(map(tuple, np.asarray(a_coords).tolist()))
    b = set(map(tuple, np.asarray(b_coords).tolist()))
    return len(a & b) / len(a | b) if a | b else 1.0
