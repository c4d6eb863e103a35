"""Minimal dense tensors with tape-based reverse-mode autodiff.

Every differentiable op records a node holding its inputs and whatever it
needs for the backward pass. ``backward`` collects the nodes reachable from a
scalar loss into a :class:`Tape` ordered by creation sequence (which is a
topological order) and walks it in reverse exactly once.

Backward rules live in the module-level ``BACKWARD`` registry so that tests can
swap a rule out (fault injection) and confirm ``grad_check`` notices.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_SEQ = itertools.count()
_state = {"dtype": np.float32, "debug": False, "grad": True}


class ReproducibilityError(RuntimeError):
    """A function handed to grad_check gave different outputs on identical inputs."""


def default_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _state["dtype"] = np.dtype(name).type


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Forward ops inside this block record no tape nodes."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def set_debug(flag: bool) -> None:
    """In debug mode every forward op asserts its output is finite."""
    _state["debug"] = bool(flag)


class Node:
    __slots__ = ("op", "inputs", "ctx", "seq")

    def __init__(self, op, inputs, ctx):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.seq = next(_SEQ)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, inputs, ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = _state["grad"] and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = Node(op, inputs, ctx)
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    return out


# ---------------------------------------------------------------------------
# tape + backward


@dataclass
class Tape:
    """Reachable op outputs of one loss, in creation (topological) order."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def check_order(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.tensors)}
        for i, t in enumerate(self.tensors):
            for inp in t.node.inputs:
                if inp.node is not None and pos[id(inp)] >= i:
                    return False
        return True


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Returns a map leaf -> accumulated gradient array. Leaves that do not
    require grad never appear.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return {loss: loss.grad}

    tape = Tape.from_output(loss)
    pending = {id(loss): seed}
    leaves = {}
    leaf_grads = {}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        in_grads = BACKWARD[node.op](node, g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + gi
                else:
                    leaf_grads[key] = gi
            elif key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    result = {}
    for key, leaf in leaves.items():
        g = leaf_grads[key].astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = leaf.grad
    return result


BACKWARD: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # only row-vector broadcasting is supported
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_rowvec(a, b, op):
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowvec(a, b, "add")
    return _result(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_bw(node, g):
    a, b = node.inputs
    return g, _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowvec(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_bw(node, g):
    a, b = node.inputs
    return g, -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowvec(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_bw(node, g):
    a, b = node.inputs
    ga = g * b.data if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data.dtype.type(c), "scale", (a,), c)


@_rule("scale")
def _scale_bw(node, g):
    return (g * g.dtype.type(node.ctx),)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * (d * d * d))
    th = np.tanh(inner)
    return _result(0.5 * d * (1.0 + th), "gelu", (x,), th)


@_rule("gelu")
def _gelu_bw(node, g):
    d = node.inputs[0].data
    th = node.ctx
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (d * d))
    return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * dinner),)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), "reshape", (x,))


@_rule("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.inputs[0].shape),)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), tuple(axes))


@_rule("transpose")
def _transpose_bw(node, g):
    return (g.transpose(np.argsort(node.ctx)),)


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` (also serves as embedding lookup)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    distinct = idx.ndim == 1 and bool(np.all(idx[1:] > idx[:-1]))
    return _result(x.data[idx], "take_rows", (x,), (idx, distinct))


embedding = take_rows


@_rule("take_rows")
def _take_rows_bw(node, g):
    x = node.inputs[0]
    idx, distinct = node.ctx
    out = np.zeros(x.shape, dtype=g.dtype)
    if distinct:
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


def merge_rows(parts, idxs, n: int) -> Tensor:
    """Inverse of a row partition: ``out[idxs[i]] = parts[i]``."""
    parts = [as_tensor(p) for p in parts]
    idxs = [np.asarray(i, dtype=np.intp) for i in idxs]
    width = parts[0].shape[1:]
    dtype = np.result_type(*[p.data.dtype for p in parts])
    out = np.empty((n,) + width, dtype=dtype)
    covered = 0
    for p, i in zip(parts, idxs):
        out[i] = p.data
        covered += len(i)
    if covered != n:
        raise ValueError(f"merge_rows: partitions cover {covered} of {n} rows")
    return _result(out, "merge_rows", tuple(parts), idxs)


@_rule("merge_rows")
def _merge_rows_bw(node, g):
    return tuple(g[i] for i in node.ctx)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _result(data, "concat_rows", tuple(parts), sizes)


@_rule("concat_rows")
def _concat_rows_bw(node, g):
    return tuple(np.split(g, node.ctx, axis=0))


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    return _result(x.data[start:stop], "slice_rows", (x,), (start, stop))


@_rule("slice_rows")
def _slice_rows_bw(node, g):
    x = node.inputs[0]
    out = np.zeros(x.shape, dtype=g.dtype)
    out[node.ctx[0] : node.ctx[1]] = g
    return (out,)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2:
        raise ValueError(f"matmul: batch shapes differ: {a.shape} and {b.shape}")
    if a.data.ndim == b.data.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch shapes differ: {a.shape} and {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b))


@_rule("matmul")
def _matmul_bw(node, g):
    a, b = node.inputs
    ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.data.ndim == 2 and a.data.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
    return ga, gb


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# normalizers and reductions


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _result(p, "softmax_rows", (x,), p)


@_rule("softmax_rows")
def _softmax_bw(node, g):
    p = node.ctx
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def rmsnorm(x, gain=None, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    d = x.data
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    out = _result(d * inv, "rmsnorm", (x,), inv)
    return mul(out, gain) if gain is not None else out


@_rule("rmsnorm")
def _rmsnorm_bw(node, g):
    d = node.inputs[0].data
    inv = node.ctx
    n = d.shape[-1]
    dot = (g * d).sum(axis=-1, keepdims=True)
    return (inv * g - d * inv**3 * dot / n,)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), "sum_all", (x,))


@_rule("sum_all")
def _sum_bw(node, g):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.mean()), "mean_all", (x,))


@_rule("mean_all")
def _mean_bw(node, g):
    x = node.inputs[0]
    return (np.broadcast_to(g / x.size, x.shape).copy(),)


def mse(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    return _result(np.asarray((diff * diff).mean()), "mse", (pred, target), diff)


@_rule("mse")
def _mse_bw(node, g):
    diff = node.ctx
    gd = g * 2.0 * diff / diff.size
    return gd, -gd


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()
    return _result(np.asarray(loss), "cross_entropy", (logits,), (logp, targets))


@_rule("cross_entropy")
def _ce_bw(node, g):
    logp, targets = node.ctx
    p = np.exp(logp)
    p[np.arange(len(targets)), targets] -= 1.0
    return (g * p / len(targets),)


# ---------------------------------------------------------------------------
# attention helpers


def rotate_pairs(x, cos, sin) -> Tensor:
    """Rotate feature pairs (2k, 2k+1) of the last axis by per-row angles.

    ``cos``/``sin`` have shape (n, d/2) and broadcast over leading head axes
    of ``x`` with shape (..., n, d).
    """
    x = as_tensor(x)
    d = x.data
    x0, x1 = d[..., 0::2], d[..., 1::2]
    out = np.empty_like(d)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return _result(out, "rotate_pairs", (x,), (cos, sin))


@_rule("rotate_pairs")
def _rotate_bw(node, g):
    cos, sin = node.ctx
    g0, g1 = g[..., 0::2], g[..., 1::2]
    out = np.empty_like(g)
    out[..., 0::2] = g0 * cos + g1 * sin
    out[..., 1::2] = -g0 * sin + g1 * cos
    return (out,)


def attention(q, k, v, mask=None, plan=None) -> Tensor:
    """Masked scaled dot-product attention over (heads, n, d) tensors.

    ``mask`` is an (n, n) boolean visibility matrix (query row, key column).
    ``plan`` optionally groups query rows with the key columns they can see,
    as produced by :func:`attention_plan`; masked-out key columns contribute
    exactly zero weight, so restricting each group to its visible columns
    changes nothing but the cost.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[-2]
    if plan is None:
        plan = attention_plan(mask, [(0, n)]) if mask is not None else [(slice(0, n), slice(0, n), None)]
    qd, kd, vd = q.data, k.data, v.data
    sc = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    out = np.empty(qd.shape[:-1] + (vd.shape[-1],), dtype=np.result_type(qd, vd))
    probs = []
    for rows, cols, sub in plan:
        s = np.matmul(qd[:, rows], kd[:, cols].transpose(0, 2, 1))
        s *= sc
        if sub is not None:
            s[:, ~sub] = -np.inf
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, rows] = np.matmul(s, vd[:, cols])
        probs.append(s)
    return _result(out, "attention", (q, k, v), (plan, probs, sc))


@_rule("attention")
def _attention_bw(node, g):
    q, k, v = node.inputs
    plan, probs, sc = node.ctx
    dq = np.zeros_like(q.data)
    dk = np.zeros_like(k.data)
    dv = np.zeros_like(v.data)
    for (rows, cols, _), p in zip(plan, probs):
        gr = g[:, rows]
        dv[:, cols] += np.matmul(p.transpose(0, 2, 1), gr)
        dp = np.matmul(gr, v.data[:, cols].transpose(0, 2, 1))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= sc
        dq[:, rows] = np.matmul(ds, k.data[:, cols])
        dk[:, cols] += np.matmul(ds.transpose(0, 2, 1), q.data[:, rows])
    return dq, dk, dv


def attention_plan(mask: np.ndarray, row_ranges) -> list:
    """Group query rows by range and keep only the key columns each group sees."""
    plan = []
    for start, stop in row_ranges:
        if stop <= start:
            continue
        block = mask[start:stop]
        cols = np.flatnonzero(block.any(axis=0))
        if len(cols) == 0:
            raise ValueError(f"query rows {start}:{stop} see no keys")
        if cols[-1] - cols[0] + 1 == len(cols):
            col_sel = slice(int(cols[0]), int(cols[-1]) + 1)
        else:
            col_sel = cols
        sub = block[:, col_sel]
        plan.append((slice(start, stop), col_sel, None if sub.all() else sub))
    return plan


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float | None = None) -> float:
    """Max relative error between backward() and central differences.

    The analytic gradient is computed in the current precision. The numeric
    side always re-evaluates ``f`` in float64 so that float32 cancellation in
    the difference quotient does not swamp the comparison.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    dtype = _state["dtype"]
    if eps is None:
        eps = 1e-6 if dtype is np.float64 else 1e-4

    leaf = Tensor(x.astype(dtype), requires_grad=True)
    out = f(leaf)
    again = f(Tensor(x.astype(dtype)))
    if not np.array_equal(out.data, again.data):
        raise ReproducibilityError("grad_check: repeated forward passes disagree")
    grads = backward(out)
    analytic = grads.get(leaf, np.zeros_like(leaf.data)).astype(np.float64)

    numeric = np.zeros(x.shape, dtype=np.float64)
    base = x.astype(np.float64)
    with precision("float64"):
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(Tensor(base)).data)
            flat[i] = old - eps
            fm = float(f(Tensor(base)).data)
            flat[i] = old
            num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
