"""Hard-routed two-expert transformer layers over a packed block sequence.

Text and image tokens use the understanding expert ("und"), mesh tokens the
generation expert ("gen"). Every linear map is applied per token with its own
expert's weights, while attention is a single softmax over all visible tokens
of the sequence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as T
from .tensor_core import Tensor

EXPERTS = ("und", "gen")


class Modality(enum.IntEnum):
    TEXT = 0
    IMAGE = 1
    MESH = 2

    @property
    def expert(self) -> int:
        return 1 if self is Modality.MESH else 0


class BlockKind(enum.IntEnum):
    """Block kinds, valued by their rank in the per-turn layout."""

    TEXT = 0
    IMAGE = 1
    NOISE_STRUCTURE = 2
    CLEAN_STRUCTURE = 3
    NOISE_SHAPE = 4
    CLEAN_SHAPE = 5
    NOISE_MATERIAL = 6
    CLEAN_MATERIAL = 7

    @property
    def is_latent(self) -> bool:
        return self >= BlockKind.NOISE_STRUCTURE

    @property
    def is_noisy(self) -> bool:
        return self.is_latent and self % 2 == 0

    @property
    def is_clean(self) -> bool:
        return self.is_latent and self % 2 == 1

    @property
    def stage(self) -> int:
        """0 structure, 1 shape, 2 material; -1 for text/image."""
        return (self - 2) // 2 if self.is_latent else -1

    @property
    def modality(self) -> Modality:
        if self is BlockKind.TEXT:
            return Modality.TEXT
        if self is BlockKind.IMAGE:
            return Modality.IMAGE
        return Modality.MESH

    @property
    def token(self) -> str:
        return _KIND_TOKENS[self]


_KIND_TOKENS = {
    BlockKind.TEXT: "text",
    BlockKind.IMAGE: "image",
    BlockKind.NOISE_STRUCTURE: "noise_ss",
    BlockKind.CLEAN_STRUCTURE: "clean_ss",
    BlockKind.NOISE_SHAPE: "noise_shape",
    BlockKind.CLEAN_SHAPE: "clean_shape",
    BlockKind.NOISE_MATERIAL: "noise_material",
    BlockKind.CLEAN_MATERIAL: "clean_material",
}
KIND_BY_TOKEN = {v: k for k, v in _KIND_TOKENS.items()}


class BlockTableError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    kind: BlockKind
    turn: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class BlockTable:
    blocks: tuple

    def __post_init__(self):
        pos = 0
        prev = None
        for i, b in enumerate(self.blocks):
            if b.start != pos or b.stop <= b.start:
                raise BlockTableError(f"block {i} ({b.kind.token}@{b.turn}) range {b.start}:{b.stop} is not contiguous")
            if b.turn < 0:
                raise BlockTableError(f"block {i} has negative turn")
            if prev is not None:
                if b.turn < prev.turn:
                    raise BlockTableError(f"block {i} ({b.kind.token}@{b.turn}) goes back to an earlier turn")
                if b.turn == prev.turn and b.kind <= prev.kind:
                    raise BlockTableError(f"block {i} ({b.kind.token}@{b.turn}) breaks the stage order after {prev.kind.token}")
            pos = b.stop
            prev = b
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @classmethod
    def from_sizes(cls, spec) -> "BlockTable":
        """Build from (kind, turn, size) triples laid out back to back."""
        blocks, pos = [], 0
        for kind, turn, size in spec:
            blocks.append(Block(BlockKind(kind), int(turn), pos, pos + int(size)))
            pos += int(size)
        return cls(tuple(blocks))

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    @property
    def n_tokens(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def block_of_token(self) -> np.ndarray:
        out = np.empty(self.n_tokens, dtype=np.int64)
        for i, b in enumerate(self.blocks):
            out[b.start : b.stop] = i
        return out


MASKED, CAUSAL, BIDIR, FULL = "·", "C", "B", "F"


def block_rule(table: BlockTable, qi: int, ki: int, history_visible: bool = True) -> str:
    """Visibility of key block ``ki`` from query block ``qi``.

    A block sees itself (causally for text/image, bidirectionally for latent
    blocks) and every earlier block except noisy latents. With
    ``history_visible=False`` latent blocks of earlier turns are hidden too.
    """
    q, k = table.blocks[qi], table.blocks[ki]
    if ki > qi:
        return MASKED
    if ki == qi:
        return BIDIR if q.kind.is_latent else CAUSAL
    if k.kind.is_noisy:
        return MASKED
    if not history_visible and k.kind.is_latent and k.turn < q.turn:
        return MASKED
    return FULL


@dataclass
class AttnMask:
    table: BlockTable
    grid: list
    dense: np.ndarray
    _plan: list | None = field(default=None, repr=False)

    @property
    def plan(self) -> list:
        if self._plan is None:
            self._plan = T.attention_plan(self.dense, [(b.start, b.stop) for b in self.table])
        return self._plan

    def render(self) -> str:
        return "\n".join("".join(row) for row in self.grid) + "\n"


def build_mask(table: BlockTable, history_visible: bool = True) -> AttnMask:
    nb = len(table)
    grid = [[block_rule(table, qi, ki, history_visible) for ki in range(nb)] for qi in range(nb)]
    n = table.n_tokens
    dense = np.zeros((n, n), dtype=bool)
    for qi, q in enumerate(table):
        for ki, k in enumerate(table):
            rule = grid[qi][ki]
            if rule == MASKED:
                continue
            if rule == CAUSAL:
                dense[q.start : q.stop, k.start : k.stop] = np.tri(q.size, k.size, dtype=bool)
            else:
                dense[q.start : q.stop, k.start : k.stop] = True
    if n and not dense.any(axis=1).all():
        raise BlockTableError("a query row has no visible key")
    return AttnMask(table, grid, dense)


def parse_layout(text: str) -> BlockTable:
    """Parse ``kind@turn[:size]`` items separated by commas or whitespace."""
    spec = []
    for item in text.replace(",", " ").split():
        try:
            head, _, size = item.partition(":")
            kind, _, turn = head.partition("@")
            spec.append((KIND_BY_TOKEN[kind], int(turn or 0), int(size or 1)))
        except (KeyError, ValueError):
            raise BlockTableError(f"malformed block {item!r}") from None
        if spec[-1][2] < 1:
            raise BlockTableError(f"malformed block {item!r}: size must be positive")
    if not spec:
        raise BlockTableError("empty layout")
    return BlockTable.from_sizes(spec)


TABLE1_LAYOUT = (
    "text@1 image@1 noise_ss@1 clean_ss@1 noise_shape@1 clean_shape@1 "
    "noise_material@1 clean_material@1 text@2 noise_ss@2"
)


# ---------------------------------------------------------------------------
# routing


@dataclass
class Routing:
    """Row indices of each expert's tokens."""

    n: int
    index: tuple

    @classmethod
    def from_modalities(cls, modalities) -> "Routing":
        mods = np.asarray(modalities, dtype=np.int64)
        gen = mods == int(Modality.MESH)
        return cls(len(mods), (np.flatnonzero(~gen), np.flatnonzero(gen)))

    def active(self):
        return [e for e in range(2) if len(self.index[e])]


def route_linear(h: Tensor, routing: Routing, weights) -> Tensor:
    """Row i becomes ``h_i @ weights[expert(i)]``.

    ``weights`` holds one matrix per expert, or one callable per expert for
    routed sub-networks such as the FFN.
    """
    active = routing.active()
    if len(active) == 1:
        w = weights[active[0]]
        return w(h) if callable(w) else T.matmul(h, w)
    parts, idxs = [], []
    for e in active:
        rows = T.take_rows(h, routing.index[e])
        w = weights[e]
        parts.append(w(rows) if callable(w) else T.matmul(rows, w))
        idxs.append(routing.index[e])
    return T.merge_rows(parts, idxs, routing.n)


def route_rows(h: Tensor, routing: Routing, fns) -> Tensor:
    """Apply a per-expert function to each expert's rows and reassemble."""
    return route_linear(h, routing, fns)


# ---------------------------------------------------------------------------
# parameters


LAYER_WEIGHTS = ("wq", "wk", "wv", "wo", "w1", "w2", "ln1", "ln2")


class ExpertParams:
    """Per-layer weights for both experts, stored under ``{expert}.layers.{l}.{w}``."""

    def __init__(self, params: dict, layers: int):
        self.params = params
        self.layers = layers

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, layers: int, ffn: int, zero_out: bool = False) -> "ExpertParams":
        params = {}
        out_std = 1.0 / math.sqrt(d_model) / math.sqrt(2 * layers)
        for l in range(layers):
            draws = {
                "wq": rng.normal(0, 1 / math.sqrt(d_model), (d_model, d_model)),
                "wk": rng.normal(0, 1 / math.sqrt(d_model), (d_model, d_model)),
                "wv": rng.normal(0, 1 / math.sqrt(d_model), (d_model, d_model)),
                "wo": rng.normal(0, out_std, (d_model, d_model)),
                "w1": rng.normal(0, 1 / math.sqrt(d_model), (d_model, ffn)),
                "w2": rng.normal(0, out_std * math.sqrt(d_model / ffn), (ffn, d_model)),
                "ln1": np.ones(d_model),
                "ln2": np.ones(d_model),
            }
            if zero_out:
                draws["wo"][:] = 0.0
                draws["w2"][:] = 0.0
            # gen starts as a copy of und, in separate storage
            for e in EXPERTS:
                for name, arr in draws.items():
                    params[f"{e}.layers.{l}.{name}"] = Tensor(arr.copy(), requires_grad=True, name=f"{e}.layers.{l}.{name}")
        return cls(params, layers)

    def get(self, layer: int, name: str) -> tuple:
        return tuple(self.params[f"{e}.layers.{layer}.{name}"] for e in EXPERTS)


# ---------------------------------------------------------------------------
# layers


def routed_rmsnorm(h: Tensor, routing: Routing, gains) -> Tensor:
    x = T.rmsnorm(h)
    return route_rows(x, routing, [lambda r, g=g: T.mul(r, g) for g in gains])


def shared_attention(h: Tensor, routing: Routing, rope_cs, mask: AttnMask | None, params: ExpertParams, layer: int, heads: int, plan=None) -> Tensor:
    """Per-expert q/k/v/o projections around one global masked softmax.

    ``rope_cs`` is a (cos, sin) pair of shape (n, head_dim/2), or None for no
    rotary encoding.
    """
    n, d = h.shape
    dh = d // heads
    wq, wk, wv, wo = (params.get(layer, w) for w in ("wq", "wk", "wv", "wo"))

    def split(x):
        return T.transpose(T.reshape(x, (n, heads, dh)), (1, 0, 2))

    q = split(route_linear(h, routing, wq))
    k = split(route_linear(h, routing, wk))
    v = split(route_linear(h, routing, wv))
    if rope_cs is not None:
        cos, sin = rope_cs
        q = T.rotate_pairs(q, cos, sin)
        k = T.rotate_pairs(k, cos, sin)
    if plan is None and mask is not None:
        plan = mask.plan
    a = T.attention(q, k, v, plan=plan)
    a = T.reshape(T.transpose(a, (1, 0, 2)), (n, d))
    return route_linear(a, routing, wo)


def routed_ffn(x: Tensor, routing: Routing, params: ExpertParams, layer: int) -> Tensor:
    w1, w2 = params.get(layer, "w1"), params.get(layer, "w2")
    fns = [lambda r, a=a, b=b: T.matmul(T.gelu(T.matmul(r, a)), b) for a, b in zip(w1, w2)]
    return route_rows(x, routing, fns)


def mot_block(h: Tensor, routing: Routing, rope_cs, mask: AttnMask | None, params: ExpertParams, layer: int, heads: int, plan=None) -> Tensor:
    """Pre-norm attention and FFN sublayers with residual connections."""
    x = routed_rmsnorm(h, routing, params.get(layer, "ln1"))
    h = T.add(h, shared_attention(x, routing, rope_cs, mask, params, layer, heads, plan))
    x = routed_rmsnorm(h, routing, params.get(layer, "ln2"))
    return T.add(h, routed_ffn(x, routing, params, layer))
