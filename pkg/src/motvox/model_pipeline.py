"""Packed multi-turn sequences, the two-expert model, and staged generation.

Three latent stages are generated per asset: a dense structure grid at half
resolution (8 occupancy bits per coarse cell, one per 2x2x2 sub-voxel), then
per-voxel shape features, then per-voxel material features. In training all
stages sit in one packed sequence and the block mask keeps them from seeing
each other's noise; at inference they run one after another.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flow_matching as flow
from . import rope3d as rope
from . import tensor_core as T
from .mot_attention import (
    EXPERTS,
    AttnMask,
    Block,
    BlockKind,
    BlockTable,
    ExpertParams,
    Modality,
    Routing,
    build_mask,
    mot_block,
    route_rows,
    routed_rmsnorm,
)
from .ovoxel import OVoxelAsset, Trajectory, render_image
from .tensor_core import Tensor

STAGES = ("structure", "shape", "material")
NOISE_KINDS = (BlockKind.NOISE_STRUCTURE, BlockKind.NOISE_SHAPE, BlockKind.NOISE_MATERIAL)
CLEAN_KINDS = (BlockKind.CLEAN_STRUCTURE, BlockKind.CLEAN_SHAPE, BlockKind.CLEAN_MATERIAL)


class EmptyGenerationError(RuntimeError):
    pass


class PackError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer

SPECIALS = ("<pad>", "<bos>", "<eos>", "<null>")
CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 ()-,.:;'\"_/+=?!#*[]&%@|"
VOCAB = SPECIALS + tuple(CHARS)
PAD, BOS, EOS, NULL = range(4)
_CHAR_ID = {c: i + len(SPECIALS) for i, c in enumerate(CHARS)}
assert len(VOCAB) == 64


def encode(text: str, bos: bool = True, eos: bool = True) -> np.ndarray:
    try:
        ids = [_CHAR_ID[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None
    return np.asarray(([BOS] if bos else []) + ids + ([EOS] if eos else []), dtype=np.int64)


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i >= len(SPECIALS):
            out.append(VOCAB[i])
    return "".join(out)


# ---------------------------------------------------------------------------
# latent codecs (identity: latents are the raw voxel features)

_SUB = np.array([(i, j, k) for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64)


def coarse_cells(coarse_n: int) -> np.ndarray:
    """All coarse cells as (x, y, z) rows in canonical (z, y, x) order."""
    z, y, x = np.meshgrid(*(np.arange(coarse_n),) * 3, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def structure_latent(asset: OVoxelAsset) -> np.ndarray:
    """(coarse_n^3, 8) array of +-1 occupancy bits, one row per coarse cell."""
    occ = asset.occupancy()
    cells = coarse_cells(asset.grid_n // 2)
    fine = 2 * cells[:, None, :] + _SUB[None]
    bits = occ[fine[..., 0], fine[..., 1], fine[..., 2]]
    return np.where(bits, 1.0, -1.0).astype(np.float32)


def decode_structure(latent: np.ndarray, grid_n: int) -> np.ndarray:
    """Active fine-voxel coordinates where the decoded occupancy logit is positive."""
    cells = coarse_cells(grid_n // 2)
    fine = 2 * cells[:, None, :] + _SUB[None]
    return fine[np.asarray(latent) > 0].reshape(-1, 3)


def stage_latent(asset: OVoxelAsset, stage: int) -> np.ndarray:
    if stage == 0:
        return structure_latent(asset)
    return asset.f_shape if stage == 1 else asset.f_mat


def stage_coords(asset_or_grid, stage: int, coords=None) -> np.ndarray:
    """Positions of a stage's tokens on the fine grid."""
    if stage == 0:
        grid_n = asset_or_grid if isinstance(asset_or_grid, int) else asset_or_grid.grid_n
        return 2 * coarse_cells(grid_n // 2)
    return asset_or_grid.coords if coords is None else coords


# ---------------------------------------------------------------------------
# packed sequences


@dataclass
class BlockData:
    kind: BlockKind
    turn: int
    ids: np.ndarray | None = None
    patches: np.ndarray | None = None
    latent: np.ndarray | None = None
    coords: np.ndarray | None = None
    ce: bool = False
    cond: bool = False
    null: bool = False

    @property
    def size(self) -> int:
        if self.kind is BlockKind.TEXT:
            return len(self.ids)
        if self.kind is BlockKind.IMAGE:
            return len(self.patches)
        return len(self.latent)


@dataclass
class PackedSequence:
    blocks: list
    table: BlockTable
    modalities: np.ndarray
    positions: np.ndarray
    history_visible: bool = True
    _mask: AttnMask | None = field(default=None, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.table.n_tokens

    @property
    def mask(self) -> AttnMask:
        if self._mask is None:
            self._mask = build_mask(self.table, self.history_visible)
        return self._mask

    def noisy_blocks(self) -> list:
        return [i for i, b in enumerate(self.blocks) if b.kind.is_noisy]

    def ce_pairs(self):
        """(row, next-token id) for every CE-target position."""
        rows, targets = [], []
        for blk, b in zip(self.table, self.blocks):
            if b.kind is BlockKind.TEXT and b.ce:
                rows.extend(range(blk.start, blk.stop - 1))
                targets.extend(b.ids[1:].tolist())
        return np.asarray(rows, dtype=np.int64), np.asarray(targets, dtype=np.int64)

    def kinds(self) -> list:
        return [(b.kind, b.turn) for b in self.blocks]

    def with_history(self, visible: bool) -> "PackedSequence":
        return replace(self, history_visible=visible, _mask=None)


class SequenceBuilder:
    """Appends blocks and assigns modalities and position triples."""

    def __init__(self, grid_n: int, patch: int = 4):
        self.grid_n = grid_n
        self.patch = patch
        self.blocks: list[BlockData] = []
        self._running: dict[int, int] = {}

    def copy(self) -> "SequenceBuilder":
        b = SequenceBuilder(self.grid_n, self.patch)
        b.blocks = list(self.blocks)
        b._running = dict(self._running)
        return b

    def text(self, turn: int, ids, ce: bool = False, cond: bool = True) -> "SequenceBuilder":
        ids = encode(ids) if isinstance(ids, str) else np.asarray(ids, dtype=np.int64)
        self.blocks.append(BlockData(BlockKind.TEXT, turn, ids=ids, ce=ce, cond=cond))
        return self

    def image(self, turn: int, img: np.ndarray, null: bool = False) -> "SequenceBuilder":
        self.blocks.append(BlockData(BlockKind.IMAGE, turn, patches=patchify(img, self.patch), cond=True, null=null))
        return self

    def latent(self, kind: BlockKind, turn: int, latent, coords) -> "SequenceBuilder":
        latent = np.asarray(latent, dtype=np.float32)
        coords = np.asarray(coords, dtype=np.int64)
        if len(latent) != len(coords):
            raise PackError("latent rows and coordinates differ in count")
        self.blocks.append(BlockData(kind, turn, latent=latent, coords=coords))
        return self

    def asset_blocks(self, asset: OVoxelAsset, turn: int, noisy: bool, clean: bool = True, stop_after=None) -> "SequenceBuilder":
        if asset.grid_n != self.grid_n:
            raise PackError(f"asset grid {asset.grid_n} does not match sequence grid {self.grid_n}")
        for s in range(3):
            lat, crd = stage_latent(asset, s), stage_coords(asset, s)
            for kind, on in ((NOISE_KINDS[s], noisy), (CLEAN_KINDS[s], clean)):
                if not on:
                    continue
                self.latent(kind, turn, lat, crd)
                if stop_after is not None and kind == stop_after:
                    return self
        return self

    def build(self, history_visible: bool = True) -> PackedSequence:
        spec, mods, pos = [], [], []
        running: dict[int, int] = {}
        for b in self.blocks:
            n = b.size
            spec.append((b.kind, b.turn, n))
            mods.append(np.full(n, int(b.kind.modality), dtype=np.int64))
            if b.kind.is_latent:
                pos.append(rope.positions_for_block(b.kind.token, b.turn, self.grid_n, coords=b.coords))
            else:
                start = running.get(b.turn, 0)
                pos.append(rope.positions_for_block(b.kind.token, b.turn, self.grid_n, count=n, start=start))
                running[b.turn] = start + n
        try:
            table = BlockTable.from_sizes(spec)
        except ValueError as exc:
            raise PackError(str(exc)) from None
        return PackedSequence(list(self.blocks), table, np.concatenate(mods), np.concatenate(pos), history_visible)


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    n = img.shape[0]
    g = n // patch
    return img.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, patch * patch).astype(np.float32)


def pack_trajectory(traj: Trajectory, mode: str = "train", *, with_image: bool = True, image_null: bool = False, stop_after=None, history_visible: bool = True) -> PackedSequence:
    """Pack every state of ``traj`` as one turn.

    Train mode gives each turn its text, noisy and clean blocks for all three
    stages (the first turn also gets a rendered image). ``stop_after``
    truncates the last turn after the given block kind. Infer mode packs the
    earlier states as clean history followed by the last turn's text and its
    noisy structure block.
    """
    states = traj.states()
    grid = {a.grid_n for a in states}
    if len(grid) != 1:
        raise PackError("trajectory states live on different grids")
    b = SequenceBuilder(grid.pop())
    last = len(states) - 1
    for k, asset in enumerate(states):
        text = traj.caption if k == 0 else traj.turns[k - 1].instruction
        b.text(k, text)
        if k == 0 and with_image:
            b.image(k, render_image(asset), null=image_null)
        if mode == "train":
            b.asset_blocks(asset, k, noisy=True, stop_after=stop_after if k == last else None)
        elif mode == "infer":
            if k == last:
                b.latent(BlockKind.NOISE_STRUCTURE, k, structure_latent(asset), stage_coords(asset, 0))
            else:
                b.asset_blocks(asset, k, noisy=False)
        else:
            raise PackError(f"unknown mode {mode!r}")
    return b.build(history_visible)


def pack_generation(caption: str | None, asset: OVoxelAsset, image: bool = False, image_null: bool = False) -> PackedSequence:
    """Single-turn text and/or image to mesh sample."""
    b = SequenceBuilder(asset.grid_n)
    if caption is not None:
        b.text(0, caption)
    if image:
        b.image(0, render_image(asset), null=image_null)
    b.asset_blocks(asset, 0, noisy=True)
    return b.build()


def pack_caption(asset: OVoxelAsset, caption: str) -> PackedSequence:
    """Mesh to text: clean latents first, caption afterwards as the next turn."""
    b = SequenceBuilder(asset.grid_n)
    b.asset_blocks(asset, 0, noisy=False)
    b.text(1, caption, ce=True, cond=False)
    return b.build()


def pack_image_caption(asset: OVoxelAsset, caption: str) -> PackedSequence:
    b = SequenceBuilder(asset.grid_n)
    b.image(0, render_image(asset))
    b.text(1, caption, ce=True, cond=False)
    return b.build()


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 96
    heads: int = 4
    layers: int = 4
    ffn: int = 384
    vocab: int = 64
    grid_n: int = 16
    shape_dim: int = 8
    mat_dim: int = 4
    struct_dim: int = 8
    patch: int = 4
    rope_base: float = 10000.0
    use_positions: bool = True
    time_table: int = 64

    @property
    def coarse_n(self) -> int:
        return self.grid_n // 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def stage_dims(self) -> tuple:
        return (self.struct_dim, self.shape_dim, self.mat_dim)

    def rope(self) -> rope.RopeConfig:
        return rope.RopeConfig(self.head_dim, self.rope_base)


def sinusoidal_table(rows: int, dim: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, rows)[:, None] * 1000.0
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2) / (dim // 2))[None]
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def expert_of(name: str) -> str:
    return name.split(".", 1)[0]


class MoTModel:
    """Parameters plus the forward pass over packed sequences."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.experts = ExpertParams(params, cfg.layers)
        self._rope = cfg.rope()

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, zero_out: bool = False) -> "MoTModel":
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        params = dict(ExpertParams.init(rng, d, cfg.layers, cfg.ffn, zero_out=zero_out).params)

        def p(name, arr):
            params[name] = Tensor(arr, requires_grad=True, name=name)

        p("und.text_embed", rng.normal(0, 1.0, (cfg.vocab, d)))
        p("und.image_in.w", rng.normal(0, 1 / math.sqrt(cfg.patch**2), (cfg.patch**2, d)))
        p("und.image_in.b", np.zeros(d))
        p("und.null", rng.normal(0, 1.0, (1, d)))
        p("und.text_head", rng.normal(0, 0.02, (d, cfg.vocab)))
        p("und.final_norm", np.ones(d))
        p("gen.final_norm", np.ones(d))
        table = sinusoidal_table(cfg.time_table, d)
        for s, dim in zip(STAGES, cfg.stage_dims()):
            p(f"gen.{s}.noisy_in.w", rng.normal(0, 1 / math.sqrt(dim), (dim, d)))
            p(f"gen.{s}.noisy_in.b", np.zeros(d))
            p(f"gen.{s}.clean_in.w", rng.normal(0, 1 / math.sqrt(dim), (dim, d)))
            p(f"gen.{s}.clean_in.b", np.zeros(d))
            p(f"gen.{s}.time", table.copy())
            p(f"gen.{s}.out.w", rng.normal(0, 0.02, (d, dim)))
            p(f"gen.{s}.out.b", np.zeros(dim))
        return cls(cfg, dict(sorted(params.items())))

    def named(self, expert: str) -> dict:
        return {k: v for k, v in self.params.items() if expert_of(k) == expert}

    # -- embedding ---------------------------------------------------------

    def _time_embedding(self, stage: int, t: float) -> Tensor:
        rows = self.cfg.time_table
        x = t * (rows - 1)
        i = min(int(math.floor(x)), rows - 2)
        a = x - i
        w = np.zeros((1, rows))
        w[0, i], w[0, i + 1] = 1.0 - a, a
        emb = T.matmul(Tensor(w), self.params[f"gen.{STAGES[stage]}.time"])
        return T.reshape(emb, (self.cfg.d_model,))

    def _null_rows(self, n: int) -> Tensor:
        return T.take_rows(self.params["und.null"], np.zeros(n, dtype=np.int64))

    def embed(self, seq: PackedSequence, noisy: dict, null_turns=frozenset()) -> Tensor:
        p = self.params
        parts = []
        for i, b in enumerate(seq.blocks):
            dropped = b.null or (b.cond and b.turn in null_turns)
            if b.kind is BlockKind.TEXT:
                parts.append(self._null_rows(b.size) if dropped else T.take_rows(p["und.text_embed"], b.ids))
            elif b.kind is BlockKind.IMAGE:
                if dropped:
                    parts.append(self._null_rows(b.size))
                else:
                    parts.append(T.linear(Tensor(b.patches), p["und.image_in.w"], p["und.image_in.b"]))
            elif b.kind.is_noisy:
                s = STAGES[b.kind.stage]
                xt, t = noisy[i]
                h = T.linear(Tensor(xt), p[f"gen.{s}.noisy_in.w"], p[f"gen.{s}.noisy_in.b"])
                parts.append(T.add(h, self._time_embedding(b.kind.stage, t)))
            else:
                s = STAGES[b.kind.stage]
                parts.append(T.linear(Tensor(b.latent), p[f"gen.{s}.clean_in.w"], p[f"gen.{s}.clean_in.b"]))
        return T.concat_rows(parts)

    def hidden(self, seq: PackedSequence, noisy: dict, null_turns=frozenset()) -> Tensor:
        cfg = self.cfg
        routing = Routing.from_modalities(seq.modalities)
        h = self.embed(seq, noisy, null_turns)
        pos = seq.positions if cfg.use_positions else np.zeros_like(seq.positions)
        dtype = h.data.dtype
        cs = rope.tables(pos, self._rope, dtype=dtype)
        mask = seq.mask
        for layer in range(cfg.layers):
            h = mot_block(h, routing, cs, mask, self.experts, layer, cfg.heads)
        gains = (self.params["und.final_norm"], self.params["gen.final_norm"])
        return routed_rmsnorm(h, routing, gains)

    def velocity_head(self, h: Tensor, blk: Block, stage: int) -> Tensor:
        s = STAGES[stage]
        rows = T.slice_rows(h, blk.start, blk.stop)
        return T.linear(rows, self.params[f"gen.{s}.out.w"], self.params[f"gen.{s}.out.b"])

    def logits(self, h: Tensor, rows) -> Tensor:
        return T.matmul(T.take_rows(h, rows), self.params["und.text_head"])

    def velocity(self, seq: PackedSequence, block: int, xt: np.ndarray, t: float, null_turns=frozenset()) -> np.ndarray:
        """Predicted velocity for one noisy block (no tape recorded)."""
        with T.no_grad():
            h = self.hidden(seq, {block: (xt, t)}, null_turns)
            b = seq.blocks[block]
            return self.velocity_head(h, seq.table.blocks[block], b.kind.stage).data


# ---------------------------------------------------------------------------
# losses


@dataclass
class Losses:
    fm: dict
    ce: Tensor | None
    t: dict = field(default_factory=dict)

    def fm_values(self) -> dict:
        return {k: float(v.data) for k, v in self.fm.items()}

    def ce_value(self):
        return None if self.ce is None else float(self.ce.data)


def draw_noisy_inputs(seq: PackedSequence, rng: np.random.Generator, shift: float = 1.0) -> dict:
    """Per noisy block: (x_t, t, x0) along the linear path."""
    out = {}
    for i in seq.noisy_blocks():
        x1 = seq.blocks[i].latent
        t = flow.sample_t(rng, shift)
        x0 = rng.standard_normal(x1.shape).astype(np.float32)
        out[i] = (flow.interpolate(x0, x1, t).astype(np.float32), t, x0)
    return out


def condition_drops(seq: PackedSequence, rng: np.random.Generator | None, p: float) -> frozenset:
    """Turns whose conditioning text/image is replaced by the null embedding."""
    if rng is None or p <= 0:
        return frozenset()
    turns = sorted({seq.blocks[i].turn for i in seq.noisy_blocks()})
    return frozenset(t for t in turns if flow.drop_condition(rng, p))


def forward_losses(seq: PackedSequence, model: MoTModel, shift: float = 1.0, rng: np.random.Generator | None = None, drop_rng: np.random.Generator | None = None, cfg_dropout: float = 0.0, noisy=None, with_ce: bool = True, with_fm: bool = True) -> Losses:
    """One pass over the whole packed sequence.

    Returns the flow-matching loss of each stage (mean over that stage's noisy
    tokens) and the next-token cross entropy over caption positions, which is
    ``None`` when the sequence has no CE targets.
    """
    if noisy is None:
        noisy = draw_noisy_inputs(seq, rng if rng is not None else np.random.default_rng(0), shift)
    null_turns = condition_drops(seq, drop_rng, cfg_dropout)
    h = model.hidden(seq, {i: (xt, t) for i, (xt, t, _) in noisy.items()}, null_turns)

    fm = {}
    if with_fm:
        by_stage: dict = {}
        for i, (xt, t, x0) in noisy.items():
            stage = seq.blocks[i].kind.stage
            v = model.velocity_head(h, seq.table.blocks[i], stage)
            by_stage.setdefault(stage, []).append((v, x0, seq.blocks[i].latent))
        for stage, items in sorted(by_stage.items()):
            v = T.concat_rows([it[0] for it in items]) if len(items) > 1 else items[0][0]
            x0 = np.concatenate([it[1] for it in items])
            x1 = np.concatenate([it[2] for it in items])
            fm[STAGES[stage]] = flow.cfm_loss(v, x0, x1)

    ce = None
    rows, targets = seq.ce_pairs()
    if with_ce and len(rows):
        ce = T.cross_entropy(model.logits(h, rows), targets)
    return Losses(fm, ce, {i: t for i, (_, t, _) in noisy.items()})


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance: float = 3.0
    shift: float = 1.0


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _sample_block(model: MoTModel, builder: SequenceBuilder, kind: BlockKind, turn: int, coords, dim: int, sampler: SamplerConfig, seed: int, cond_turn: int | None) -> np.ndarray:
    b = builder.copy()
    b.latent(kind, turn, np.zeros((len(coords), dim), np.float32), coords)
    seq = b.build()
    idx = len(seq.blocks) - 1
    has_cond = cond_turn is not None and any(x.cond and x.turn == cond_turn for x in seq.blocks)
    null = frozenset() if cond_turn is None else frozenset({cond_turn})

    def field_fn(x, t, _):
        v = model.velocity(seq, idx, x, t)
        if has_cond and sampler.guidance != 1.0:
            vu = model.velocity(seq, idx, x, t, null_turns=null)
            v = flow.guided_velocity(v, vu, sampler.guidance)
        return v

    return flow.euler_sample(field_fn, (len(coords), dim), sampler.steps, _stage_seed(seed, kind.stage), shift=sampler.shift)


def _staged_generation(model: MoTModel, builder: SequenceBuilder, turn: int, sampler: SamplerConfig, seed: int, cond_turn) -> OVoxelAsset:
    cfg = model.cfg
    n = cfg.grid_n
    cells = stage_coords(n, 0)
    s_lat = _sample_block(model, builder, BlockKind.NOISE_STRUCTURE, turn, cells, cfg.struct_dim, sampler, seed, cond_turn)
    coords = decode_structure(s_lat, n)
    if len(coords) == 0:
        raise EmptyGenerationError("structure stage produced no active voxels")
    layout = OVoxelAsset(n, coords, np.zeros((len(coords), cfg.shape_dim)), np.zeros((len(coords), cfg.mat_dim)))
    coords = layout.coords
    b = builder.copy().latent(BlockKind.CLEAN_STRUCTURE, turn, structure_latent(layout), cells)
    f_shape = np.clip(_sample_block(model, b, BlockKind.NOISE_SHAPE, turn, coords, cfg.shape_dim, sampler, seed, cond_turn), -1, 1)
    b.latent(BlockKind.CLEAN_SHAPE, turn, f_shape, coords)
    f_mat = np.clip(_sample_block(model, b, BlockKind.NOISE_MATERIAL, turn, coords, cfg.mat_dim, sampler, seed, cond_turn), -1, 1)
    return OVoxelAsset(n, coords, f_shape, f_mat)


def generate(model: MoTModel, prompt: str | None = None, image: np.ndarray | None = None, sampler: SamplerConfig = SamplerConfig(), seed: int = 0) -> OVoxelAsset:
    """Structure, then shape, then material, each by Euler integration."""
    if prompt is None and image is None:
        raise ValueError("generate needs a text prompt and/or an image")
    b = SequenceBuilder(model.cfg.grid_n, model.cfg.patch)
    if prompt is not None:
        b.text(0, prompt)
    if image is not None:
        b.image(0, image)
    return _staged_generation(model, b, 0, sampler, seed, cond_turn=0)


def history_builder(model: MoTModel, history: Trajectory, with_image: bool = False) -> SequenceBuilder:
    b = SequenceBuilder(model.cfg.grid_n, model.cfg.patch)
    for k, asset in enumerate(history.states()):
        b.text(k, history.caption if k == 0 else history.turns[k - 1].instruction)
        if k == 0 and with_image:
            b.image(0, render_image(asset))
        b.asset_blocks(asset, k, noisy=False)
    return b


def edit(model: MoTModel, history: Trajectory, instruction: str, sampler: SamplerConfig = SamplerConfig(), seed: int = 0, with_image: bool = False) -> OVoxelAsset:
    """Generate the next state conditioned on the clean history and the instruction."""
    if not instruction or not instruction.strip():
        raise ValueError("edit instruction is empty")
    if history.initial.grid_n != model.cfg.grid_n:
        raise PackError("history grid does not match the model")
    turn = len(history.turns) + 1
    b = history_builder(model, history, with_image)
    b.text(turn, instruction)
    return _staged_generation(model, b, turn, sampler, seed, cond_turn=turn)


def caption(model: MoTModel, asset: OVoxelAsset, max_len: int = 32, seed: int = 0) -> str:
    """Greedy decoding after the asset's clean latent blocks."""
    ids = [BOS]
    base = SequenceBuilder(asset.grid_n, model.cfg.patch).asset_blocks(asset, 0, noisy=False)
    for _ in range(max_len):
        seq = base.copy().text(1, np.asarray(ids), ce=False, cond=False).build()
        with T.no_grad():
            h = model.hidden(seq, {})
            logit = model.logits(h, [seq.n_tokens - 1]).data[0]
        nxt = int(np.argmax(logit))
        if nxt == EOS:
            break
        ids.append(nxt)
    return decode(ids)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MOT1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4s12I")


@dataclass
class Checkpoint:
    """MOT1 file: fixed header plus named float32 records, in order."""

    header: dict
    records: list

    def to_bytes(self) -> bytes:
        h = self.header
        out = [
            _CKPT_HEADER.pack(
                CKPT_MAGIC, CKPT_VERSION, h["d_model"], h["layers"], h["heads"], h["vocab"],
                h["grid_n"], h["coarse_n"], h["ffn"], h["shape_dim"], h["mat_dim"],
                h["flags"], len(self.records),
            )
        ]
        for name, arr in self.records:
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _CKPT_HEADER.size:
            raise CheckpointError(f"file too short for a MOT1 header ({len(raw)} bytes)")
        vals = _CKPT_HEADER.unpack_from(raw)
        if vals[0] != CKPT_MAGIC:
            raise CheckpointError(f"bad magic {vals[0]!r}, expected {CKPT_MAGIC!r}")
        if vals[1] != CKPT_VERSION:
            raise CheckpointError(f"unsupported version {vals[1]}")
        keys = ("d_model", "layers", "heads", "vocab", "grid_n", "coarse_n", "ffn", "shape_dim", "mat_dim", "flags")
        header = dict(zip(keys, vals[2:12]))
        count = vals[12]
        off = _CKPT_HEADER.size
        records = []
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", raw, off)
                off += 2
                name = raw[off : off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<B", raw, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", raw, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                if off + 4 * size > len(raw):
                    raise CheckpointError(f"record {name!r} runs past end of file")
                arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
                off += 4 * size
                records.append((name, arr))
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupted record table after {len(records)} of {count} records ({_header_text(header)}): {exc}") from None
        except CheckpointError as exc:
            raise CheckpointError(f"{exc} ({_header_text(header)})") from None
        if off != len(raw):
            raise CheckpointError(f"{len(raw) - off} trailing bytes after {count} records ({_header_text(header)})")
        return cls(header, records)

    def describe(self) -> str:
        h = self.header
        lines = [f"MOT1 v{CKPT_VERSION} {_header_text(h)}", f"records={len(self.records)}"]
        for name, arr in self.records:
            lines.append(f"  {name} {list(arr.shape)}")
        return "\n".join(lines)


def _header_text(h: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in h.items())


def model_header(cfg: ModelConfig) -> dict:
    return {
        "d_model": cfg.d_model, "layers": cfg.layers, "heads": cfg.heads, "vocab": cfg.vocab,
        "grid_n": cfg.grid_n, "coarse_n": cfg.coarse_n, "ffn": cfg.ffn,
        "shape_dim": cfg.shape_dim, "mat_dim": cfg.mat_dim, "flags": int(cfg.use_positions),
    }


def to_checkpoint(model: MoTModel, extra: dict | None = None) -> Checkpoint:
    records = [(name, p.data) for name, p in model.params.items()]
    records += [(name, np.asarray(v)) for name, v in sorted((extra or {}).items())]
    return Checkpoint(model_header(model.cfg), records)


def from_checkpoint(ck: Checkpoint) -> tuple:
    h = ck.header
    cfg = ModelConfig(
        d_model=h["d_model"], heads=h["heads"], layers=h["layers"], ffn=h["ffn"], vocab=h["vocab"],
        grid_n=h["grid_n"], shape_dim=h["shape_dim"], mat_dim=h["mat_dim"], use_positions=bool(h["flags"] & 1),
    )
    template = MoTModel.init(cfg, 0)
    params, extra = {}, {}
    for name, arr in ck.records:
        if name in template.params:
            if arr.shape != template.params[name].shape:
                raise CheckpointError(f"record {name!r} has shape {arr.shape}, expected {template.params[name].shape}")
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        else:
            extra[name] = arr.copy()
    missing = set(template.params) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]!r}")
    return MoTModel(cfg, dict(sorted(params.items()))), extra


def save_checkpoint(path, model: MoTModel, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_checkpoint(model, extra).to_bytes())


def load_checkpoint(path) -> tuple:
    return from_checkpoint(Checkpoint.from_bytes(Path(path).read_bytes()))
