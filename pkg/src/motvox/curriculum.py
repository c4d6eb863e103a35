"""Five-stage training recipe, task sampling, AdamW and the training loop."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import model_pipeline as M
from . import tensor_core as T
from .ovoxel import EDIT_KINDS, PRIMITIVES, make_semantic_trajectory, make_trajectory, primitive_caption, sample_asset


class Task(enum.IntEnum):
    I2T = 0
    I2M = 1
    T2M = 2
    M2T = 3
    PROCEDURAL = 4
    SEMANTIC = 5


TASKS = tuple(Task)

# rows: stage 1..5; ratio columns follow TASKS
_RECIPE = {
    1: dict(lr_gen=0.0, lr_und=1e-4, schedule="constant", steps=20_000, shift=1.0, w_ce=1.0, w_mse=0.0,
            ratios=(0.0, 0.0, 0.0, 1.0, 0.0, 0.0), seq_len=(32_000, 40_000), context=24_000),
    2: dict(lr_gen=2e-4, lr_und=1e-5, schedule="constant", steps=150_000, shift=1.0, w_ce=0.25, w_mse=1.0,
            ratios=(0.0, 0.9, 0.0, 0.1, 0.0, 0.0), seq_len=(56_000, 64_000), context=30_000),
    3: dict(lr_gen=1e-4, lr_und=1e-5, schedule="cosine", steps=100_000, shift=3.0, w_ce=0.25, w_mse=1.0,
            ratios=(0.05, 0.3, 0.5, 0.15, 0.0, 0.0), seq_len=(56_000, 64_000), context=30_000),
    4: dict(lr_gen=5e-5, lr_und=5e-6, schedule="cosine", steps=80_000, shift=3.0, w_ce=0.25, w_mse=1.0,
            ratios=(0.05, 0.1, 0.1, 0.1, 0.35, 0.3), seq_len=(80_000, 96_000), context=60_000),
    5: dict(lr_gen=5e-6, lr_und=1e-6, schedule="constant", steps=30_000, shift=3.0, w_ce=0.0, w_mse=1.0,
            ratios=(0.0, 0.1, 0.4, 0.0, 0.1, 0.4), seq_len=(80_000, 96_000), context=60_000),
}

BETAS = (0.9, 0.95)
EPS = 1e-8
WEIGHT_DECAY = 0.05
COSINE_FLOOR = 0.1


class ScheduleError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr_gen: float
    lr_und: float
    schedule: str
    steps: int
    shift: float
    w_ce: float
    w_mse: float
    ratios: tuple
    seq_len: tuple = (0, 0)
    context: int = 0
    p_drop: float = 0.0
    cfg_dropout: float = 0.1
    token_cap: int = 0

    def __post_init__(self):
        if len(self.ratios) != len(TASKS) or min(self.ratios) < 0:
            raise ValueError(f"stage {self.stage}: ratios must be {len(TASKS)} non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"stage {self.stage}: ratios sum to {sum(self.ratios)}, not 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def warmup(self) -> int:
        return min(self.steps, max(50, self.steps // 20))

    def ratio(self, task: Task) -> float:
        return self.ratios[int(task)]

    def lr(self, expert: str) -> float:
        return self.lr_gen if expert == "gen" else self.lr_und


def default_stages(scale: float = 0.01, p_drop: float = 0.5) -> list:
    """The recipe with step counts multiplied by ``scale`` (image dropout only in stage 3)."""
    return [
        StageConfig(stage=k, **{**row, "steps": int(round(row["steps"] * scale))}, p_drop=p_drop if k == 3 else 0.0)
        for k, row in _RECIPE.items()
    ]


def lr_at(stage: StageConfig, step: int) -> tuple:
    """(lr_gen, lr_und) at ``step``: linear warmup, then constant or cosine to 10% of peak."""
    if not 0 <= step < stage.steps:
        raise ScheduleError(f"step {step} outside [0, {stage.steps})")
    w = stage.warmup
    if step < w:
        f = step / w
    elif stage.schedule == "constant":
        f = 1.0
    else:
        span = max(1, stage.steps - w)
        tau = (step - w) / span
        f = COSINE_FLOOR + 0.5 * (1.0 + math.cos(math.pi * tau)) * (1.0 - COSINE_FLOOR)
    return stage.lr_gen * f, stage.lr_und * f


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    """Decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)."""

    betas: tuple = BETAS
    eps: float = EPS
    weight_decay: float = WEIGHT_DECAY
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        """``grads`` maps parameter name to gradient; ``lrs`` maps expert to lr.

        Parameters without a gradient still get their moments decayed and the
        weight decay applied, as if their gradient were zero.
        """
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise NonFiniteGradientError(f"gradient of {name} has {bad} non-finite entries; step {self.t + 1} skipped")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            d = p.data
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(d)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(d)
                self.v[name] = np.zeros_like(d)
            v = self.v[name]
            m *= d.dtype.type(b1)
            m += d.dtype.type(1.0 - b1) * g
            v *= d.dtype.type(b2)
            v += d.dtype.type(1.0 - b2) * (g * g)
            lr = lrs[M.expert_of(name)]
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (d * d.dtype.type(1.0 - lr * self.weight_decay) - d.dtype.type(lr) * upd).astype(d.dtype, copy=False)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class SyntheticData:
    """Deterministic pools of static assets and editing trajectories, built on demand."""

    grid_n: int = 16
    n_static: int = 64
    n_traj: int = 64
    turns: int = 2
    seed: int = 0
    edit_kinds: tuple = EDIT_KINDS
    primitives: tuple = PRIMITIVES
    templates: tuple = ()

    def static(self, i: int) -> tuple:
        return _static(self.seed, i % self.n_static, self.grid_n, self.primitives)

    def procedural(self, i: int, turns: int | None = None):
        return make_trajectory(self._traj_seed(i), turns or self.turns, self.grid_n, self.edit_kinds, self.primitives, self.templates)

    def semantic(self, i: int, turns: int | None = None):
        return make_semantic_trajectory(self._traj_seed(i), turns or self.turns, self.grid_n)

    def _traj_seed(self, i: int) -> int:
        return int(np.random.SeedSequence([self.seed, 7, i % self.n_traj]).generate_state(1)[0])


@lru_cache(maxsize=4096)
def _static(seed: int, i: int, grid_n: int, primitives: tuple) -> tuple:
    rng = np.random.default_rng([seed, 3, i])
    prim, asset = sample_asset(rng, grid_n, primitives)
    return asset, primitive_caption(prim)


@dataclass
class TaskSample:
    task: Task
    seq: M.PackedSequence
    image_dropped: bool = False


def sample_task(stage: StageConfig, rng: np.random.Generator, data: SyntheticData | None = None) -> TaskSample:
    """Draw a task kind by the stage ratios, then a sample for it.

    Image-to-mesh samples lose their image with probability ``p_drop``: the
    image tokens become null embeddings and the caption is packed in front,
    so the sample turns into text-to-mesh.
    """
    task = TASKS[int(rng.choice(len(TASKS), p=np.asarray(stage.ratios)))]
    if data is None:
        return TaskSample(task, None)
    idx = int(rng.integers(1 << 30))
    dropped = False
    if task in (Task.PROCEDURAL, Task.SEMANTIC):
        make = data.procedural if task is Task.PROCEDURAL else data.semantic
        traj = make(idx)
        seq = M.pack_trajectory(traj, "train")
        # hard per-sample cap: drop trailing turns until the sequence fits
        while stage.token_cap and seq.n_tokens > stage.token_cap and traj.turns:
            traj = traj.prefix(len(traj.turns) - 1)
            seq = M.pack_trajectory(traj, "train")
        return TaskSample(task, seq)
    asset, cap = data.static(idx)
    if task is Task.I2T:
        seq = M.pack_image_caption(asset, cap)
    elif task is Task.M2T:
        seq = M.pack_caption(asset, cap)
    elif task is Task.T2M:
        seq = M.pack_generation(cap, asset)
    else:
        dropped = stage.p_drop > 0 and bool(rng.random() < stage.p_drop)
        seq = M.pack_generation(cap if dropped else None, asset, image=True, image_null=dropped)
    return TaskSample(task, seq, dropped)


# ---------------------------------------------------------------------------
# training state and loop

LOG_FIELDS = ("step", "stage", "lr_gen", "lr_und", "l_ce", "l_fm_structure", "l_fm_shape", "l_fm_material", "total")


def stream(seed: int, name: str, step: int) -> np.random.Generator:
    """Named random stream for one global step, so resuming needs no RNG state."""
    tag = {"data": 0, "noise": 1, "dropout": 2}[name]
    return np.random.default_rng([seed, tag, step])


@dataclass
class TrainState:
    model: M.MoTModel
    opt: AdamW = field(default_factory=AdamW)
    step: int = 0
    stage: int = 1
    stage_step: int = 0
    seed: int = 0

    def extras(self) -> dict:
        # int32 bit patterns carried in a float32 record, so large seeds survive exactly
        counters = np.array([self.step, self.stage, self.stage_step, self.seed, self.opt.t], dtype=np.int32)
        out = {"state.counters": counters.view(np.float32)}
        for name in self.model.params:
            if name in self.opt.m:
                out[f"opt.m.{name}"] = self.opt.m[name]
                out[f"opt.v.{name}"] = self.opt.v[name]
        return out

    @classmethod
    def from_extras(cls, model: M.MoTModel, extra: dict) -> "TrainState":
        c = extra.get("state.counters")
        if c is None:
            return cls(model)
        step, stage, stage_step, seed, t = (int(x) for x in np.asarray(c, dtype="<f4").view(np.int32))
        opt = AdamW(t=t)
        for name, p in model.params.items():
            if f"opt.m.{name}" in extra:
                opt.m[name] = extra[f"opt.m.{name}"].astype(p.data.dtype).copy()
                opt.v[name] = extra[f"opt.v.{name}"].astype(p.data.dtype).copy()
        return cls(model, opt, step, stage, stage_step, seed)

    def save(self, path) -> None:
        M.save_checkpoint(path, self.model, self.extras())

    @classmethod
    def load(cls, path) -> "TrainState":
        model, extra = M.load_checkpoint(path)
        return cls.from_extras(model, extra)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def train_step(state: TrainState, stage: StageConfig, data: SyntheticData, lr_scale: float = 1.0) -> dict:
    """One packed sample: forward, weighted loss, backward, AdamW update."""
    rng = stream(state.seed, "data", state.step)
    sample = sample_task(stage, rng, data)
    losses = M.forward_losses(
        sample.seq,
        state.model,
        shift=stage.shift,
        rng=stream(state.seed, "noise", state.step),
        drop_rng=stream(state.seed, "dropout", state.step),
        cfg_dropout=stage.cfg_dropout,
    )
    terms = []
    if losses.ce is not None and stage.w_ce:
        terms.append(T.scale(losses.ce, stage.w_ce))
    if losses.fm and stage.w_mse:
        fm_sum = losses.fm[next(iter(losses.fm))]
        for k in list(losses.fm)[1:]:
            fm_sum = T.add(fm_sum, losses.fm[k])
        terms.append(T.scale(fm_sum, stage.w_mse))
    lr_gen, lr_und = lr_at(stage, state.stage_step)
    lr_gen, lr_und = lr_gen * lr_scale, lr_und * lr_scale
    total = None
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        for p in state.model.params.values():
            p.grad = None
        T.backward(total)
        grads = {name: p.grad for name, p in state.model.params.items() if p.grad is not None}
        state.opt.step(state.model.params, grads, {"gen": lr_gen, "und": lr_und})
    fm = losses.fm_values()
    row = {
        "step": state.step,
        "stage": stage.stage,
        "lr_gen": lr_gen,
        "lr_und": lr_und,
        "l_ce": losses.ce_value(),
        "l_fm_structure": fm.get("structure"),
        "l_fm_shape": fm.get("shape"),
        "l_fm_material": fm.get("material"),
        "total": None if total is None else float(total.data),
        "task": sample.task.name,
    }
    state.step += 1
    state.stage_step += 1
    return row


def run_stage(state: TrainState, stage: StageConfig, data: SyntheticData, budget: int | None = None, log_path=None, lr_scale: float = 1.0, on_step=None) -> list:
    """Run the rest of ``stage`` (at most ``budget`` more steps) and return the log rows.

    When ``log_path`` is given each row is appended to that CSV as it is
    produced, writing the header first if the file is new.
    """
    if state.stage != stage.stage:
        state.stage, state.stage_step = stage.stage, 0
    rows = []
    remaining = stage.steps - state.stage_step
    if budget is not None:
        remaining = min(remaining, budget)
    if remaining <= 0:
        return rows
    fh = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    try:
        for _ in range(remaining):
            row = train_step(state, stage, data, lr_scale)
            rows.append(row)
            if writer is not None:
                writer.writerow([row["step"], row["stage"]] + [_fmt(row[k]) for k in LOG_FIELDS[2:]])
                fh.flush()
            if on_step is not None:
                on_step(state, row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
