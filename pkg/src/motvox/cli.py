"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 I/O, 3 checkpoint, 4 empty generation.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import curriculum as C
from . import model_pipeline as M
from .mot_attention import TABLE1_LAYOUT, BlockTableError, build_mask, parse_layout
from .ovoxel import EDIT_KINDS, OVoxelAsset, Trajectory, VoxelError, make_trajectory, render_image

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CKPT, EXIT_EMPTY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    d_model: int = 96
    layers: int = 4
    heads: int = 4
    ffn: int = 384
    grid_n: int = 16
    use_positions: bool = True
    scale: float = 0.01
    lr_scale: float = 1.0
    p_drop: float = 0.5
    token_cap: int = 0
    init_seed: int = 0
    train_seed: int = 0
    data_seed: int = 0
    n_static: int = 64
    n_traj: int = 64
    turns: int = 2
    edit_kinds: str = ",".join(EDIT_KINDS)
    edit_templates: str = ""  # ';'-separated instructions; overrides edit_kinds when set
    out_dir: str = "run"
    ckpt_every: int = 50
    sample_steps: int = 25
    guidance: float = 3.0
    sample_shift: float = 1.0

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            d_model=self.d_model, heads=self.heads, layers=self.layers, ffn=self.ffn,
            grid_n=self.grid_n, use_positions=self.use_positions,
        )

    def data(self) -> C.SyntheticData:
        kinds = tuple(k for k in self.edit_kinds.split(",") if k)
        templates = tuple(t.strip() for t in self.edit_templates.split(";") if t.strip())
        return C.SyntheticData(self.grid_n, self.n_static, self.n_traj, self.turns, self.data_seed, kinds, templates=templates)

    def stages(self) -> list:
        return [replace(s, token_cap=self.token_cap) for s in C.default_stages(self.scale, self.p_drop)]

    def sampler(self) -> M.SamplerConfig:
        return M.SamplerConfig(self.sample_steps, self.guidance, self.sample_shift)

    def render(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0"):
            raise UsageError(f"{key}: expected true/false, got {raw!r}")
        return low in ("true", "1")
    try:
        return {"int": int, "float": float}.get(kind, str)(raw.strip())
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"config line {n}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _FIELD_TYPES:
            raise UsageError(f"bad override {item!r}")
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    return replace(cfg, out_dir=str(Path(cfg.out_dir).resolve()))


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args) -> int:
    if args.turns < 1 or args.turns > 5:
        raise UsageError("--turns must be between 1 and 5")
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = tuple(k for k in args.kinds.split(",") if k)
    voxels = 0
    for i in range(args.count):
        traj = make_trajectory(int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0]), args.turns, args.grid, kinds)
        traj.save(out / f"traj_{i:05d}.txt")
        voxels += sum(len(a) for a in traj.states())
    print(f"trajectories={args.count} states={args.count * (args.turns + 1)} voxels={voxels} out={out}")
    return EXIT_OK


def _truncate_log(path: Path, step: int) -> None:
    """Drop log rows at or after ``step`` (written after the last checkpoint)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    print(cfg.render(), end="", flush=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.mot"
    log = out / "loss.csv"
    if args.resume:
        state = C.TrainState.load(ckpt)
        if state.model.cfg != cfg.model_config():
            raise UsageError("checkpoint model dims differ from the config")
        _truncate_log(log, state.step)
        print(f"resumed at step {state.step} (stage {state.stage}, stage step {state.stage_step})")
    else:
        state = C.TrainState(M.MoTModel.init(cfg.model_config(), cfg.init_seed), seed=cfg.train_seed)
        if log.exists():
            log.unlink()
        state.save(out / "init.mot")

    stages = cfg.stages()
    if args.stage:
        stages = [s for s in stages if s.stage == args.stage]
    stages = [s for s in stages if s.stage >= state.stage]
    data = cfg.data()

    def checkpoint(st, row):
        if st.stage_step % cfg.ckpt_every == 0:
            st.save(ckpt)

    left = args.max_steps
    for stage in stages:
        if left is not None and left <= 0:
            break
        print(f"stage {stage.stage}: {stage.steps} steps", flush=True)
        rows = C.run_stage(state, stage, data, budget=left, log_path=log, lr_scale=cfg.lr_scale, on_step=checkpoint)
        state.save(ckpt)
        if left is not None:
            left -= len(rows)
    print(f"done at step {state.step}; checkpoint {ckpt}")
    return EXIT_OK


def _load_model(path):
    model, _ = M.load_checkpoint(path)
    return model


def _sampler(args) -> M.SamplerConfig:
    return M.SamplerConfig(args.steps, args.guidance, args.shift)


def cmd_generate(args) -> int:
    if args.prompt is None and args.image is None:
        raise UsageError("generate needs --prompt and/or --image")
    model = _load_model(args.ckpt)
    image = render_image(OVoxelAsset.load(args.image)) if args.image else None
    asset = M.generate(model, args.prompt, image, _sampler(args), args.seed)
    asset.save(args.out)
    print(f"wrote {args.out} ({len(asset)} voxels)")
    return EXIT_OK


def cmd_edit(args) -> int:
    if not args.instruction.strip():
        raise UsageError("edit instruction is empty")
    model = _load_model(args.ckpt)
    history = Trajectory.load(args.history)
    asset = M.edit(model, history, args.instruction, _sampler(args), args.seed)
    asset.save(args.out)
    print(f"wrote {args.out} ({len(asset)} voxels)")
    return EXIT_OK


def cmd_caption(args) -> int:
    model = _load_model(args.ckpt)
    text = M.caption(model, OVoxelAsset.load(args.asset), args.max_len, args.seed)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_inspect_mask(args) -> int:
    layout = TABLE1_LAYOUT if args.layout == "table1" else args.layout
    try:
        table = parse_layout(layout)
    except BlockTableError as exc:
        raise UsageError(str(exc)) from None
    grid = build_mask(table, not args.hide_history).render()
    if args.out:
        Path(args.out).write_text(grid, encoding="utf-8")
    else:
        sys.stdout.write(grid)
    return EXIT_OK


def cmd_ckpt_info(args) -> int:
    print(M.Checkpoint.from_bytes(Path(args.ckpt).read_bytes()).describe())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motvox", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-data", help="write synthetic editing trajectories")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--turns", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=16)
    s.add_argument("--kinds", default=",".join(EDIT_KINDS))
    s.set_defaults(fn=cmd_make_data)

    s = sub.add_parser("train", help="run the staged curriculum")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--stage", type=int, choices=range(1, 6))
    s.add_argument("--resume", action="store_true")
    s.add_argument("--max-steps", type=int, help="stop after this many steps in total (resume later)")
    s.set_defaults(fn=cmd_train)

    def sampling(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--steps", type=int, default=25)
        s.add_argument("--guidance", type=float, default=3.0)
        s.add_argument("--shift", type=float, default=1.0)
        s.add_argument("--out", required=True)

    s = sub.add_parser("generate", help="text and/or image to asset")
    sampling(s)
    s.add_argument("--prompt")
    s.add_argument("--image", help="OVX1 asset whose render is the image condition")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("edit", help="next asset from a history and an instruction")
    sampling(s)
    s.add_argument("--history", required=True)
    s.add_argument("--instruction", required=True)
    s.set_defaults(fn=cmd_edit)

    s = sub.add_parser("caption", help="describe an asset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--asset", required=True)
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_caption)

    s = sub.add_parser("inspect-mask", help="print the block attention mask grid")
    s.add_argument("--layout", default="table1", help="'table1' or items like 'text@1:4 noise_ss@1'")
    s.add_argument("--hide-history", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_inspect_mask)

    s = sub.add_parser("ckpt-info", help="print a checkpoint header and records")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_ckpt_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except M.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except M.EmptyGenerationError as exc:
        print(f"empty generation: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, VoxelError, M.PackError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
