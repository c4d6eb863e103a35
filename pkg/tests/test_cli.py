import csv
import filecmp
from pathlib import Path

import numpy as np
import pytest

from motvox import cli
from motvox import model_pipeline as M
from motvox import ovoxel as O

TINY = ["d_model=24", "heads=2", "layers=1", "ffn=48", "grid_n=8", "n_static=4", "n_traj=4", "scale=0.0002", "ckpt_every=2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def train(out, *extra):
    args = ["train"]
    for kv in TINY + [f"out_dir={out}"]:
        args += ["--set", kv]
    return run(*args, *extra)


def test_make_data_deterministic_and_counted(tmp_path):
    for d in ("a", "b"):
        assert run("make-data", "--out", tmp_path / d, "--count", 10, "--seed", 1, "--grid", 8) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    names = sorted(p.name for p in (tmp_path / "a").glob("traj_*.txt"))
    assert len(names) == 10
    assert all(filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False) for n in names)


def test_make_data_bad_turns(tmp_path):
    assert run("make-data", "--out", tmp_path, "--turns", 0) == 1


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("generate", "--bogus")
    assert exc.value.code == 1


def test_config_file_and_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("d_model = 24  # small\nuse_positions = false\n")
    rc = cli.load_config(cfg, ["heads=2"])
    assert (rc.d_model, rc.heads, rc.use_positions) == (24, 2, False)
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("bogus = 1")


def test_inspect_mask_golden(tmp_path, capsys):
    golden = Path(__file__).parent / "golden" / "table1_mask.txt"
    assert run("inspect-mask", "--out", tmp_path / "m.txt") == 0
    assert (tmp_path / "m.txt").read_text() == golden.read_text()
    assert run("inspect-mask", "--layout", "text@0:4") == 0
    assert capsys.readouterr().out == "C\n"
    assert run("inspect-mask", "--layout", "nonsense@@") == 1


def test_stage1_leaves_gen_at_init(tmp_path):
    assert train(tmp_path, "--stage", 1) == 0
    init, _ = M.load_checkpoint(tmp_path / "init.mot")
    final, _ = M.load_checkpoint(tmp_path / "model.mot")
    changed_und = False
    for name, p in init.params.items():
        if name.startswith("gen."):
            assert final.params[name].data.tobytes() == p.data.tobytes(), name
        else:
            changed_und |= not np.array_equal(final.params[name].data, p.data)
    assert changed_und


def read_steps(path):
    with open(path, newline="") as fh:
        return [int(r["step"]) for r in csv.DictReader(fh)]


def test_resume_continues_log(tmp_path):
    assert train(tmp_path, "--stage", 2, "--max-steps", 5) == 0
    assert read_steps(tmp_path / "loss.csv") == list(range(5))
    assert train(tmp_path, "--stage", 2, "--resume") == 0
    steps = read_steps(tmp_path / "loss.csv")
    assert steps == list(range(len(steps))) and len(steps) == 30


def test_generate_edit_caption_and_errors(tmp_path, capsys):
    model = M.MoTModel.init(M.ModelConfig(d_model=24, heads=2, layers=1, ffn=48, grid_n=8), 0)
    model.params["gen.structure.out.b"].data[:] = 3.0
    ck = tmp_path / "m.mot"
    M.save_checkpoint(ck, model)
    gen = ["generate", "--ckpt", ck, "--prompt", "red box", "--steps", 2, "--seed", 5]
    assert run(*gen, "--out", tmp_path / "a.ovx") == 0
    assert run(*gen, "--out", tmp_path / "b.ovx") == 0
    assert (tmp_path / "a.ovx").read_bytes() == (tmp_path / "b.ovx").read_bytes()

    traj = O.make_trajectory(0, 1, 8)
    traj.save(tmp_path / "h.txt")
    ed = ["edit", "--ckpt", ck, "--steps", 2, "--out", tmp_path / "e.ovx"]
    assert run(*ed, "--history", tmp_path / "h.txt", "--instruction", "translate by (1,0,0)") == 0
    assert run(*ed, "--history", tmp_path / "missing.txt", "--instruction", "rotate z by 90") == 2
    assert run(*ed, "--history", tmp_path / "h.txt", "--instruction", " ") == 1

    capsys.readouterr()
    assert run("caption", "--ckpt", ck, "--asset", tmp_path / "a.ovx", "--max-len", 4) == 0
    assert len(capsys.readouterr().out.strip()) <= 4

    (tmp_path / "bad.mot").write_bytes(b"MOT1" + bytes(10))
    assert run("ckpt-info", "--ckpt", tmp_path / "bad.mot") == 3
    assert run("ckpt-info", "--ckpt", ck) == 0

    model.params["gen.structure.out.b"].data[:] = -50.0
    M.save_checkpoint(ck, model)
    assert run(*gen, "--out", tmp_path / "c.ovx") == 4
