import math

import numpy as np
import pytest

from motvox import curriculum as C
from motvox import model_pipeline as M
from motvox import tensor_core as T
from motvox.curriculum import Task

from oracles import adamw_scalar


def test_ratio_rows_sum_to_one():
    for st in C.default_stages():
        assert sum(st.ratios) == pytest.approx(1.0, abs=1e-12)


def test_stage3_and_stage1_rows():
    s1, _, s3, _, s5 = C.default_stages()
    assert (s3.lr_gen, s3.lr_und, s3.schedule, s3.shift, s3.w_ce, s3.w_mse) == (1e-4, 1e-5, "cosine", 3.0, 0.25, 1.0)
    assert s3.ratios[:4] == (0.05, 0.3, 0.5, 0.15)
    assert s1.lr_gen == 0.0 and s1.ratio(Task.M2T) == 1.0 and (s1.w_ce, s1.w_mse) == (1.0, 0.0)
    assert s5.w_ce == 0.0


def test_bad_ratios_rejected():
    with pytest.raises(ValueError):
        C.StageConfig(1, 0, 0, "constant", 10, 1.0, 1, 0, (0.5, 0.4, 0, 0, 0, 0))


def test_single_ratio_always_that_task(rng):
    s1 = C.default_stages()[0]
    assert {C.sample_task(s1, rng).task for _ in range(200)} == {Task.M2T}


def test_p_drop_zero_matches_plain_packing():
    st = C.default_stages(p_drop=0.0)[2]
    data = C.SyntheticData(grid_n=8, n_static=4, n_traj=4)
    for seed in range(40):
        s = C.sample_task(st, np.random.default_rng(seed), data)
        if s.task is Task.I2M:
            rng = np.random.default_rng(seed)
            rng.choice(6, p=np.asarray(st.ratios))
            asset, _ = data.static(int(rng.integers(1 << 30)))
            plain = M.pack_generation(None, asset, image=True)
            assert not s.image_dropped
            assert np.array_equal(s.seq.positions, plain.positions)
            assert all(np.array_equal(a.patches, b.patches) for a, b in zip(s.seq.blocks, plain.blocks) if a.patches is not None)


def test_image_dropout_packs_caption():
    st = C.default_stages(p_drop=1.0)[2]
    data = C.SyntheticData(grid_n=8, n_static=4, n_traj=4)
    seen = 0
    for seed in range(40):
        s = C.sample_task(st, np.random.default_rng(seed), data)
        if s.task is Task.I2M:
            seen += 1
            kinds = [b.kind.token for b in s.seq.blocks[:2]]
            assert kinds == ["text", "image"] and s.seq.blocks[1].null
    assert seen


def test_token_cap_truncates_turns():
    base = C.default_stages()[3]
    data = C.SyntheticData(grid_n=8, n_traj=8, turns=3)
    cap = C.StageConfig(**{**base.__dict__, "ratios": (0, 0, 0, 0, 1.0, 0), "token_cap": 1200})
    for seed in range(5):
        s = C.sample_task(cap, np.random.default_rng(seed), data)
        assert s.seq.n_tokens <= 1200 or len({b.turn for b in s.seq.blocks}) == 1


def test_warmup_and_schedules():
    st = C.default_stages(scale=0.01)[2]  # 1000 steps, cosine
    assert st.warmup == 50
    assert C.lr_at(st, 0) == (0.0, 0.0)
    s2 = C.default_stages(scale=0.01)[1]
    assert C.lr_at(s2, s2.warmup) == (2e-4, 1e-5) == C.lr_at(s2, s2.steps - 1)
    tau_mid = st.warmup + (st.steps - st.warmup) // 2
    want = 0.5 * (1 + math.cos(math.pi * 0.5)) * (1e-4 - 1e-5) + 1e-5
    assert C.lr_at(st, tau_mid)[0] == pytest.approx(want, rel=1e-12)
    with pytest.raises(C.ScheduleError):
        C.lr_at(st, st.steps)


def test_warmup_clamped_for_tiny_stages():
    st = C.StageConfig(2, 1e-3, 1e-3, "constant", 10, 1.0, 0.25, 1.0, (0, 0.9, 0, 0.1, 0, 0))
    assert st.warmup == 10


def test_adamw_decay_only_step():
    with T.precision("float64"):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True, name="gen.x")
    C.AdamW().step({"gen.x": p}, {}, {"gen": 0.1, "und": 0.0})
    assert np.array_equal(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.05))


def test_adamw_matches_hand_oracle():
    with T.precision("float64"):
        p = T.Tensor(np.array([0.7]), requires_grad=True, name="und.x")
        opt = C.AdamW()
        ref, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate([0.3, -1.1, 0.05], start=1):
            opt.step({"und.x": p}, {"und.x": np.array([g])}, {"gen": 0.0, "und": 1e-2})
            ref, m, v = adamw_scalar(ref, g, 1e-2, t, m, v)
            assert abs(p.data[0] - ref) <= 1e-12


def test_adamw_zero_lr_is_bitwise_noop(rng):
    p = T.Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True, name="gen.w")
    before = p.data.copy()
    C.AdamW().step({"gen.w": p}, {"gen.w": rng.normal(size=(3, 3)).astype(np.float32)}, {"gen": 0.0, "und": 1.0})
    assert p.data.tobytes() == before.tobytes()


def test_adamw_rejects_nonfinite_before_mutating():
    p = T.Tensor(np.ones(2), requires_grad=True, name="und.x")
    opt = C.AdamW()
    with pytest.raises(C.NonFiniteGradientError):
        opt.step({"und.x": p}, {"und.x": np.array([1.0, np.nan])}, {"gen": 0, "und": 1})
    assert opt.t == 0 and np.array_equal(p.data, np.ones(2))


def tiny_state(seed=0):
    cfg = M.ModelConfig(d_model=24, heads=2, layers=1, ffn=48, grid_n=8)
    return C.TrainState(M.MoTModel.init(cfg, 0), seed=seed)


def test_zero_step_stage_leaves_state(tmp_path):
    st = C.StageConfig(2, 1e-3, 1e-3, "constant", 0, 1.0, 0.25, 1.0, (0, 0.9, 0, 0.1, 0, 0))
    state = tiny_state()
    before = {k: v.data.copy() for k, v in state.model.params.items()}
    assert C.run_stage(state, st, C.SyntheticData(grid_n=8, n_static=2), log_path=tmp_path / "l.csv") == []
    assert state.step == 0 and all(np.array_equal(before[k], v.data) for k, v in state.model.params.items())


def test_training_is_deterministic():
    st = C.default_stages(scale=0.0001)[1]
    data = C.SyntheticData(grid_n=8, n_static=4)
    a = C.run_stage(tiny_state(3), st, data, budget=3)
    b = C.run_stage(tiny_state(3), st, data, budget=3)
    assert a == b


def test_state_round_trip_keeps_optimizer(tmp_path):
    st = C.default_stages(scale=0.0001)[1]
    state = tiny_state(seed=2**30 + 7)
    C.run_stage(state, st, C.SyntheticData(grid_n=8, n_static=4), budget=2)
    state.save(tmp_path / "s.mot")
    back = C.TrainState.load(tmp_path / "s.mot")
    assert (back.step, back.stage, back.stage_step, back.seed, back.opt.t) == (2, 2, 2, 2**30 + 7, 2)
    for k in state.opt.m:
        assert np.array_equal(back.opt.m[k], state.opt.m[k])
