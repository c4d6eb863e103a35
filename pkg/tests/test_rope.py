import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvox import rope3d as R

from oracles import mrope_complex

CFG = R.RopeConfig(24)

coord = st.tuples(*[st.integers(0, 63)] * 3)


def test_zero_position_is_identity(rng):
    v = rng.normal(size=24)
    assert np.array_equal(R.apply_mrope(v, (0, 0, 0), CFG), v)
    assert np.array_equal(R.apply_rope1d(v, 0, CFG), v)


def test_head_dim_must_split_across_axes():
    with pytest.raises(R.RopeConfigError):
        R.RopeConfig(20)


def test_axis_striping():
    sets = CFG.axis_sets()
    assert [list(s[:3]) for s in sets] == [[0, 3, 6], [1, 4, 7], [2, 5, 8]]
    # moving only along y leaves the x and z pairs untouched
    v = np.arange(24.0)
    out = R.apply_mrope(v, (0, 5, 0), CFG)
    for k in np.concatenate([sets[0], sets[2]]):
        assert out[2 * k] == v[2 * k] and out[2 * k + 1] == v[2 * k + 1]


@settings(max_examples=40, deadline=None)
@given(coord, st.integers(0, 2**31 - 1))
def test_matches_complex_oracle(p, seed):
    v = np.random.default_rng(seed).normal(size=24)
    assert np.allclose(R.apply_mrope(v, p, CFG), mrope_complex(v, p, 24), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(coord, st.integers(0, 2**31 - 1))
def test_norm_preserved(p, seed):
    v = np.random.default_rng(seed).normal(size=24)
    assert abs(np.linalg.norm(R.apply_mrope(v, p, CFG)) - np.linalg.norm(v)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(coord, coord, coord, st.integers(0, 2**31 - 1))
def test_relative_shift_invariance(p1, p2, d, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(2, 24))
    shift = lambda p: tuple(a + b for a, b in zip(p, d))
    lhs = R.apply_mrope(q, p1, CFG) @ R.apply_mrope(k, p2, CFG)
    rhs = R.apply_mrope(q, shift(p1), CFG) @ R.apply_mrope(k, shift(p2), CFG)
    assert abs(lhs - rhs) < 1e-5


def test_rope1d_is_equal_component_mrope(rng):
    v = rng.normal(size=24)
    assert np.array_equal(R.apply_rope1d(v, 9, CFG), R.apply_mrope(v, (9, 9, 9), CFG))


def test_block_positions():
    c = np.array([[3, 5, 7], [4, 5, 9]])
    assert R.positions_for_block("clean_ss", 0, 16, coords=c[:1]).tolist() == [[3, 5, 7]]
    p = R.positions_for_block("clean_ss", 1, 16, coords=c)
    assert p[0].tolist() == [67, 69, 71]
    assert (p[1] - p[0]).tolist() == (c[1] - c[0]).tolist()
    t = R.positions_for_block("text", 2, 8, count=3, start=4)
    assert t.tolist() == [[68, 68, 68], [69, 69, 69], [70, 70, 70]]


def test_position_overflow():
    with pytest.raises(R.PositionOverflowError):
        R.positions_for_block("text", 1 << 18, 16, count=1)


def test_tables_agree_with_apply(rng):
    pos = rng.integers(0, 40, size=(5, 3))
    cos, sin = R.tables(pos, CFG, dtype=np.float64)
    v = rng.normal(size=(5, 24))
    out = np.empty_like(v)
    out[:, 0::2] = v[:, 0::2] * cos - v[:, 1::2] * sin
    out[:, 1::2] = v[:, 0::2] * sin + v[:, 1::2] * cos
    for i in range(5):
        assert np.allclose(out[i], R.apply_mrope(v[i], pos[i], CFG), atol=1e-12)
