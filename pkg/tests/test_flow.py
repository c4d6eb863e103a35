import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvox import flow_matching as F
from motvox import tensor_core as T
from motvox.tensor_core import Tensor


def test_interpolate_endpoints_and_midpoint(rng):
    x0, x1 = rng.normal(size=(2, 5, 3))
    assert np.array_equal(F.interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(F.interpolate(x0, x1, 1.0), x1)
    assert np.allclose(F.interpolate(x0, x1, 0.5), (x0 + x1) / 2)
    with pytest.raises(ValueError):
        F.interpolate(x0, x1, 1.5)


def test_cfm_perfect_and_zero_predictor():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(2, 100_000, 1))
    assert float(F.cfm_loss(Tensor(x1 - x0), x0, x1).data) == 0.0
    zero = float(F.cfm_loss(Tensor(np.zeros_like(x0)), x0, x1).data)
    assert abs(zero - 2.0) < 0.04


def test_cfm_gradient(rng):
    x0, x1 = rng.normal(size=(2, 4, 3))
    with T.precision("float64"):
        v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        g = T.backward(F.cfm_loss(v, x0, x1))[v]
        assert np.allclose(g, 2 * (v.data - (x1 - x0)) / 12, atol=1e-12)
        assert T.grad_check(lambda t: F.cfm_loss(t, x0, x1), v.data, eps=1e-6) < 1e-6


def test_shift_values():
    u = np.linspace(0, 1, 11)
    assert np.array_equal(F.shift_t(u, 1.0), u)
    assert F.shift_t(0.5, 3.0) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        F.shift_t(0.5, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 20.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_shift_endpoints_and_monotone(s, a, b):
    assert F.shift_t(0.0, s) == 0.0 and F.shift_t(1.0, s) == pytest.approx(1.0, abs=1e-15)
    lo, hi = sorted((a, b))
    assert F.shift_t(lo, s) <= F.shift_t(hi, s)


def test_time_grid_endpoints():
    g = F.time_grid(7, 3.0)
    assert g[0] == 0.0 and g[-1] == 1.0 and np.all(np.diff(g) > 0)


def test_guidance_weights(rng):
    c, u = rng.normal(size=(2, 6))
    assert np.array_equal(F.guided_velocity(c, u, 1.0), c)
    assert np.array_equal(F.guided_velocity(c, u, 0.0), u)


def test_drop_rate():
    rng = np.random.default_rng(5)
    rate = np.mean([F.drop_condition(rng, 0.1) for _ in range(100_000)])
    assert abs(rate - 0.1) < 0.005


def test_euler_one_step_exact_on_constant_field():
    x0 = np.random.default_rng(42).standard_normal((3, 2)).astype(np.float32)
    x1 = np.arange(6, dtype=np.float32).reshape(3, 2)
    out = F.euler_sample(lambda x, t, c: x1 - x0, (3, 2), 1, seed=42)
    assert np.allclose(out, x1, atol=1e-6)


def test_euler_converges_on_linear_field():
    out = F.euler_sample(lambda x, t, c: -x, (4,), 1000, seed=3, dtype=np.float64)
    x0 = np.random.default_rng(3).standard_normal(4)
    assert np.allclose(out, math.exp(-1) * x0, atol=1e-2)


def test_euler_deterministic():
    f = lambda x, t, c: np.sin(x) * t + c
    a = F.euler_sample(f, (5,), 10, seed=9, cond=0.5)
    b = F.euler_sample(f, (5,), 10, seed=9, cond=0.5)
    assert a.tobytes() == b.tobytes()
