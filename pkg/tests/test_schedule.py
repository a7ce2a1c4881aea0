import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from amd_motion.schedule import alpha_bar_logspace, build_linear_schedule, q_sample, q_step, renoise_step


def test_full_scale_endpoints():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == 1e-4 and s.beta[-1] == 0.02
    assert s.alpha_bar[0] == 1 - 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert math.sqrt(1 - s.alpha_bar[-1]) > 0.999


def test_two_step_values():
    s = build_linear_schedule(2, 0.1, 0.3)
    np.testing.assert_allclose(s.beta, [0.1, 0.3], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.63], rtol=1e-15)


def test_single_step():
    s = build_linear_schedule(1, 0.05, 0.05)
    assert s.T == 1 and s.beta[0] == 0.05


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_bounds(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


@given(st.integers(1, 2000), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_product_and_logspace_agree(T, b0, extra):
    s = build_linear_schedule(T, b0, min(b0 + extra, 0.9))
    running = np.ones(T)
    acc = 1.0
    for i in range(T):
        acc *= 1 - s.beta[i]
        running[i] = acc
    np.testing.assert_allclose(s.alpha_bar, running, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bar, alpha_bar_logspace(s), rtol=1e-12)
    assert np.all(np.diff(s.beta) >= 0)


def test_linear_interpolation_formula():
    s = build_linear_schedule(7, 0.01, 0.07)
    expected = [0.01 + 0.06 * (t - 1) / 6 for t in range(1, 8)]
    np.testing.assert_allclose(s.beta, expected, rtol=1e-14)


def test_q_sample_edge_cases(rng):
    s = build_linear_schedule(100, 1e-4, 0.02)
    x0 = rng.normal(size=(4, 5))
    n = rng.normal(size=(4, 5))
    assert np.array_equal(q_sample(x0, 30, np.zeros_like(x0), s), math.sqrt(s.alpha_bar[29]) * x0)
    assert np.array_equal(q_sample(np.zeros_like(n), 30, n, s), math.sqrt(1 - s.alpha_bar[29]) * n)


def test_q_sample_errors(rng):
    s = build_linear_schedule(10)
    x = rng.normal(size=(2, 3))
    with pytest.raises(ValueError):
        q_sample(x, 0, x, s)
    with pytest.raises(ValueError):
        q_sample(x, 11, x, s)
    with pytest.raises(ValueError):
        q_sample(x, 3, x[:1], s)


def test_q_sample_per_sample_t_and_torch(rng):
    s = build_linear_schedule(50)
    x0 = torch.randn(3, 4, 5)
    n = torch.randn(3, 4, 5)
    t = np.array([1, 25, 50])
    out = q_sample(x0, t, n, s)
    for i, ti in enumerate(t):
        torch.testing.assert_close(out[i], q_sample(x0[i], int(ti), n[i], s))


@given(st.floats(-5, 5), st.integers(1, 100))
def test_q_sample_linear(a, t):
    s = build_linear_schedule(100)
    rng = np.random.default_rng(t)
    x0, n = rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(q_sample(a * x0, t, a * n, s), a * q_sample(x0, t, n, s), rtol=1e-12, atol=1e-12)


def test_marginal_matches_composed_kernels():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x0 = np.array([1.5, -0.7, 0.0, 2.0])
    n = 10_000
    xs = np.tile(x0, (n, 1))
    for t in range(1, 51):
        xs = q_step(xs, t, rng.standard_normal(xs.shape), s)
    direct = q_sample(np.tile(x0, (n, 1)), 50, rng.standard_normal((n, 4)), s)
    mu, sd = math.sqrt(s.alpha_bar[49]), math.sqrt(1 - s.alpha_bar[49])
    np.testing.assert_allclose(direct.mean(0), mu * x0, atol=0.01 * max(1, abs(x0).max()))
    np.testing.assert_allclose(xs.mean(0), direct.mean(0), atol=0.01 * max(1, abs(x0).max()))
    np.testing.assert_allclose(xs.std(0), direct.std(0), rtol=0.01)
    np.testing.assert_allclose(direct.std(0), sd, rtol=0.01)


def test_renoise(rng):
    s = build_linear_schedule(100)
    x = rng.normal(size=(3, 4))
    n = rng.normal(size=(3, 4))
    assert renoise_step(x, 0, n, s) is x
    assert np.array_equal(renoise_step(x, 10, n, s), q_sample(x, 10, n, s))
    assert np.array_equal(renoise_step(np.zeros_like(x), 100, n, s), math.sqrt(1 - s.alpha_bar[-1]) * n)
    with pytest.raises(ValueError):
        renoise_step(x, 101, n, s)
    with pytest.raises(ValueError):
        renoise_step(x, -1, n, s)
