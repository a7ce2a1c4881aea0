import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from amd_motion.losses import LossWeights, batch_loss, geometric_losses

from conftest import random_clip

FEET = (7, 10, 8, 11)


def _world(x):
    """Loop-based recovery written straight from the feature definitions."""
    f = len(x)
    out = np.zeros((f, 22, 3))
    h, rx, rz = 0.0, 0.0, 0.0
    for k in range(f):
        c, s = math.cos(h), math.sin(h)
        out[k, 0] = (rx, x[k, 3], rz)
        for j in range(21):
            px, py, pz = x[k, 4 + 3 * j: 7 + 3 * j]
            out[k, j + 1] = (c * px + s * pz + rx, py, -s * px + c * pz + rz)
        vx, vz = x[k, 1], x[k, 2]
        rx += c * vx + s * vz
        rz += -s * vx + c * vz
        h += x[k, 0]
    return out


def brute_losses(p, g, w=(1, 1, 1, 1, 0.5)):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    f = len(p)
    lh = sum((p[k, 3] - g[k, 3]) ** 2 for k in range(f)) / f
    lr = sum((p[k, c] - g[k, c]) ** 2 for k in range(f) for c in range(67, 193)) / (f * 126)
    vel = list(range(0, 3)) + list(range(193, 259))
    lv = sum((p[k, c] - g[k, c]) ** 2 for k in range(f) for c in vel) / (f * len(vel))
    wp, wg = _world(p), _world(g)
    lp = sum(((wp[k, j] - wg[k, j]) ** 2).sum() for k in range(f) for j in range(22)) / (f * 66)
    slide = 0.0
    for k in range(f - 1):
        for i, j in enumerate(FEET):
            slide += g[k, 259 + i] * ((wp[k + 1, j] - wp[k, j]) ** 2).sum()
    slide /= max(4 * (f - 1), 1)
    label = sum((p[k, c] - g[k, c]) ** 2 for k in range(f) for c in range(259, 263)) / (f * 4)
    lf = slide + label
    terms = (lh, lp, lr, lv, lf)
    return terms, sum(a * b for a, b in zip(w, terms))


def test_brute_force_100_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        f = int(rng.integers(2, 12))
        p, g = random_clip(rng, f), random_clip(rng, f)
        out = geometric_losses(p, g)
        terms, total = brute_losses(p, g)
        got = (out.height, out.position, out.rotation, out.velocity, out.foot_slide)
        np.testing.assert_allclose(got, terms, rtol=1e-9, atol=1e-15)
        assert out.total == pytest.approx(total, rel=1e-9)


def test_zero_at_identity(small_corpus):
    g = small_corpus.records[0].clip.frames
    out = geometric_losses(g, g)
    # foot_slide may be tiny but non-zero: a planted foot moves less than the contact threshold
    assert out.height == out.position == out.rotation == out.velocity == 0
    assert out.foot_slide < 4e-6


def test_zero_for_self_consistent_static_clip():
    g = np.zeros((10, 263))
    g[:, 259:263] = 1
    out = geometric_losses(g, g)
    assert out.total == 0


def test_zero_weights():
    rng = np.random.default_rng(1)
    p, g = random_clip(rng), random_clip(rng)
    assert geometric_losses(p, g, weights=LossWeights(0, 0, 0, 0, 0)).total == 0


def test_height_perturbation():
    rng = np.random.default_rng(2)
    g = random_clip(rng, 15).astype(np.float64)
    p = g.copy()
    d = 0.1
    p[:, 3] += d
    out = geometric_losses(p, g)
    assert out.height == pytest.approx(d * d, rel=1e-12)
    assert out.rotation == 0 and out.velocity == 0
    # only the root joint's y moves
    assert out.position == pytest.approx(d * d / 66, rel=1e-12)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.integers(0, 1000))
def test_total_linear_in_weights(a, b, c, d, e, seed):
    rng = np.random.default_rng(seed)
    p, g = random_clip(rng, 6), random_clip(rng, 6)
    out = geometric_losses(p, g, weights=LossWeights(a, b, c, d, e))
    expect = a * out.height + b * out.position + c * out.rotation + d * out.velocity + e * out.foot_slide
    assert out.total == pytest.approx(expect, rel=1e-9, abs=1e-15)
    assert min(out.as_floats().values()) >= 0


def test_invalid_weights():
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        geometric_losses(np.zeros((3, 263)), np.zeros((4, 263)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    g = torch.from_numpy(random_clip(rng, 20).astype(np.float64))
    p = torch.from_numpy(random_clip(rng, 20).astype(np.float64)).requires_grad_(True)
    total = geometric_losses(p, g).total
    (grad,) = torch.autograd.grad(total, p)
    h = 1e-4
    for _ in range(50):
        k, c = int(rng.integers(20)), int(rng.integers(263))
        with torch.no_grad():
            q = p.detach().clone()
            q[k, c] += h
            up = geometric_losses(q, g).total
            q[k, c] -= 2 * h
            dn = geometric_losses(q, g).total
        fd = float((up - dn) / (2 * h))
        assert abs(fd - float(grad[k, c])) <= 1e-3 * max(abs(fd), 1e-8) + 1e-10


def test_batch_padding_ignored():
    rng = np.random.default_rng(4)
    p, g = random_clip(rng, 8).astype(np.float64), random_clip(rng, 8).astype(np.float64)
    single = geometric_losses(p, g)
    pad = lambda x: torch.from_numpy(np.concatenate([x, rng.normal(size=(5, 263))]))[None]
    mask = torch.zeros(1, 13, dtype=torch.bool)
    mask[:, :8] = True
    out = batch_loss(pad(p), pad(g), LossWeights(), mask)
    assert float(out.total) == pytest.approx(single.total, rel=1e-12)
