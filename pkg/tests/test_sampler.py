import numpy as np
import pytest
import torch

from amd_motion.conditioning import DurationPredictor
from amd_motion.denoiser import DESK, init_denoiser
from amd_motion.motion_repr import MotionClip, validate_clip
from amd_motion.sampler import (GeneratedSequence, PromptSequence, child_seed, default_window, infill_stitch,
                                infill_window, read_sequence, sample_joint, sample_long, sample_segment,
                                sequence_from_bytes, sequence_to_bytes, stitch_interp)
from amd_motion.schedule import build_linear_schedule

from conftest import random_clip


class Oracle:
    """Ignores its inputs and always predicts a fixed clip (identity normaliser)."""
    text_dim = 64

    def __init__(self, target):
        self.target = torch.as_tensor(target, dtype=torch.float32)
        self.calls = 0

    def normalize(self, x):
        return x

    def denormalize(self, x):
        return x

    def __call__(self, x, t, cur, prev_m=None, prev_t=None, mask=None, *rest):
        self.calls += 1
        return self.target[: x.shape[1]][None].expand(x.shape[0], -1, -1).clone()


SCHED = build_linear_schedule(20, 1e-3, 0.2)


@pytest.fixture(scope="module")
def model():
    return init_denoiser(DESK, 0)


def test_oracle_fixed_point(rng):
    target = random_clip(rng, 44)
    o = Oracle(target)
    out = sample_segment(o, SCHED, "a person jumps in place", 44, seed=3)
    assert np.array_equal(out.frames, target)
    assert o.calls == SCHED.T


def test_single_step_schedule(rng):
    target = random_clip(rng, 40)
    o = Oracle(target)
    out = sample_segment(o, build_linear_schedule(1, 0.5, 0.5), "x", 40, seed=0)
    assert o.calls == 1 and np.array_equal(out.frames, target)


def test_same_seed_bit_identical(model):
    a = sample_segment(model, SCHED, "a person waves", 40, seed=9)
    b = sample_segment(model, SCHED, "a person waves", 40, seed=9)
    c = sample_segment(model, SCHED, "a person waves", 40, seed=10)
    assert a == b and a != c
    validate_clip(a)


def test_invalid_frames(model):
    with pytest.raises(ValueError):
        sample_segment(model, SCHED, "x", 0, seed=0)
    with pytest.raises(ValueError):
        sample_segment(model, SCHED, "x", 401, seed=0)


def test_guidance_runs(model):
    a = sample_segment(model, SCHED, "a person waves", 40, seed=1, guidance_scale=2.0)
    validate_clip(a)


def test_prompt_sequence_validation():
    with pytest.raises(ValueError):
        PromptSequence([])
    with pytest.raises(ValueError):
        PromptSequence(["a"], [42])
    with pytest.raises(ValueError):
        PromptSequence(["a", "b"], [40])


def test_long_single_equals_segment(model):
    seq = sample_long(["a person waves"], model, SCHED, DurationPredictor(64), seed=4)
    ref = sample_segment(model, SCHED, "a person waves", 40, child_seed(4, 0))
    assert seq.segments[0] == ref and seq.seeds == [child_seed(4, 0)]


def test_long_frames_and_prefix(model):
    prompts = PromptSequence(["a person waves", "a person jumps in place", "a person squats down"], [40, 48, 44])
    seq = sample_long(prompts, model, SCHED, None, seed=4)
    assert seq.frames == [40, 48, 44] and seq.total_frames == 132
    swapped = PromptSequence([prompts.prompts[0], prompts.prompts[2], prompts.prompts[1]], [40, 44, 48])
    other = sample_long(swapped, model, SCHED, None, seed=4)
    assert other.segments[0] == seq.segments[0]
    assert other.segments[1] != seq.segments[2]


def test_long_conditions_on_previous(model):
    a = sample_long(PromptSequence(["a person waves", "a person jumps"], [40, 40]), model, SCHED, None, 1)
    b = sample_long(PromptSequence(["a person kicks", "a person jumps"], [40, 40]), model, SCHED, None, 1)
    assert a.segments[1] != b.segments[1]


def test_long_needs_duration():
    with pytest.raises(ValueError):
        sample_long(["a"], Oracle(np.zeros((40, 263))), SCHED, None, 0)


def test_joint(rng):
    target = random_clip(rng, 400)
    out = sample_joint(("a", "b"), Oracle(target), SCHED, seed=2, n_frames=96)
    assert out.n_frames == 96 and np.array_equal(out.frames, target[:96])
    with pytest.raises(ValueError):
        sample_joint(("a", "b"), Oracle(target), SCHED, seed=2, n_frames=404)


def test_joint_deterministic(model):
    a = sample_joint(("a person waves", "a person jumps"), model, SCHED, 5, n_frames=80)
    b = sample_joint(("a person waves", "a person jumps"), model, SCHED, 5, n_frames=80)
    assert a == b


def test_interp_window_zero_is_concat(rng):
    a, b = random_clip(rng, 10), random_clip(rng, 12)
    out = stitch_interp(MotionClip(a), MotionClip(b), 0)
    assert np.array_equal(out.frames, np.concatenate([a, b]))


def test_interp_midpoint_and_length(rng):
    a, b = random_clip(rng, 10).astype(np.float64), random_clip(rng, 12).astype(np.float64)
    out = stitch_interp(MotionClip(a), MotionClip(b), 3)
    assert out.n_frames == 19
    np.testing.assert_allclose(out.frames[8], 0.5 * a[8] + 0.5 * b[1], rtol=1e-15)
    assert np.array_equal(out.frames[:7], a[:7]) and np.array_equal(out.frames[10:], b[3:])
    with pytest.raises(ValueError):
        stitch_interp(MotionClip(a), MotionClip(b), 11)


def test_interp_same_clip_oracle(rng):
    a = random_clip(rng, 15).astype(np.float64)
    w = 5
    out = stitch_interp(MotionClip(a), MotionClip(a), w).frames
    for i in range(w):
        lam = (i + 1) / (w + 1)
        ref = (1 - lam) * a[15 - w + i] + lam * a[i]
        np.testing.assert_allclose(out[15 - w + i], ref, atol=1e-12)


def test_default_windows():
    assert default_window(100) == 10
    assert infill_window(50, 50) == (45, 55)
    with pytest.raises(ValueError):
        infill_window(2, 2)


def test_infill_outside_exact_and_oracle_fill(rng):
    a, b = random_clip(rng, 50), random_clip(rng, 50)
    truth = np.concatenate([a, b])
    out = infill_stitch(MotionClip(a), MotionClip(b), Oracle(truth), SCHED, seed=0)
    assert np.array_equal(out.frames, truth)
    other = random_clip(rng, 100)
    out = infill_stitch(MotionClip(a), MotionClip(b), Oracle(other), SCHED, seed=0)
    assert np.array_equal(out.frames[:45], a[:45]) and np.array_equal(out.frames[55:], b[5:])
    assert np.array_equal(out.frames[45:55], other[45:55])


def test_infill_with_model(model, rng):
    a, b = random_clip(rng, 40), random_clip(rng, 44)
    out = infill_stitch(MotionClip(a), MotionClip(b), model, SCHED, seed=1)
    s, e = infill_window(40, 44)
    raw = np.concatenate([a, b])
    assert np.array_equal(out.frames[:s], raw[:s]) and np.array_equal(out.frames[e:], raw[e:])
    validate_clip(out)


def test_child_seed_stable():
    assert child_seed(1, 0) == child_seed(1, 0)
    assert len({child_seed(1, i) for i in range(100)}) == 100


def test_sequence_roundtrip(tmp_path, rng):
    seq = GeneratedSequence([MotionClip(random_clip(rng, 40)), MotionClip(random_clip(rng, 44))],
                            ["a", "b"], [1, 2], "auto", 7, {"guidance": 2.0})
    buf = sequence_to_bytes(seq)
    back = sequence_from_bytes(buf)
    assert back.prompts == seq.prompts and back.seeds == seq.seeds and back.meta == seq.meta
    assert all(x == y for x, y in zip(back.segments, seq.segments))
    (tmp_path / "s").write_bytes(buf + b"x")
    with pytest.raises(ValueError, match="trailing"):
        read_sequence(tmp_path / "s")
    with pytest.raises(ValueError):
        sequence_from_bytes(b"NOPE" + buf[4:])
