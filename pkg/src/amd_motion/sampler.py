"""Reverse diffusion for one segment, autoregressive multi-segment generation and the
joint / interpolation / infilling baselines.

Any object with ``text_dim``, ``normalize``, ``denormalize`` and the call signature of
``MotionDenoiser.forward`` can act as the denoiser.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import DurationPredictor, embed_text, predict_duration
from .motion_repr import CONTACT, FEAT_DIM, MotionClip, clip_from_bytes, clip_to_bytes
from .schedule import NoiseSchedule, q_sample, renoise_step

MIN_FRAMES = 40
MAX_SEGMENT_FRAMES = 200

SEQ_MAGIC = b"AMDS"
SEQ_VERSION = 1


@dataclass
class PromptSequence:
    prompts: list[str]
    frame_overrides: list[int | None] | None = None

    def __post_init__(self):
        if len(self.prompts) < 1:
            raise ValueError("need at least one prompt")
        if self.frame_overrides is not None:
            if len(self.frame_overrides) != len(self.prompts):
                raise ValueError("frame_overrides must match the number of prompts")
            for f in self.frame_overrides:
                if f is not None and (f % 4 or not MIN_FRAMES <= f <= MAX_SEGMENT_FRAMES):
                    raise ValueError(f"frame override {f} must be a multiple of 4 in [40, 200]")


@dataclass
class GeneratedSequence:
    segments: list[MotionClip]
    prompts: list[str]
    seeds: list[int]
    mode: str = "auto"
    master_seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> list[int]:
        return [s.n_frames for s in self.segments]

    @property
    def total_frames(self) -> int:
        return sum(self.frames)


def child_seed(master: int, index: int) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def _text_vec(text, dim: int) -> torch.Tensor:
    if isinstance(text, str):
        text = embed_text(text, dim)
    return torch.as_tensor(np.asarray(text, dtype=np.float32)).reshape(1, -1)


def _finish(model, x0_norm: torch.Tensor, fps: float) -> MotionClip:
    out = model.denormalize(x0_norm)[0].detach().cpu().numpy().astype(np.float32)
    out[:, CONTACT] = np.clip(out[:, CONTACT], 0.0, 1.0)
    return MotionClip(out, fps=fps)


def _predict(model, x, t, cur, prev_m, prev_t, guidance_scale):
    tt = torch.tensor([t])
    if guidance_scale is None:
        return model(x, tt, cur, prev_m, prev_t, torch.tensor([False]))
    cond = model(x, tt, cur, prev_m, prev_t, torch.tensor([False]))
    uncond = model(x, tt, cur, prev_m, prev_t, torch.tensor([True]))
    return uncond + guidance_scale * (cond - uncond)


@torch.no_grad()
def sample_segment(model, sched: NoiseSchedule, cur_text, n_frames: int, seed: int,
                   prev_motion=None, prev_text=None, guidance_scale: float | None = None,
                   fps: float = 20.0) -> MotionClip:
    """X_T ~ N(0, I); for t = T..1 predict x0 and renoise it to t-1; return the last x0."""
    max_frames = getattr(getattr(model, "config", None), "max_frames", None)
    if n_frames < 1 or (max_frames is not None and n_frames > max_frames):
        raise ValueError(f"invalid frame count {n_frames}")
    dim = model.text_dim
    cur = _text_vec(cur_text, dim)
    prev_m = None
    if prev_motion is not None:
        frames = getattr(prev_motion, "frames", prev_motion)
        prev_m = torch.as_tensor(np.asarray(frames, dtype=np.float32))[None]
    prev_t = None if prev_text is None else _text_vec(prev_text, dim)
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, n_frames, FEAT_DIM), generator=g)
    for t in range(sched.T, 0, -1):
        x0 = _predict(model, x, t, cur, prev_m, prev_t, guidance_scale)
        if t == 1:
            return _finish(model, x0, fps)
        x = renoise_step(x0, t - 1, torch.randn(x0.shape, generator=g), sched)
    raise AssertionError("unreachable")


def sample_long(prompts, model, sched: NoiseSchedule, duration_model: DurationPredictor | None,
                seed: int, guidance_scale: float | None = None, fps: float = 20.0) -> GeneratedSequence:
    """Generate one segment per prompt, each conditioned on the previous prompt and segment."""
    if not isinstance(prompts, PromptSequence):
        prompts = PromptSequence(list(prompts))
    overrides = prompts.frame_overrides or [None] * len(prompts.prompts)
    segments, seeds = [], []
    prev_clip, prev_text = None, None
    for i, (text, override) in enumerate(zip(prompts.prompts, overrides)):
        if override is None:
            if duration_model is None:
                raise ValueError(f"no duration model and no frame override for prompt {i}")
            override = predict_duration(embed_text(text, duration_model.text_dim), duration_model).frames
        s = child_seed(seed, i)
        clip = sample_segment(model, sched, text, override, s, prev_clip, prev_text, guidance_scale, fps)
        segments.append(clip)
        seeds.append(s)
        prev_clip, prev_text = clip, text
    return GeneratedSequence(segments, list(prompts.prompts), seeds, "auto", int(seed))


def sample_joint(prompt_pair, model, sched: NoiseSchedule, seed: int, n_frames: int | None = None,
                 duration_model: DurationPredictor | None = None, fps: float = 20.0) -> MotionClip:
    """One clip for the concatenated prompts with no previous context."""
    a, b = prompt_pair
    if n_frames is None:
        if duration_model is None:
            raise ValueError("need n_frames or a duration model")
        n_frames = sum(predict_duration(embed_text(p, duration_model.text_dim), duration_model).frames
                       for p in (a, b))
    if not MIN_FRAMES <= n_frames <= 2 * MAX_SEGMENT_FRAMES:
        raise ValueError(f"joint frame count {n_frames} outside [40, 400]")
    return sample_segment(model, sched, f"{a} {b}", n_frames, child_seed(seed, 0), fps=fps)


def default_window(total_frames: int, fraction: float = 0.1) -> int:
    return int(math.floor(fraction * total_frames + 0.5))


def stitch_interp(a, b, window: int | None = None) -> MotionClip:
    """Cross-fade the last ``window`` frames of a into the first ``window`` frames of b."""
    xa = np.asarray(getattr(a, "frames", a))
    xb = np.asarray(getattr(b, "frames", b))
    if window is None:
        window = default_window(len(xa) + len(xb))
    if window < 0 or window > min(len(xa), len(xb)):
        raise ValueError(f"window {window} must be in [0, min(F_a, F_b) = {min(len(xa), len(xb))}]")
    w = (np.arange(1, window + 1) / (window + 1))[:, None]
    blend = (1 - w) * xa[len(xa) - window:] + w * xb[:window]
    out = np.concatenate([xa[:len(xa) - window], blend, xb[window:]], axis=0).astype(np.result_type(xa, xb))
    return MotionClip(out, fps=getattr(a, "fps", 20.0))


def infill_window(fa: int, fb: int, fraction: float = 0.1) -> tuple[int, int]:
    """[start, stop) of the regenerated window, centred on the junction."""
    total = fa + fb
    width = default_window(total, fraction)
    if width < 1:
        raise ValueError(f"clips too short ({total} frames) for a non-empty infill window")
    start = min(max(fa - width // 2, 0), total - width)
    return start, start + width


@torch.no_grad()
def infill_stitch(a, b, model, sched: NoiseSchedule, seed: int, text: str = "",
                  fraction: float = 0.1) -> MotionClip:
    """Concatenate a and b and regenerate a window around the junction by inpainting:
    after each renoise step the frames outside the window are replaced by the inputs noised
    to the same scale. Frames outside the window are returned unchanged. ``text`` conditions
    the whole pass; an empty string uses the null text."""
    xa = np.asarray(getattr(a, "frames", a), dtype=np.float32)
    xb = np.asarray(getattr(b, "frames", b), dtype=np.float32)
    raw = np.concatenate([xa, xb], axis=0)
    start, stop = infill_window(len(xa), len(xb), fraction)
    inside = torch.zeros(1, len(raw), 1, dtype=torch.bool)
    inside[:, start:stop] = True
    known = model.normalize(torch.from_numpy(raw))[None]
    cur = _text_vec(text, model.text_dim)
    masked = torch.tensor([not text])
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn(known.shape, generator=g)
    x = torch.where(inside, x, q_sample(known, sched.T, torch.randn(known.shape, generator=g), sched))
    for t in range(sched.T, 0, -1):
        x0 = model(x, torch.tensor([t]), cur, None, None, masked)
        if t == 1:
            break
        x = renoise_step(x0, t - 1, torch.randn(x0.shape, generator=g), sched)
        x = torch.where(inside, x, q_sample(known, t - 1, torch.randn(known.shape, generator=g), sched))
    out = _finish(model, x0, getattr(a, "fps", 20.0))
    out.frames[:start] = raw[:start]
    out.frames[stop:] = raw[stop:]
    return out


def sequence_to_bytes(seq: GeneratedSequence) -> bytes:
    meta = {"mode": seq.mode, "master_seed": seq.master_seed, "prompts": seq.prompts, "seeds": seq.seeds,
            "frames": seq.frames, "fps": seq.segments[0].fps if seq.segments else 20.0, **seq.meta}
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join(clip_to_bytes(s) for s in seq.segments)
    return SEQ_MAGIC + struct.pack("<II", SEQ_VERSION, len(head)) + head + body


def sequence_from_bytes(buf: bytes, name: str = "<bytes>") -> GeneratedSequence:
    if buf[:4] != SEQ_MAGIC or len(buf) < 12:
        raise ValueError(f"{name}: not a sequence file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != SEQ_VERSION:
        raise ValueError(f"{name}: unsupported sequence version {version}")
    meta = json.loads(buf[12:12 + n].decode("utf-8"))
    pos = 12 + n
    fps = float(meta.get("fps", 20.0))
    segments = []
    for i in range(len(meta["frames"])):
        clip, used = clip_from_bytes(buf[pos:], fps=fps, name=f"{name} segment {i}")
        segments.append(clip)
        pos += used
    if pos != len(buf):
        raise ValueError(f"{name}: {len(buf) - pos} trailing bytes")
    extra = {k: v for k, v in meta.items() if k not in {"mode", "master_seed", "prompts", "seeds", "frames", "fps"}}
    return GeneratedSequence(segments, meta["prompts"], meta["seeds"], meta["mode"], meta["master_seed"], extra)


def read_sequence(path) -> GeneratedSequence:
    with open(path, "rb") as fh:
        return sequence_from_bytes(fh.read(), str(path))
