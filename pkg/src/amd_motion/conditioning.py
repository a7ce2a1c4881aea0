"""Text embedding, duration prediction and assembly of the condition tokens.

The condition for one denoising call is a prefix of two tokens followed by one token per
frame::

    ctx   = proj([motion_linear(prev motion) pooled ; prev text]) + (0 if masked else text_proj(cur text))
    time  = MLP(sinusoid(t))
    frame = motion_linear(noisy frame) + sinusoid(frame index)

A missing predecessor (first segment) is replaced by learned null tokens.
"""
from __future__ import annotations

import functools
import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .motion_repr import FEAT_DIM

L_MIN = 10
L_MAX = 50
FRAMES_PER_CLASS = 4
N_DURATION_CLASSES = L_MAX - L_MIN + 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@functools.lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def embed_text(text: str, d_model: int = 64) -> np.ndarray:
    """Deterministic bag-of-hashed-tokens embedding: unit norm, zero for empty text."""
    tokens = tokenize(text)
    if not tokens:
        return np.zeros(d_model, dtype=np.float32)
    v = np.mean([_token_vector(tok, d_model) for tok in tokens], axis=0)
    return (v / np.linalg.norm(v)).astype(np.float32)


def embed_texts(texts, d_model: int = 64) -> torch.Tensor:
    return torch.from_numpy(np.stack([embed_text(t, d_model) for t in texts]))


def class_to_frames(k: int) -> int:
    """Duration class k in [L_MIN, L_MAX] -> number of frames."""
    if not L_MIN <= k <= L_MAX:
        raise ValueError(f"duration class {k} outside [{L_MIN}, {L_MAX}]")
    return FRAMES_PER_CLASS * k


def frames_to_class(frames: int) -> int:
    if frames % FRAMES_PER_CLASS or not L_MIN <= frames // FRAMES_PER_CLASS <= L_MAX:
        raise ValueError(f"frame count {frames} is not a multiple of {FRAMES_PER_CLASS} "
                         f"in [{FRAMES_PER_CLASS * L_MIN}, {FRAMES_PER_CLASS * L_MAX}]")
    return frames // FRAMES_PER_CLASS


@dataclass
class DurationDistribution:
    logits: np.ndarray  # (41,) over classes L_MIN..L_MAX

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - np.max(self.logits)
        e = np.exp(z)
        return e / e.sum()

    @property
    def argmax_class(self) -> int:
        return L_MIN + int(np.argmax(self.logits))  # first maximum wins ties

    @property
    def frames(self) -> int:
        return class_to_frames(self.argmax_class)


class DurationPredictor(nn.Module):
    """Two-layer MLP from a text embedding to duration-class logits.

    The output layer starts at zero so untrained predictions are uniform.
    """

    def __init__(self, text_dim: int = 64, hidden: int = 128):
        super().__init__()
        self.text_dim = text_dim
        self.hidden = hidden
        self.net = nn.Sequential(nn.Linear(text_dim, hidden), nn.GELU(), nn.Linear(hidden, N_DURATION_CLASSES))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb)


def predict_duration(text_emb, model: DurationPredictor) -> DurationDistribution:
    emb = torch.as_tensor(np.asarray(text_emb, dtype=np.float32))
    if emb.shape[-1] != model.text_dim:
        raise ValueError(f"embedding dim {emb.shape[-1]} does not match predictor input {model.text_dim}")
    with torch.no_grad():
        logits = model(emb.reshape(1, -1))[0]
    return DurationDistribution(logits.double().numpy())


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer sinusoid, (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.float()[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


@dataclass
class ConditionBundle:
    ctx_token: torch.Tensor  # (B, d)
    time_token: torch.Tensor  # (B, d)
    frame_tokens: torch.Tensor  # (B, F, d)
    masked: torch.Tensor  # (B,) bool
    frame_mask: torch.Tensor | None = None  # (B, F) True for real frames

    @property
    def n_frames(self) -> int:
        return int(self.frame_tokens.shape[1])

    @property
    def token_count(self) -> int:
        return 2 + self.n_frames

    def tokens(self) -> torch.Tensor:
        return torch.cat([self.ctx_token[:, None], self.time_token[:, None], self.frame_tokens], dim=1)


class ConditionEncoder(nn.Module):
    def __init__(self, d_model: int = 64, text_dim: int = 64, max_frames: int = 400):
        super().__init__()
        self.d_model = d_model
        self.text_dim = text_dim
        self.max_frames = max_frames
        self.motion_linear = nn.Linear(FEAT_DIM, d_model)
        self.text_proj = nn.Linear(text_dim, d_model, bias=False)
        self.past_proj = nn.Linear(d_model + text_dim, d_model)
        self.null_motion = nn.Parameter(torch.randn(d_model) * 0.02)
        self.null_text = nn.Parameter(torch.randn(text_dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model))
        self.register_buffer("pe", sinusoidal_embedding(torch.arange(max_frames), d_model), persistent=False)

    def past_token(self, prev_motion=None, prev_motion_mask=None, prev_text=None, batch: int = 1):
        """Fused previous-segment context, (B, d). Absent parts use the null tokens.

        ``prev_motion`` is (B, Fp, 263) in the denoiser's normalised space, ``prev_motion_mask``
        (B, Fp) marks real frames; a row with no real frames counts as absent.
        """
        null_m = self.null_motion.expand(batch, -1)
        if prev_motion is None:
            z_m = null_m
        else:
            enc = self.motion_linear(prev_motion)
            if prev_motion_mask is None:
                prev_motion_mask = torch.ones(enc.shape[:2], dtype=torch.bool)
            w = prev_motion_mask.to(enc.dtype)[..., None]
            count = w.sum(1)
            pooled = (enc * w).sum(1) / count.clamp(min=1)
            z_m = torch.where(count > 0, pooled, null_m)
        null_t = self.null_text.expand(batch, -1)
        if prev_text is None:
            z_c = null_t
        else:
            present = prev_text.abs().sum(-1, keepdim=True) > 0
            z_c = torch.where(present, prev_text, null_t)
        return self.past_proj(torch.cat([z_m, z_c], dim=-1))

    def forward(self, noisy, t, cur_text, prev_motion=None, prev_text=None, mask=None,
                frame_mask=None, prev_motion_mask=None) -> ConditionBundle:
        b, f, _ = noisy.shape
        if f > self.max_frames:
            raise ValueError(f"{f} frames exceed max_frames={self.max_frames}")
        if mask is None:
            mask = torch.zeros(b, dtype=torch.bool)
        past = self.past_token(prev_motion, prev_motion_mask, prev_text, b)
        text = self.text_proj(cur_text)
        ctx = past + torch.where(mask[:, None], torch.zeros_like(text), text)
        time = self.time_mlp(sinusoidal_embedding(torch.as_tensor(t).reshape(b), self.d_model))
        frames = self.motion_linear(noisy) + self.pe[:f]
        return ConditionBundle(ctx, time, frames, mask.clone(), frame_mask)


def _batched(x, ndim: int):
    if x is None:
        return None
    x = torch.as_tensor(np.asarray(x.frames if hasattr(x, "frames") else x, dtype=np.float32)) \
        if not isinstance(x, torch.Tensor) else x.float()
    return x[None] if x.ndim == ndim else x


def build_condition(params: ConditionEncoder, cur_text, t, noisy_motion, F: int | None = None,
                    prev_motion=None, prev_text=None, mask: bool = False) -> ConditionBundle:
    """Single-sample convenience wrapper; motions must already be in normalised space."""
    noisy = _batched(noisy_motion, 2)
    if F is not None and noisy.shape[1] != F:
        raise ValueError(f"noisy motion has {noisy.shape[1]} frames, expected F={F}")
    cur = _batched(cur_text, 1)
    prev_m = _batched(prev_motion, 2)
    prev_t = _batched(prev_text, 1)
    tt = torch.tensor([int(t)])
    return params(noisy, tt, cur, prev_m, prev_t, torch.tensor([bool(mask)]))
