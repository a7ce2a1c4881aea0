"""Transformer x0-predictor over [ctx, time, frame_1..frame_F] tokens."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionBundle, ConditionEncoder
from .motion_repr import FEAT_DIM


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_multiplier: int = 4
    max_frames: int = 400
    text_dim: int = 64

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) != v or v <= 0:
                raise ValueError(f"{k} must be a positive integer, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


DESK = DenoiserConfig()
# 512 latent / 6 layers as published; 6 heads do not divide 512, so 8 are used.
FULL = DenoiserConfig(d_model=512, n_layers=6, n_heads=8, text_dim=512)
PRESETS = {"desk": DESK, "full": FULL}


class MotionDenoiser(nn.Module):
    """Predicts the clean clip from a noisy one. Works in a per-channel normalised feature
    space; ``normalize``/``denormalize`` convert to and from raw 263-dim features."""

    def __init__(self, config: DenoiserConfig = DESK):
        super().__init__()
        self.config = config
        d = config.d_model
        self.cond = ConditionEncoder(d, config.text_dim, config.max_frames)
        layer = nn.TransformerEncoderLayer(d, config.n_heads, d * config.ff_multiplier, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, FEAT_DIM)
        self.register_buffer("feat_mean", torch.zeros(FEAT_DIM))
        self.register_buffer("feat_std", torch.ones(FEAT_DIM))

    @property
    def text_dim(self) -> int:
        return self.config.text_dim

    def set_normalizer(self, mean, std) -> None:
        self.feat_mean.copy_(torch.as_tensor(np.asarray(mean), dtype=torch.float32))
        self.feat_std.copy_(torch.as_tensor(np.asarray(std), dtype=torch.float32))

    def normalize(self, x):
        return (x - self.feat_mean) / self.feat_std

    def denormalize(self, x):
        return x * self.feat_std + self.feat_mean

    def predict_x0(self, bundle: ConditionBundle) -> torch.Tensor:
        tokens = bundle.tokens()
        if bundle.n_frames > self.config.max_frames:
            raise ValueError(f"{bundle.n_frames} frames exceed max_frames={self.config.max_frames}")
        if tokens.shape[-1] != self.config.d_model:
            raise ValueError(f"token width {tokens.shape[-1]} != d_model {self.config.d_model}")
        pad = None
        if bundle.frame_mask is not None:
            prefix = torch.zeros(tokens.shape[0], 2, dtype=torch.bool)
            pad = torch.cat([prefix, ~bundle.frame_mask], dim=1)
        h = self.encoder(tokens, src_key_padding_mask=pad)
        return self.head(self.final_norm(h[:, 2:]))

    def forward(self, x_t, t, cur_text, prev_motion=None, prev_text=None, mask=None,
                frame_mask=None, prev_motion_mask=None) -> torch.Tensor:
        """x_t (B, F, 263) normalised; prev_motion (B, Fp, 263) raw; returns normalised x0."""
        prev = None if prev_motion is None else self.normalize(prev_motion)
        bundle = self.cond(x_t, t, cur_text, prev, prev_text, mask, frame_mask, prev_motion_mask)
        return self.predict_x0(bundle)


def init_denoiser(config: DenoiserConfig = DESK, seed: int = 0) -> MotionDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % 2**63)
        model = MotionDenoiser(config)
    return model.eval()


def predict_x0(bundle: ConditionBundle, model: MotionDenoiser) -> torch.Tensor:
    with torch.no_grad():
        return model.predict_x0(bundle)


def guided_predict_x0(bundle_cond: ConditionBundle, bundle_masked: ConditionBundle,
                      model: MotionDenoiser, scale: float) -> torch.Tensor:
    """uncond + scale * (cond - uncond)."""
    if not (torch.equal(bundle_cond.frame_tokens, bundle_masked.frame_tokens)
            and torch.equal(bundle_cond.time_token, bundle_masked.time_token)):
        raise ValueError("guided prediction needs bundles that differ only in the text mask")
    cond = predict_x0(bundle_cond, model)
    uncond = predict_x0(bundle_masked, model)
    return uncond + scale * (cond - uncond)
