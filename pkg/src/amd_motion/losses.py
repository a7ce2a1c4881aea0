"""Geometric training losses on predicted vs ground-truth clean clips (raw feature units)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .motion_repr import CONTACT, DEFAULT_SKELETON, JOINT_VEL, N_JOINTS, RIC, ROT6D, SkeletonSpec

VELOCITY_CHANNELS = np.r_[0:3, JOINT_VEL.start:JOINT_VEL.stop]


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 1.0
    lambda_p: float = 1.0
    lambda_r: float = 1.0
    lambda_v: float = 1.0
    lambda_f: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    height: object
    position: object
    rotation: object
    velocity: object
    foot_slide: object
    total: object

    def as_floats(self) -> dict:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def recover_positions_torch(x: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of motion_repr.recover_positions: (..., F, 263) -> (..., F, 22, 3)."""
    yaw = x[..., 0]
    heading = torch.cumsum(yaw, dim=-1) - yaw
    c, s = torch.cos(heading), torch.sin(heading)
    vx, vz = x[..., 1], x[..., 2]
    step_x = c * vx + s * vz
    step_z = -s * vx + c * vz
    root_x = torch.cumsum(step_x, dim=-1) - step_x
    root_z = torch.cumsum(step_z, dim=-1) - step_z
    rel = x[..., RIC].reshape(*x.shape[:-1], N_JOINTS - 1, 3)
    c, s = c[..., None], s[..., None]
    wx = c * rel[..., 0] + s * rel[..., 2] + root_x[..., None]
    wy = rel[..., 1]
    wz = -s * rel[..., 0] + c * rel[..., 2] + root_z[..., None]
    joints = torch.stack([wx, wy, wz], dim=-1)
    root = torch.stack([root_x, x[..., 3], root_z], dim=-1)
    return torch.cat([root[..., None, :], joints], dim=-2)


def loss_terms(pred: torch.Tensor, gt: torch.Tensor, frame_mask: torch.Tensor | None = None,
               skeleton: SkeletonSpec = DEFAULT_SKELETON) -> dict[str, torch.Tensor]:
    """Per-sample loss terms for batched (B, F, 263) clips; padded frames are ignored.

    foot_slide = contact-masked squared foot displacement of the prediction plus the
    squared error of the contact-label channels.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    b, f, _ = pred.shape
    if frame_mask is None:
        frame_mask = torch.ones(b, f, dtype=torch.bool)
    m = frame_mask.to(pred.dtype)
    n = m.sum(1).clamp(min=1)
    diff2 = (pred - gt) ** 2

    def channel_mse(channels, width):
        return (diff2[..., channels].sum(-1) * m).sum(1) / (n * width)

    height = channel_mse(slice(3, 4), 1)
    rotation = channel_mse(ROT6D, ROT6D.stop - ROT6D.start)
    velocity = channel_mse(torch.as_tensor(VELOCITY_CHANNELS), len(VELOCITY_CHANNELS))

    pp = recover_positions_torch(pred)
    pg = recover_positions_torch(gt)
    position = (((pp - pg) ** 2).sum((-1, -2)) * m).sum(1) / (n * N_JOINTS * 3)

    feet = list(skeleton.foot_joints)
    step = pp[:, 1:, feet] - pp[:, :-1, feet]
    pair = m[:, 1:] * m[:, :-1]
    contact = gt[:, :-1, CONTACT]
    slide = ((step ** 2).sum(-1) * contact).sum(-1)
    n_pairs = pair.sum(1)
    slide = (slide * pair).sum(1) / (4 * n_pairs).clamp(min=1)
    label = channel_mse(CONTACT, 4)
    return {"height": height, "position": position, "rotation": rotation,
            "velocity": velocity, "foot_slide": slide + label}


def weighted_total(terms: dict, weights: LossWeights):
    return (weights.lambda_h * terms["height"] + weights.lambda_p * terms["position"]
            + weights.lambda_r * terms["rotation"] + weights.lambda_v * terms["velocity"]
            + weights.lambda_f * terms["foot_slide"])


def batch_loss(pred, gt, weights: LossWeights, frame_mask=None, skeleton=DEFAULT_SKELETON) -> LossBreakdown:
    """Batch-mean breakdown with differentiable torch scalars."""
    terms = {k: v.mean() for k, v in loss_terms(pred, gt, frame_mask, skeleton).items()}
    return LossBreakdown(**terms, total=weighted_total(terms, weights))


def geometric_losses(pred, gt, skeleton: SkeletonSpec = DEFAULT_SKELETON,
                     weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Losses for one (F, 263) pair. Torch inputs keep the graph; arrays give floats."""
    as_float = not isinstance(pred, torch.Tensor)
    p = torch.as_tensor(np.asarray(getattr(pred, "frames", pred), dtype=np.float64)) if as_float else pred
    g = torch.as_tensor(np.asarray(getattr(gt, "frames", gt), dtype=np.float64)) if as_float else gt
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    out = batch_loss(p[None], g[None].to(p.dtype), weights, None, skeleton)
    if as_float:
        return LossBreakdown(**out.as_floats())
    return out
