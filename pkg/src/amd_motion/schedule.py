"""Linear-beta noise schedule and closed-form Gaussian transitions.

Timesteps are 1-indexed: ``t = 1..T`` are noise scales, ``t = 0`` is the clean signal.
Functions accept numpy arrays or torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # beta[t-1] is beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check_t(self, t, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        arr = np.asarray(t.cpu() if hasattr(t, "cpu") else t)
        if arr.size and (arr.min() < lo or arr.max() > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {arr.min()}..{arr.max()}")

    def sqrt_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[np.asarray(t) - 1])

    def sqrt_one_minus_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t) - 1])


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
        beta[-1] = beta_end
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def alpha_bar_logspace(sched: NoiseSchedule) -> np.ndarray:
    """Cumulative product recomputed as exp(sum(log(1 - beta)))."""
    return np.exp(np.cumsum(np.log1p(-sched.beta)))


def _coef(values, x):
    """Broadcast per-sample coefficients against x's trailing dims."""
    if np.ndim(values) == 0:
        return float(values)
    shape = (-1,) + (1,) * (x.ndim - 1)
    if hasattr(x, "new_tensor"):
        return x.new_tensor(np.asarray(values)).reshape(shape)
    return np.asarray(values).reshape(shape)


def q_sample(x0, t, noise, sched: NoiseSchedule):
    """Marginal q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` is an int or a per-sample array over the leading axis of ``x0``.
    """
    if tuple(x0.shape) != tuple(noise.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match x0 shape {tuple(x0.shape)}")
    sched.check_t(t)
    t = t.cpu().numpy() if hasattr(t, "cpu") else t
    return _coef(sched.sqrt_alpha_bar(t), x0) * x0 + _coef(sched.sqrt_one_minus_alpha_bar(t), x0) * noise


def q_step(x_prev, t: int, noise, sched: NoiseSchedule):
    """One forward kernel q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    sched.check_t(t)
    b = float(sched.beta[t - 1])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def renoise_step(x0_hat, s: int, noise, sched: NoiseSchedule):
    """Reverse-process renoising: bring a clean estimate to noise scale ``s`` (identity at 0)."""
    sched.check_t(s, allow_zero=True)
    if s == 0:
        return x0_hat
    return q_sample(x0_hat, s, noise, sched)
