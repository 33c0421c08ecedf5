"""Latent DDPM: noise schedules, forward kernel and marginal, reverse step, sampler.

Timesteps are 1-indexed: z_0 is clean, z_T is (almost) pure noise. Every op
accepts numpy arrays or torch tensors; ``t`` may be an int or a per-sample
integer array/tensor whose length matches the leading (batch) dimension.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import NonFiniteError, ValidationError


@dataclass
class DiffusionConfig:
    T: int = 50
    schedule: str = "linear"
    beta_start: float = 1e-4
    # 0.2 over 50 steps drives alpha_bar_T to ~5e-3; use 0.02 with T=1000
    beta_end: float = 0.2
    prediction: str = "epsilon"

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError("T must be >= 1")
        if self.schedule != "linear":
            raise ValidationError(f"unsupported schedule {self.schedule!r}")
        if self.prediction != "epsilon":
            raise ValidationError(f"unsupported prediction target {self.prediction!r}")
        if not (0 < self.beta_start < 1 and 0 < self.beta_end < 1):
            raise ValidationError("betas must lie in (0, 1)")
        if self.T > 1 and not self.beta_start < self.beta_end:
            raise ValidationError("beta_start must be < beta_end")
        if self.T == 1 and self.beta_start > self.beta_end:
            raise ValidationError("beta_start must be <= beta_end")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValidationError("betas must be a non-empty 1D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValidationError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))


def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    return NoiseSchedule.from_betas(np.linspace(cfg.beta_start, cfg.beta_end, cfg.T))


def dump_schedule_csv(schedule: NoiseSchedule, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "beta", "alpha", "alpha_bar"])
        for i in range(schedule.T):
            w.writerow([i + 1] + [repr(float(a[i])) for a in (schedule.betas, schedule.alphas, schedule.alpha_bars)])


def _check_t(t, schedule: NoiseSchedule):
    tt = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > schedule.T:
        raise ValidationError(f"timestep out of range [1, {schedule.T}]: {t}")
    return tt.astype(np.int64)


def _coef(values: np.ndarray, like):
    """Broadcast a per-sample coefficient against ``like``'s trailing dims."""
    if np.ndim(values) == 0:
        return float(values)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if torch.is_tensor(like):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device).reshape(shape)
    return np.asarray(values).reshape(shape)


def _sqrt(x):
    return np.sqrt(x)


def forward_step(z_prev, t, eps, schedule: NoiseSchedule):
    """One Markov step: z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps."""
    idx = _check_t(t, schedule) - 1
    beta = schedule.betas[idx]
    return _coef(_sqrt(1.0 - beta), z_prev) * z_prev + _coef(_sqrt(beta), eps) * eps


def forward_sample(z0, t, eps, schedule: NoiseSchedule):
    """Closed-form marginal q(z_t | z_0)."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValidationError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    idx = _check_t(t, schedule) - 1
    ab = schedule.alpha_bars[idx]
    return _coef(_sqrt(ab), z0) * z0 + _coef(_sqrt(1.0 - ab), eps) * eps


def reverse_step(z_t, eps_hat, t, schedule: NoiseSchedule, noise=None):
    """Ancestral step with fixed variance beta_t; noise is dropped at t = 1."""
    if tuple(z_t.shape) != tuple(eps_hat.shape):
        raise ValidationError(f"eps_hat shape {tuple(eps_hat.shape)} != z_t shape {tuple(z_t.shape)}")
    tt = _check_t(t, schedule)
    idx = tt - 1
    beta, alpha, ab = schedule.betas[idx], schedule.alphas[idx], schedule.alpha_bars[idx]
    mean = _coef(1.0 / _sqrt(alpha), z_t) * (z_t - _coef(beta / _sqrt(1.0 - ab), z_t) * eps_hat)
    if noise is None:
        return mean
    scale = np.where(tt > 1, _sqrt(beta), 0.0)
    return mean + _coef(scale, z_t) * noise


def train_target(z0, t, eps, schedule: NoiseSchedule):
    return forward_sample(z0, t, eps, schedule), eps


def sample_loop(
    denoise_fn: Callable,
    cond,
    latent_shape,
    schedule: NoiseSchedule,
    seed: int,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from z_T ~ N(0, I) down to z_0.

    ``denoise_fn(z_t, t, cond)`` must return an eps estimate shaped like z_t.
    """
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(latent_shape), generator=gen, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        eps_hat = denoise_fn(z, t, cond)
        if not torch.is_tensor(eps_hat) or tuple(eps_hat.shape) != tuple(z.shape):
            got = tuple(eps_hat.shape) if hasattr(eps_hat, "shape") else type(eps_hat).__name__
            raise ValidationError(f"denoise_fn returned {got} at t={t}, expected {tuple(z.shape)}")
        if not torch.isfinite(eps_hat).all():
            raise NonFiniteError(f"denoise_fn returned non-finite values at t={t}")
        noise = torch.randn(z.shape, generator=gen, dtype=dtype) if t > 1 else None
        z = reverse_step(z, eps_hat.to(dtype), t, schedule, noise)
    return z
