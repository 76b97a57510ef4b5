"""Variance schedules and the closed-form forward process.

Steps are 1-indexed as ``n = 1..N``; ``n = 0`` denotes the clean latent with
``alpha_bar_0 = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError, DataError


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # (N,)
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, n) -> torch.Tensor:
        """``alpha_bar_n`` for integer tensor/array ``n`` in ``0..N`` (float64)."""
        table = torch.as_tensor(np.r_[1.0, self.alpha_bars], dtype=torch.float64)
        return table[torch.as_tensor(n, dtype=torch.long)]

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}


def schedule_from_betas(betas) -> DiffusionSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ConfigError("a schedule needs at least one step")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ConfigError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.r_[1.0, alpha_bars[:-1]]
    posterior = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return DiffusionSchedule(betas, alphas, alpha_bars, posterior)


def make_schedule(kind: str = "linear", n_steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> DiffusionSchedule:
    """Linear or cosine beta spacing over ``n_steps`` steps."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, n_steps)
    elif kind == "cosine":
        s = 0.008
        t = np.arange(n_steps + 1) / n_steps
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(betas)


def forward_diffuse(schedule: DiffusionSchedule, z0: torch.Tensor, n, noise: torch.Tensor) -> torch.Tensor:
    """``sqrt(abar_n) * z0 + sqrt(1 - abar_n) * noise``; ``n`` is a scalar or one step per batch row."""
    if noise.shape != z0.shape:
        raise DataError(f"noise shape {tuple(noise.shape)} does not match latent {tuple(z0.shape)}")
    n = torch.as_tensor(n, dtype=torch.long)
    if (n < 0).any() or (n > schedule.n_steps).any():
        raise DataError(f"step index outside 0..{schedule.n_steps}")
    abar = schedule.alpha_bar(n).to(z0.dtype)
    if abar.ndim == 1:
        abar = abar.view(-1, *([1] * (z0.ndim - 1)))
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise
