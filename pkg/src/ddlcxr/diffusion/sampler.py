"""DDIM sampling on a sub-sampled step grid."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from ..errors import ConfigError, NumericalError
from ..ehr_encoder import EhrEncoding
from .objective import LdmModel
from .schedule import DiffusionSchedule

EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def ddim_timesteps(n_steps: int, sample_steps: int) -> np.ndarray:
    """Increasing grid of ``sample_steps`` distinct steps in ``1..n_steps`` ending at ``n_steps``."""
    if not 1 <= sample_steps <= n_steps:
        raise ConfigError(f"sample steps must lie in [1, {n_steps}], got {sample_steps}")
    grid = np.floor(np.arange(1, sample_steps + 1) * n_steps / sample_steps).astype(np.int64)
    return grid


def ddim_loop(eps_fn: EpsFn, schedule: DiffusionSchedule, x: torch.Tensor, steps: int,
              eta: float = 0.0, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Run the reverse process from ``x = Z^(N)``.

    Each update is ``sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps_hat
    + sigma * noise`` with ``x0_hat = (x - sqrt(1 - abar) * eps_hat) / sqrt(abar)``
    and ``sigma = eta * sqrt((1 - abar_prev) / (1 - abar) * (1 - abar / abar_prev))``.
    """
    grid = ddim_timesteps(schedule.n_steps, steps)
    prev_grid = np.r_[0, grid[:-1]]
    b = x.shape[0]
    for i in reversed(range(len(grid))):
        n, p = int(grid[i]), int(prev_grid[i])
        abar = float(schedule.alpha_bar(n))
        abar_prev = float(schedule.alpha_bar(p))
        eps_hat = eps_fn(x, torch.full((b,), n, dtype=torch.long))
        x0_hat = (x - (1.0 - abar) ** 0.5 * eps_hat) / abar ** 0.5
        sigma = eta * ((1.0 - abar_prev) / (1.0 - abar) * (1.0 - abar / abar_prev)) ** 0.5
        dir_coef = max(1.0 - abar_prev - sigma ** 2, 0.0) ** 0.5
        x = abar_prev ** 0.5 * x0_hat + dir_coef * eps_hat
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite latent during DDIM sampling at step {n}")
    return x


@torch.no_grad()
def ddim_sample(model: LdmModel, schedule: DiffusionSchedule, z_ref: torch.Tensor,
                context: Optional[EhrEncoding], steps: int = 200, seed: int = 0, eta: float = 0.0,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Generate target latents conditioned on reference latents and an EHR encoding.

    The start point ``Z^(N)`` is drawn first from the seeded generator, then
    any per-step noise when ``eta > 0``.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    x = torch.randn(z_ref.shape, generator=generator, dtype=z_ref.dtype)

    def eps_fn(x_n: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        return model.predict_noise(x_n, z_ref, n, context)

    return ddim_loop(eps_fn, schedule, x, steps, eta, generator)
