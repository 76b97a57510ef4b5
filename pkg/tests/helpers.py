"""Micro configurations and random batch builders shared by the tests."""

from __future__ import annotations

import numpy as np
import torch

from ddlcxr.config import EhrConfig, PredictorConfig, UnetConfig, VaeConfig
from ddlcxr.dataset import EhrBatch

MICRO_EHR = EhrConfig(d_model=16, n_heads=2, ff_dim=32, max_len=24, aux_hidden=8)
MICRO_UNET = UnetConfig(channels=(8, 16), n_heads=2, norm_groups=4)
MICRO_VAE = VaeConfig(compression=4, latent_channels=2, channels=(4, 8), classifier_hidden=8, disc_channels=4)
MICRO_PRED = PredictorConfig(fusion_dim=16, image_widths=(4, 8), image_blocks=(1, 1), latent_heads=2,
                             latent_ff_dim=32)


def random_ehr(b: int, t: int, k: int, seed: int = 0, dtype=torch.float64, lengths=None) -> EhrBatch:
    g = np.random.default_rng(seed)
    values = g.normal(size=(b, t, k))
    mask = (g.random((b, t, k)) < 0.7).astype(float)
    values = values * mask
    hours = np.sort(g.choice(np.arange(1, 200), size=(b, t)), axis=1).astype(float)
    if lengths is None:
        lengths = [t] * b
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    values[~valid] = 0
    mask[~valid] = 0
    hours[~valid] = 0
    return EhrBatch(torch.as_tensor(values, dtype=dtype), torch.as_tensor(mask, dtype=dtype),
                    torch.as_tensor(hours, dtype=dtype), torch.as_tensor(valid))


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
