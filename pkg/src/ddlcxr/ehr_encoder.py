"""Masked-attention Transformer over irregular EHR series.

Each observed row is embedded from its values concatenated with its mask,
plus a fixed sinusoidal encoding of the row's absolute hour, so irregular
gaps remain visible to attention. A learned class token is prepended; its
output feeds the auxiliary abnormality head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import EhrConfig
from .dataset import EhrBatch, EhrSeries, collate_series
from .errors import DataError
from .layers import TransformerLayer, sinusoidal_embedding


@dataclass
class EhrEncoding:
    tokens: torch.Tensor  # (B, 1 + T, d), class token first
    valid: torch.Tensor  # (B, 1 + T) bool

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, 0]

    def with_tokens(self, tokens: torch.Tensor) -> "EhrEncoding":
        return EhrEncoding(tokens, self.valid)


class EhrEncoder(nn.Module):
    def __init__(self, n_inputs: int, n_labels: int, config: Optional[EhrConfig] = None):
        super().__init__()
        config = config or EhrConfig()
        if config.d_model % config.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.config = config
        self.n_inputs = n_inputs
        self.embed = nn.Linear(2 * n_inputs, config.d_model)
        self.cls_token = nn.Parameter(0.02 * torch.randn(config.d_model))
        self.layer = TransformerLayer(config.d_model, config.n_heads, config.ff_dim)
        self.norm = nn.LayerNorm(config.d_model)
        self.aux_head = nn.Sequential(
            nn.Linear(config.d_model, config.aux_hidden), nn.GELU(), nn.Linear(config.aux_hidden, n_labels)
        )

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def forward(self, batch: EhrBatch) -> EhrEncoding:
        b, t, k = batch.values.shape
        if t > self.config.max_len:
            raise DataError(f"EHR length {t} exceeds the encoder's max length {self.config.max_len}")
        if k != self.n_inputs:
            raise DataError(f"EHR batch has {k} channels, encoder expects {self.n_inputs}")
        dtype = self.embed.weight.dtype
        x = torch.cat([batch.values, batch.mask], dim=-1).to(dtype)
        h = self.embed(x) + sinusoidal_embedding(batch.hours.to(dtype), self.d_model)
        cls = self.cls_token.expand(b, 1, -1)
        tokens = torch.cat([cls, h], dim=1)
        valid = torch.cat([torch.ones(b, 1, dtype=torch.bool), batch.valid], dim=1)
        tokens = self.norm(self.layer(tokens, valid))
        return EhrEncoding(tokens, valid)

    def aux_logits(self, encoding: EhrEncoding) -> torch.Tensor:
        return self.aux_head(encoding.cls)


def encode_ehr(encoder: EhrEncoder, series: EhrSeries, include_static: bool = True) -> EhrEncoding:
    """Encode a single (already normalized) series; tokens are ``(1, 1 + T, d)``."""
    if len(series) > encoder.config.max_len:
        raise DataError(f"series length {len(series)} exceeds max length {encoder.config.max_len}; truncate first")
    batch = collate_series([series], encoder.config.max_len, include_static=include_static,
                           dtype=encoder.embed.weight.dtype)
    return encoder(batch)


def aux_predict(encoder: EhrEncoder, encoding: EhrEncoding) -> torch.Tensor:
    """Abnormality probabilities from the class token."""
    return torch.sigmoid(encoder.aux_logits(encoding))


def aux_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over samples and labels."""
    probs = torch.as_tensor(probs)
    targets = torch.as_tensor(targets, dtype=probs.dtype)
    if probs.shape != targets.shape:
        raise DataError(f"probability shape {tuple(probs.shape)} does not match targets {tuple(targets.shape)}")
    if ((probs <= 0) | (probs >= 1)).any():
        raise DataError("probabilities must lie strictly inside (0, 1)")
    return -(targets * torch.log(probs) + (1 - targets) * torch.log1p(-probs)).mean()


def aux_loss_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Same quantity as ``aux_loss(sigmoid(logits), targets)``, computed stably."""
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))
