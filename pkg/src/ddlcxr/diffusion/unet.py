"""Conditional UNet noise predictor.

The noisy target latent and the reference latent are concatenated along
channels. Every resolution level is a residual block followed by a spatial
transformer whose cross-attention reads the EHR token sequence. Samples
whose context has no valid token attend to a learned null token instead.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ..config import UnetConfig
from ..errors import DataError
from ..layers import Downsample, FeedForward, MultiHeadAttention, ResBlock, Upsample, group_norm, sinusoidal_embedding


class SpatialTransformer(nn.Module):
    def __init__(self, ch: int, context_dim: int, n_heads: int, groups: int):
        super().__init__()
        self.norm = group_norm(ch, groups)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.norm1 = nn.LayerNorm(ch)
        self.self_attn = MultiHeadAttention(ch, n_heads=n_heads)
        self.norm2 = nn.LayerNorm(ch)
        self.cross_attn = MultiHeadAttention(ch, context_dim, n_heads=n_heads)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = FeedForward(ch, 4 * ch)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor, context: torch.Tensor, context_valid: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)  # (B, h*w, C) queries
        t = t + self.self_attn(self.norm1(t))
        t = t + self.cross_attn(self.norm2(t), context, context_valid)
        t = t + self.ff(self.norm3(t))
        return x + self.proj_out(t.transpose(1, 2).reshape(b, c, h, w))


class ConditionalUNet(nn.Module):
    def __init__(self, latent_channels: int = 4, context_dim: int = 128, config: Optional[UnetConfig] = None):
        super().__init__()
        config = config or UnetConfig()
        self.config = config
        self.latent_channels = latent_channels
        self.context_dim = context_dim
        chs: Sequence[int] = config.channels
        g, heads = config.norm_groups, config.n_heads
        tdim = 4 * chs[0]
        self.time_embed = nn.Sequential(nn.Linear(chs[0], tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(2 * latent_channels, chs[0], 3, padding=1)
        self.null_token = nn.Parameter(0.02 * torch.randn(context_dim))

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, c in enumerate(chs):
            self.down_res.append(ResBlock(prev, c, g, tdim))
            self.down_attn.append(SpatialTransformer(c, context_dim, heads, g))
            self.downsample.append(Downsample(c) if i < len(chs) - 1 else nn.Identity())
            prev = c
        self.mid_res1 = ResBlock(prev, prev, g, tdim)
        self.mid_attn = SpatialTransformer(prev, context_dim, heads, g)
        self.mid_res2 = ResBlock(prev, prev, g, tdim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chs))):
            c = chs[i]
            self.up_res.append(ResBlock(prev + c, c, g, tdim))
            self.up_attn.append(SpatialTransformer(c, context_dim, heads, g))
            self.upsample.append(Upsample(c) if i > 0 else nn.Identity())
            prev = c
        self.norm_out = group_norm(prev, g)
        self.conv_out = nn.Conv2d(prev, latent_channels, 3, padding=1)

    def _resolve_context(self, context: Optional[torch.Tensor], valid: Optional[torch.Tensor],
                         batch: int, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
        null = self.null_token.to(dtype)
        if context is None or context.shape[1] == 0:
            return null.expand(batch, 1, -1), torch.ones(batch, 1, dtype=torch.bool)
        if context.shape[0] != batch or context.shape[2] != self.context_dim:
            raise DataError(f"context shape {tuple(context.shape)} incompatible with batch {batch} "
                            f"and context dim {self.context_dim}")
        if valid is None:
            valid = torch.ones(context.shape[:2], dtype=torch.bool)
        empty = ~valid.any(dim=1)
        if empty.any():
            # an all-padding context is equivalent to a context of only the null token
            sel = empty[:, None, None] & (torch.arange(context.shape[1]) == 0)[None, :, None]
            context = torch.where(sel, null.view(1, 1, -1), context)
            valid = valid | (empty[:, None] & (torch.arange(valid.shape[1]) == 0)[None, :])
        return context.to(dtype), valid

    def forward(self, z_noisy: torch.Tensor, z_ref: torch.Tensor, n: torch.Tensor,
                context: Optional[torch.Tensor] = None, context_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        if z_noisy.shape != z_ref.shape or z_noisy.shape[1] != self.latent_channels:
            raise DataError(f"latent shapes {tuple(z_noisy.shape)} / {tuple(z_ref.shape)} do not match "
                            f"{self.latent_channels} channels")
        dtype = self.conv_in.weight.dtype
        b = z_noisy.shape[0]
        ctx, valid = self._resolve_context(context, context_valid, b, dtype)
        n = torch.as_tensor(n).reshape(-1).expand(b) if torch.as_tensor(n).numel() == 1 else torch.as_tensor(n)
        temb = self.time_embed(sinusoidal_embedding(n.to(dtype), self.config.channels[0]))
        h = self.conv_in(torch.cat([z_noisy, z_ref], dim=1).to(dtype))
        skips: List[torch.Tensor] = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = attn(res(h, temb), ctx, valid)
            skips.append(h)
            h = down(h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), ctx, valid), temb)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsample):
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb), ctx, valid)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))
