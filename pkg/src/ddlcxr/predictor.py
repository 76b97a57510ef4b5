"""Prediction-stage fusion model.

Three branches each produce one token in a shared fusion space: a residual
CNN on the last image, a Transformer over the 48-hour EHR, and a Transformer
over the generated latent's spatial tokens. One self-attention layer mixes
the tokens, a masked mean pools them, and a linear head gives task logits.
Any branch can be dropped; a dropped branch is masked out of attention and
pooling, which is exactly the same as building the model without it.
"""

from __future__ import annotations

import copy
import logging
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EhrConfig, PredictorConfig
from .dataset import EhrBatch, EhrNormalizer, PredictionSample, collate_series, stack_labels, stack_pixels
from .ehr_encoder import EhrEncoder
from .errors import DataError, NumericalError
from .layers import TransformerLayer, group_norm, sinusoidal_embedding
from .metrics import auprc

log = logging.getLogger(__name__)

BRANCHES = ("image", "ehr", "latent")
VARIANTS: Dict[str, FrozenSet[str]] = {
    "full": frozenset(BRANCHES),
    "last-cxr": frozenset({"image", "ehr"}),
    "last-cxr-no-ehr": frozenset({"image"}),
    "full-no-ehr": frozenset({"image", "latent"}),
}


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = group_norm(out_ch, 8)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = group_norm(out_ch, 8)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), group_norm(out_ch, 8))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + (x if self.down is None else self.down(x)))


class ResNetEncoder(nn.Module):
    """ResNet-34 layout ((3, 4, 6, 3) basic blocks) with configurable widths."""

    def __init__(self, widths: Sequence[int], blocks: Sequence[int], out_dim: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(1, widths[0], 3, stride=2, padding=1, bias=False),
                                  group_norm(widths[0], 8), nn.ReLU())
        layers: List[nn.Module] = []
        prev = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            for j in range(n):
                layers.append(BasicBlock(prev, w, stride=2 if (j == 0 and i > 0) else 1))
                prev = w
        self.layers = nn.Sequential(*layers)
        self.proj = nn.Linear(prev, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.layers(self.stem(x))
        return self.proj(h.mean(dim=(2, 3)))


class LatentEncoder(nn.Module):
    """One-layer Transformer over the ``h * w`` spatial tokens of a latent, with a class token."""

    def __init__(self, latent_channels: int, d_model: int = 128, n_heads: int = 8, ff_dim: int = 512):
        super().__init__()
        self.d_model = d_model
        self.embed = nn.Linear(latent_channels, d_model)
        self.cls_token = nn.Parameter(0.02 * torch.randn(d_model))
        self.layer = TransformerLayer(d_model, n_heads, ff_dim)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b = z.shape[0]
        tokens = z.flatten(2).transpose(1, 2).to(self.embed.weight.dtype)
        pos = sinusoidal_embedding(torch.arange(tokens.shape[1], dtype=tokens.dtype), self.d_model)
        h = torch.cat([self.cls_token.expand(b, 1, -1), self.embed(tokens) + pos], dim=1)
        return self.norm(self.layer(h))[:, 0]


class Predictor(nn.Module):
    def __init__(self, ehr_inputs: int, latent_channels: int, n_tasks: int,
                 config: Optional[PredictorConfig] = None, ehr_config: Optional[EhrConfig] = None,
                 branches: Iterable[str] = BRANCHES):
        super().__init__()
        config = config or PredictorConfig()
        ehr_config = ehr_config or EhrConfig()
        self.config = config
        self.branches = tuple(b for b in BRANCHES if b in set(branches))
        if not self.branches:
            raise ValueError("predictor needs at least one branch")
        fd = config.fusion_dim
        self.encoders = nn.ModuleDict()
        self.projections = nn.ModuleDict()
        if "image" in self.branches:
            self.encoders["image"] = ResNetEncoder(config.image_widths, config.image_blocks, fd)
        if "ehr" in self.branches:
            self.encoders["ehr"] = EhrEncoder(ehr_inputs, 1, ehr_config)
            self.projections["ehr"] = nn.Linear(ehr_config.d_model, fd)
        if "latent" in self.branches:
            self.encoders["latent"] = LatentEncoder(latent_channels, ehr_config.d_model,
                                                    config.latent_heads, config.latent_ff_dim)
            self.projections["latent"] = nn.Linear(ehr_config.d_model, fd)
        self.modality = nn.ParameterDict({b: nn.Parameter(0.02 * torch.randn(fd)) for b in self.branches})
        self.fusion = TransformerLayer(fd, 8, 4 * fd)
        self.fusion_norm = nn.LayerNorm(fd)
        self.head = nn.Linear(fd, n_tasks)

    def forward(self, pixels: Optional[torch.Tensor], ehr: Optional[EhrBatch], latent: Optional[torch.Tensor],
                drop: Iterable[str] = ()) -> torch.Tensor:
        drop = set(drop)
        inputs = {"image": pixels, "ehr": ehr, "latent": latent}
        tokens, valid = [], []
        b = None
        for name in self.branches:
            x = inputs[name]
            if x is None:
                if name not in drop:
                    raise DataError(f"missing input for the {name} branch")
                continue
            if name == "image":
                h = self.encoders["image"](x.to(self.head.weight.dtype))
            elif name == "ehr":
                h = self.projections["ehr"](self.encoders["ehr"](x).cls)
            else:
                h = self.projections["latent"](self.encoders["latent"](x))
            b = h.shape[0]
            tokens.append(h + self.modality[name])
            valid.append(torch.full((b,), name not in drop, dtype=torch.bool))
        if not tokens:
            raise DataError("no branch inputs given")
        t = torch.stack(tokens, dim=1)
        v = torch.stack(valid, dim=1)
        if not v.any(dim=1).all():
            raise DataError("every branch is dropped")
        t = self.fusion_norm(self.fusion(t, v))
        w = v.to(t.dtype)[..., None]
        pooled = (t * w).sum(1) / w.sum(1)
        return self.head(pooled)


def predict(model: Predictor, sample: PredictionSample, gen_latent: Optional[torch.Tensor],
            normalizer: Optional[EhrNormalizer] = None, drop: Iterable[str] = ()) -> torch.Tensor:
    """Task probabilities for one sample, shape ``(L',)``."""
    ehr = collate_series([sample.ehr_48h], model.encoders["ehr"].config.max_len, normalizer) \
        if "ehr" in model.branches else None
    lat = None
    if gen_latent is not None:
        lat = torch.as_tensor(gen_latent)
        lat = lat[None] if lat.ndim == 3 else lat
    with torch.no_grad():
        logits = model(stack_pixels([sample.last_image]), ehr, lat, drop)
    return torch.sigmoid(logits)[0]


def task_loss(probs: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Binary cross-entropy summed (default) or averaged over samples and classes."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise DataError(f"probability shape {tuple(probs.shape)} does not match labels {tuple(labels.shape)}")
    eps = torch.finfo(probs.dtype).tiny
    ce = -(labels * torch.log(probs.clamp_min(eps)) + (1 - labels) * torch.log((1 - probs).clamp_min(eps)))
    return ce.sum() if reduction == "sum" else ce.mean()


def task_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction=reduction)


class PredictionData:
    """Pre-collated tensors for a list of prediction samples."""

    def __init__(self, samples: Sequence[PredictionSample], max_len: int, normalizer: Optional[EhrNormalizer]):
        self.samples = list(samples)
        self.pixels = stack_pixels([s.last_image for s in samples])
        self.ehr = collate_series([s.ehr_48h for s in samples], max_len, normalizer)
        self.labels = stack_labels([s.task_labels for s in samples])
        self.gaps = np.array([s.gap_delta for s in samples])

    def __len__(self) -> int:
        return len(self.samples)


def _forward(model: Predictor, data: PredictionData, idx, latents: Optional[torch.Tensor]) -> torch.Tensor:
    lat = latents[idx] if (latents is not None and "latent" in model.branches) else None
    ehr = data.ehr.select(idx) if "ehr" in model.branches else None
    return model(data.pixels[idx], ehr, lat)


@torch.no_grad()
def predict_batch(model: Predictor, data: PredictionData, latents: Optional[torch.Tensor],
                  batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        idx = torch.arange(i, min(i + batch_size, len(data)))
        out.append(torch.sigmoid(_forward(model, data, idx, latents)))
    return torch.cat(out).numpy().astype(np.float64)


LatentProvider = Callable[[int], torch.Tensor]


def train_predictor(train: PredictionData, val: PredictionData, config: PredictorConfig, ehr_config: EhrConfig,
                    branches: Iterable[str], train_latents: Optional[LatentProvider],
                    val_latents: Optional[torch.Tensor], latent_channels: int, seed: int = 0,
                    history: Optional[list] = None, init_ehr: Optional[dict] = None) -> Predictor:
    """Train with AdamW; keep the epoch with the best validation AUPRC.

    ``train_latents(epoch)`` returns the generated latents to use in that
    epoch, aligned with ``train.samples``.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train_predictor needs non-empty training and validation samples")
    torch.manual_seed(seed)
    n_inputs = train.ehr.values.shape[-1]
    model = Predictor(n_inputs, latent_channels, train.labels.shape[1], config, ehr_config, branches)
    if init_ehr is not None and "ehr" in model.branches:
        own = model.encoders["ehr"].state_dict()
        model.encoders["ehr"].load_state_dict({k: v for k, v in init_ehr.items() if not k.startswith("aux_head")}
                                              | {k: v for k, v in own.items() if k.startswith("aux_head")})
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    history = history if history is not None else []
    best_state, best_score = None, -float("inf")
    y_val = val.labels.numpy().astype(bool)
    for epoch in range(1, config.epochs + 1):
        model.train()
        lat = train_latents(epoch) if (train_latents is not None and "latent" in model.branches) else None
        order = torch.as_tensor(rng.permutation(len(train)))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = _forward(model, train, idx, lat)
            loss = task_loss_from_logits(logits, train.labels[idx], config.loss_reduction)
            if not torch.isfinite(loss):
                raise NumericalError(f"predictor loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        scores = predict_batch(model, val, val_latents)
        try:
            score = auprc(scores[:, 0] if scores.shape[1] == 1 else scores,
                          y_val[:, 0] if y_val.shape[1] == 1 else y_val)
        except DataError:
            score = -float(task_loss(torch.as_tensor(scores), val.labels.double()))
        history.append({"epoch": epoch, "train_loss": total, "val_auprc": score})
        log.info("predictor epoch %d: loss=%.4f val_auprc=%.4f", epoch, total, score)
        if score > best_score:
            best_score, best_state = score, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model
