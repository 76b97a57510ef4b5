"""KL-regularized image autoencoder with an abnormality classifier on the latent mean.

Training combines an L1 pixel loss, a lightly weighted KL term toward a
standard normal, a hinge-GAN adversarial term from a patch discriminator
(after a warm-up), a classifier cross-entropy and an optional perceptual
loss computed with a fixed random convolutional feature extractor.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import VaeConfig
from .dataset import ImageSample, stack_labels, stack_pixels
from .errors import DataError, NumericalError
from .layers import Downsample, ResBlock, Upsample, group_norm

log = logging.getLogger(__name__)


class Encoder(nn.Module):
    def __init__(self, channels: Sequence[int], latent_channels: int, groups: int = 8):
        super().__init__()
        self.conv_in = nn.Conv2d(1, channels[0], 3, padding=1)
        blocks: List[nn.Module] = []
        prev = channels[0]
        for c in channels:
            blocks += [ResBlock(prev, c, groups), Downsample(c)]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.mid = ResBlock(prev, prev, groups)
        self.norm_out = group_norm(prev, groups)
        self.conv_out = nn.Conv2d(prev, 2 * latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.mid(self.blocks(self.conv_in(x)))
        moments = self.conv_out(F.silu(self.norm_out(h)))
        mean, logvar = moments.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


class Decoder(nn.Module):
    def __init__(self, channels: Sequence[int], latent_channels: int, groups: int = 8):
        super().__init__()
        prev = channels[-1]
        self.conv_in = nn.Conv2d(latent_channels, prev, 3, padding=1)
        self.mid = ResBlock(prev, prev, groups)
        blocks: List[nn.Module] = []
        for c in reversed(channels):
            blocks += [ResBlock(prev, c, groups), Upsample(c)]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = group_norm(prev, groups)
        self.conv_out = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.mid(self.conv_in(z)))
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class PatchDiscriminator(nn.Module):
    def __init__(self, ch: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, ch, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), group_norm(2 * ch, 8), nn.SiLU(),
            nn.Conv2d(2 * ch, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class RandomFeatures(nn.Module):
    """Frozen randomly initialized conv features for the perceptual term."""

    def __init__(self, ch: int = 16, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(1, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / np.sqrt(fan_in))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        f1 = F.silu(self.conv1(x))
        return [f1, F.silu(self.conv2(f1))]


class AutoencoderKL(nn.Module):
    def __init__(self, config: VaeConfig, image_size: int = 64):
        super().__init__()
        if image_size % config.compression:
            raise DataError(f"image size {image_size} is not divisible by the compression ratio {config.compression}")
        self.config = config
        self.image_size = image_size
        self.encoder = Encoder(config.channels, config.latent_channels)
        self.decoder = Decoder(config.channels, config.latent_channels)
        side = image_size // config.compression
        self.classifier = nn.Sequential(
            nn.Linear(config.latent_channels * side * side, config.classifier_hidden), nn.SiLU(),
            nn.Linear(config.classifier_hidden, config.n_labels),
        )
        self.discriminator = PatchDiscriminator(config.disc_channels)
        self.perceptual = RandomFeatures()
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def autoencoder_parameters(self) -> List[nn.Parameter]:
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.classifier.parameters()]


def _as_batch(pixels) -> torch.Tensor:
    x = torch.as_tensor(pixels)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise DataError(f"expected (H, W), (B, H, W) or (B, 1, H, W) pixels, got {tuple(x.shape)}")
    return x


def encode(model: AutoencoderKL, pixels) -> Tuple[torch.Tensor, torch.Tensor]:
    """Posterior mean and log-variance, each ``(B, C, H/r, W/r)``."""
    x = _as_batch(pixels)
    r = model.config.compression
    if x.shape[-1] % r or x.shape[-2] % r:
        raise DataError(f"image size {tuple(x.shape[-2:])} is not divisible by the compression ratio {r}")
    dtype = next(model.parameters()).dtype
    return model.encoder(x.to(dtype))


def sample_latent(mean: torch.Tensor, logvar: torch.Tensor, seed: Optional[int] = None,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterized draw ``mean + exp(logvar / 2) * eps``."""
    if not torch.isfinite(mean).all() or torch.isnan(logvar).any() or (logvar == float("inf")).any():
        raise NumericalError("non-finite latent moments")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


def decode(model: AutoencoderKL, latent: torch.Tensor) -> torch.Tensor:
    z = torch.as_tensor(latent)
    if z.ndim == 3:
        z = z[None]
    if not torch.isfinite(z).all():
        raise NumericalError("non-finite latent passed to decoder")
    if z.shape[1] != model.config.latent_channels:
        raise DataError(f"latent has {z.shape[1]} channels, expected {model.config.latent_channels}")
    return model.decoder(z.to(next(model.parameters()).dtype))


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Element-wise KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * (mean ** 2 + torch.exp(logvar) - 1.0 - logvar)


@dataclass
class LossWeights:
    kl: float = 1e-6
    adv: float = 0.0
    cls: float = 0.1
    perceptual: float = 0.0

    @classmethod
    def from_config(cls, c: VaeConfig) -> "LossWeights":
        return cls(c.kl_weight, c.adv_weight, c.cls_weight, c.perceptual_weight)


def vae_loss_terms(x: torch.Tensor, x_rec: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor,
                   logits: Optional[torch.Tensor], labels: Optional[torch.Tensor], weights: LossWeights,
                   disc_fake: Optional[torch.Tensor] = None,
                   feats: Optional[Tuple[List[torch.Tensor], List[torch.Tensor]]] = None
                   ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    zero = x.new_zeros(())
    rec = (x - x_rec).abs().mean()
    kl = gaussian_kl(mean, logvar).flatten(1).sum(1).mean()
    cls = F.binary_cross_entropy_with_logits(logits, labels) if logits is not None else zero
    adv = -disc_fake.mean() if disc_fake is not None else zero
    per = sum((F.mse_loss(a, b) for a, b in zip(*feats)), zero) if feats is not None else zero
    total = rec + weights.kl * kl + weights.adv * adv + weights.cls * cls + weights.perceptual * per
    return total, {"rec": rec, "kl": kl, "adv": adv, "cls": cls, "perceptual": per}


def vae_loss(model: AutoencoderKL, pixels: torch.Tensor, labels: Optional[torch.Tensor],
             weights: Optional[LossWeights] = None, adversarial: bool = False,
             generator: Optional[torch.Generator] = None, use_mean: bool = False
             ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Autoencoder objective on a batch; returns ``(total, components)``."""
    weights = weights or LossWeights.from_config(model.config)
    x = _as_batch(pixels).to(next(model.parameters()).dtype)
    mean, logvar = encode(model, x)
    z = mean if use_mean else sample_latent(mean, logvar, generator=generator or torch.Generator().manual_seed(0))
    x_rec = model.decoder(z)
    logits = model.classifier(mean.flatten(1)) if (labels is not None and weights.cls) else None
    disc_fake = model.discriminator(x_rec) if (adversarial and weights.adv) else None
    feats = (model.perceptual(x), model.perceptual(x_rec)) if weights.perceptual else None
    lab = labels.to(x.dtype) if labels is not None else None
    return vae_loss_terms(x, x_rec, mean, logvar, logits, lab, weights, disc_fake, feats)


def discriminator_loss(model: AutoencoderKL, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Hinge loss for the patch discriminator."""
    return F.relu(1.0 - model.discriminator(real)).mean() + F.relu(1.0 + model.discriminator(fake)).mean()


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def estimate_latent_scale(model: AutoencoderKL, pixels: torch.Tensor) -> float:
    mean, _ = encode(model, pixels)
    return float(mean.std())


@torch.no_grad()
def evaluate_vae(model: AutoencoderKL, pixels: torch.Tensor, labels: torch.Tensor, batch_size: int = 64) -> float:
    weights = LossWeights.from_config(model.config)
    total, n = 0.0, 0
    for idx in _batches(len(pixels), batch_size, None):
        loss, _ = vae_loss(model, pixels[idx], labels[idx], weights, adversarial=False, use_mean=True)
        total += float(loss) * len(idx)
        n += len(idx)
    return total / max(n, 1)


def train_vae(train_images: Sequence[ImageSample], val_images: Sequence[ImageSample], config: VaeConfig,
              seed: int = 0, history: Optional[list] = None) -> AutoencoderKL:
    """Train with AdamW and return the best-validation model, frozen.

    Validation selection uses the non-adversarial part of the objective with
    the posterior mean, so it does not depend on the discriminator's state.
    """
    if not train_images or not val_images:
        raise DataError("train_vae needs non-empty training and validation image sets")
    torch.manual_seed(seed)
    model = AutoencoderKL(config, image_size=train_images[0].pixels.shape[-1])
    x_tr, y_tr = stack_pixels(train_images), stack_labels([im.abnormality for im in train_images])
    x_va, y_va = stack_pixels(val_images), stack_labels([im.abnormality for im in val_images])
    opt = torch.optim.AdamW(model.autoencoder_parameters(), lr=config.lr, weight_decay=0.0)
    opt_d = torch.optim.AdamW(model.discriminator.parameters(), lr=config.lr, weight_decay=0.0)
    weights = LossWeights.from_config(config)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    best_state, best_val, step = None, float("inf"), 0
    history = history if history is not None else []
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums: Dict[str, float] = {}
        n_batches = 0
        for idx in _batches(len(x_tr), config.batch_size, rng):
            adversarial = step >= config.adv_warmup_steps and weights.adv > 0
            loss, parts = vae_loss(model, x_tr[idx], y_tr[idx], weights, adversarial, gen)
            if not torch.isfinite(loss):
                raise NumericalError(f"VAE loss became non-finite at epoch {epoch}, step {step}: "
                                     + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            if adversarial:
                with torch.no_grad():
                    mean, logvar = encode(model, x_tr[idx])
                    fake = model.decoder(sample_latent(mean, logvar, generator=gen))
                d_loss = discriminator_loss(model, x_tr[idx], fake)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1
            step += 1
        model.eval()
        val = evaluate_vae(model, x_va, y_va)
        row = {"epoch": epoch, "val_total": val, **{f"train_{k}": v / n_batches for k, v in sums.items()}}
        history.append(row)
        log.info("vae epoch %d: %s", epoch, row)
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.latent_scale.fill_(estimate_latent_scale(model, x_tr[: config.batch_size]))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
