"""Latent caching and the LDM training loop."""

from __future__ import annotations

import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..config import EhrConfig, LdmConfig, UnetConfig
from ..dataset import EhrNormalizer, ImageSample, LdmSample, collate_series, stack_labels, stack_pixels
from ..errors import DataError, NumericalError
from ..vae import AutoencoderKL, encode
from .objective import LdmBatch, LdmModel, LossHyper, lambda_ramp, ldm_loss
from .schedule import DiffusionSchedule, make_schedule

log = logging.getLogger(__name__)

LatentKey = Tuple[str, int]


@torch.no_grad()
def encode_latents(vae: AutoencoderKL, keyed_images: Dict[LatentKey, ImageSample],
                   batch_size: int = 64) -> Dict[LatentKey, torch.Tensor]:
    """Scaled posterior-mean latents for every ``(patient_id, hour)`` image."""
    keys = sorted(keyed_images)
    out: Dict[LatentKey, torch.Tensor] = {}
    scale = float(vae.latent_scale)
    for i in range(0, len(keys), batch_size):
        chunk = keys[i:i + batch_size]
        mean, _ = encode(vae, stack_pixels([keyed_images[k] for k in chunk]))
        for k, z in zip(chunk, mean / scale):
            out[k] = z.float()
    return out


def pair_images(pairs: Sequence[LdmSample]) -> Dict[LatentKey, ImageSample]:
    out: Dict[LatentKey, ImageSample] = {}
    for p in pairs:
        out[(p.patient_id, p.reference.taken_at)] = p.reference
        out[(p.patient_id, p.target.taken_at)] = p.target
    return out


def make_batch(pairs: Sequence[LdmSample], latents: Dict[LatentKey, torch.Tensor], max_len: int,
               normalizer: Optional[EhrNormalizer] = None) -> LdmBatch:
    z1 = torch.stack([latents[(p.patient_id, p.target.taken_at)] for p in pairs])
    z0 = torch.stack([latents[(p.patient_id, p.reference.taken_at)] for p in pairs])
    ehr = collate_series([p.ehr for p in pairs], max_len, normalizer)
    return LdmBatch(z1, z0, ehr, stack_labels([p.target_labels for p in pairs]))


def build_ldm(latent_channels: int, ehr_inputs: int, n_labels: int, unet: UnetConfig, ehr: EhrConfig,
              ldm: LdmConfig, schedule: Optional[DiffusionSchedule] = None) -> LdmModel:
    if schedule is None:
        schedule = make_schedule(ldm.schedule, ldm.n_steps, ldm.beta_start, ldm.beta_end)
    return LdmModel(latent_channels, ehr_inputs, n_labels, unet, ehr, ldm.use_ehr, ldm.use_reference,
                    schedule, ldm.eps_skip)


@torch.no_grad()
def evaluate_ldm(model: LdmModel, schedule: DiffusionSchedule, pairs: Sequence[LdmSample],
                 latents: Dict[LatentKey, torch.Tensor], config: LdmConfig, max_len: int,
                 normalizer: Optional[EhrNormalizer], seed: int, batch_size: int = 64) -> Dict[str, float]:
    """Composite loss (at full contrastive weight) and its parts on a fixed set of draws."""
    hyper = LossHyper.from_config(config)
    gen = torch.Generator().manual_seed(seed)
    sums = {"total": 0.0, "base_mse": 0.0, "contrastive": 0.0, "aux": 0.0}
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        batch = make_batch(chunk, latents, max_len, normalizer)
        total, parts = ldm_loss(model, schedule, batch, 1.0, hyper, gen)
        sums["total"] += float(total) * len(chunk)
        for k, v in parts.items():
            sums[k] += float(v) * len(chunk)
    return {k: v / max(len(pairs), 1) for k, v in sums.items()}


def train_ldm(train_pairs: Sequence[LdmSample], val_pairs: Sequence[LdmSample],
              latents: Dict[LatentKey, torch.Tensor], schedule: DiffusionSchedule, config: LdmConfig,
              unet_config: UnetConfig, ehr_config: EhrConfig, normalizer: Optional[EhrNormalizer],
              seed: int = 0, history: Optional[list] = None) -> LdmModel:
    """Jointly train the noise predictor, the conditioning encoder and its auxiliary head.

    Returns the epoch with the lowest validation composite loss.
    """
    if not train_pairs or not val_pairs:
        raise DataError("train_ldm needs non-empty training and validation pair sets")
    torch.manual_seed(seed)
    first = train_pairs[0]
    c = latents[(first.patient_id, first.target.taken_at)].shape[0]
    ehr_inputs = first.ehr.n_channels + len(first.ehr.static)
    n_labels = len(first.target_labels)
    model = build_ldm(c, ehr_inputs, n_labels, unet_config, ehr_config, config, schedule)
    # normalize every series once up front
    train_pairs = [_normalized(p, normalizer) for p in train_pairs]
    val_pairs = [_normalized(p, normalizer) for p in val_pairs]
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=0.0)
    hyper = LossHyper.from_config(config)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n_batches = (len(train_pairs) + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    history = history if history is not None else []
    best_state, best_val, step = None, float("inf"), 0
    max_len = ehr_config.max_len

    model.eval()
    initial = evaluate_ldm(model, schedule, val_pairs, latents, config, max_len, None, seed + 1)
    history.append({"epoch": 0, **{f"val_{k}": v for k, v in initial.items()}})
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums: Dict[str, float] = {}
        order = rng.permutation(len(train_pairs))
        for i in range(0, len(order), config.batch_size):
            chunk = [train_pairs[j] for j in order[i:i + config.batch_size]]
            batch = make_batch(chunk, latents, max_len)
            lam = lambda_ramp(step, total_steps) if config.contrastive else 0.0
            loss, parts = ldm_loss(model, schedule, batch, lam, hyper, gen)
            if not torch.isfinite(loss):
                raise NumericalError(f"LDM loss became non-finite at epoch {epoch}, step {step}: "
                                     + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            step += 1
        model.eval()
        val = evaluate_ldm(model, schedule, val_pairs, latents, config, max_len, None, seed + 1)
        row = {"epoch": epoch, "lambda1": lambda_ramp(step, total_steps) if config.contrastive else 0.0,
               **{f"train_{k}": v / n_batches for k, v in sums.items()},
               **{f"val_{k}": v for k, v in val.items()}}
        history.append(row)
        log.info("ldm epoch %d: %s", epoch, row)
        if val["total"] < best_val:
            best_val, best_state = val["total"], copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _normalized(p: LdmSample, normalizer: Optional[EhrNormalizer]) -> LdmSample:
    if normalizer is None:
        return p
    return LdmSample(p.patient_id, p.reference, p.target, normalizer.transform(p.ehr), p.target_labels)
