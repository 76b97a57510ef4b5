"""Conditional LDM wrapper and its composite training objective.

The objective is the epsilon-MSE with the clean EHR context, plus a
contrastive hinge asking the prediction under a noise-perturbed context to
be worse than the clean one by at least a margin, plus the auxiliary
abnormality loss on the EHR class token. The hinge reuses the same step
index and noise as the base term, and its clean branch is literally the
base term's prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from ..config import EhrConfig, LdmConfig, UnetConfig
from ..dataset import EhrBatch
from ..ehr_encoder import EhrEncoder, EhrEncoding, aux_loss_from_logits
from .schedule import DiffusionSchedule, forward_diffuse
from .unet import ConditionalUNet


class LdmModel(nn.Module):
    """Noise predictor plus the conditioning EHR encoder (with its auxiliary head).

    With ``eps_skip`` (needs ``schedule``) the prediction is
    ``sqrt(1 - abar_n) * z_n + unet(...)``. This is the noise that is
    optimal when nothing is known about ``z0``, so an imperfect network gives
    a shrunken ``x0`` estimate near high noise levels instead of one blown up
    by ``1 / sqrt(abar_n)``.
    """

    def __init__(self, latent_channels: int, ehr_inputs: int, n_labels: int,
                 unet_config: Optional[UnetConfig] = None, ehr_config: Optional[EhrConfig] = None,
                 use_ehr: bool = True, use_reference: bool = True,
                 schedule: Optional[DiffusionSchedule] = None, eps_skip: bool = False):
        super().__init__()
        ehr_config = ehr_config or EhrConfig()
        self.ehr = EhrEncoder(ehr_inputs, n_labels, ehr_config)
        self.unet = ConditionalUNet(latent_channels, ehr_config.d_model, unet_config)
        self.use_ehr = use_ehr
        self.use_reference = use_reference
        self.eps_skip = eps_skip
        if eps_skip:
            if schedule is None:
                raise ValueError("eps_skip needs the diffusion schedule")
            table = torch.sqrt(1.0 - schedule.alpha_bar(torch.arange(schedule.n_steps + 1)))
            self.register_buffer("skip_coef", table.float())

    def encode_context(self, ehr: Optional[EhrBatch]) -> Optional[EhrEncoding]:
        if not self.use_ehr or ehr is None:
            return None
        return self.ehr(ehr)

    def predict_noise(self, z_noisy: torch.Tensor, z_ref: torch.Tensor, n: torch.Tensor,
                      encoding: Optional[EhrEncoding]) -> torch.Tensor:
        if not self.use_reference:
            z_ref = torch.zeros_like(z_ref)
        if encoding is None:
            out = self.unet(z_noisy, z_ref, n)
        else:
            out = self.unet(z_noisy, z_ref, n, encoding.tokens, encoding.valid)
        if self.eps_skip:
            n = torch.as_tensor(n, dtype=torch.long).reshape(-1).expand(z_noisy.shape[0])
            coef = self.skip_coef.to(out.dtype)[n].view(-1, *([1] * (out.ndim - 1)))
            out = out + coef * z_noisy.to(out.dtype)
        return out


def predict_noise(model: LdmModel, z_noisy: torch.Tensor, z_ref: torch.Tensor,
                  encoding: Optional[EhrEncoding], n) -> torch.Tensor:
    return model.predict_noise(z_noisy, z_ref, torch.as_tensor(n), encoding)


def perturb_context(tokens: torch.Tensor, beta_pert: float, seed: Optional[int] = None,
                    generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``(1 - beta) * E + beta * delta`` with standard-normal ``delta``."""
    if not 0.0 <= beta_pert <= 1.0:
        raise ValueError(f"beta_pert must lie in [0, 1], got {beta_pert}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    delta = torch.randn(tokens.shape, generator=generator, dtype=tokens.dtype)
    return (1.0 - beta_pert) * tokens + beta_pert * delta


def contrastive_hinge(mse_clean: torch.Tensor, mse_perturbed: torch.Tensor, margin: float) -> torch.Tensor:
    return torch.clamp(mse_clean - mse_perturbed + margin, min=0.0)


def lambda_ramp(step: int, total_steps: int) -> float:
    """Contrastive weight ramping linearly from 0 to 1."""
    if total_steps <= 0:
        return 1.0
    return float(min(max(step / total_steps, 0.0), 1.0))


@dataclass
class LdmBatch:
    z_target: torch.Tensor
    z_ref: torch.Tensor
    ehr: EhrBatch
    labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.z_target.shape[0])


@dataclass
class LossHyper:
    margin: float = 0.2
    beta_pert: float = 0.5
    aux_weight: float = 1.0
    contrastive: bool = True
    hinge_stop_grad: bool = False

    @classmethod
    def from_config(cls, c: LdmConfig) -> "LossHyper":
        return cls(c.margin, c.beta_pert, c.aux_weight, c.contrastive, c.hinge_stop_grad)


def _per_sample_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).flatten(1).mean(1)


def ldm_loss(model: LdmModel, schedule: DiffusionSchedule, batch: LdmBatch, lambda1: float,
             hyper: Optional[LossHyper] = None, generator: Optional[torch.Generator] = None,
             seed: Optional[int] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Composite loss; random draws happen in the order step index, noise, perturbation."""
    hyper = hyper or LossHyper()
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    z1 = batch.z_target
    b = z1.shape[0]
    n = torch.randint(1, schedule.n_steps + 1, (b,), generator=generator)
    eps = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    z_n = forward_diffuse(schedule, z1, n, eps)

    encoding = model.encode_context(batch.ehr)
    eps_clean = model.predict_noise(z_n, batch.z_ref, n, encoding)
    mse_clean = _per_sample_mse(eps, eps_clean)
    base = mse_clean.mean()
    zero = base.new_zeros(())

    contrastive = zero
    if hyper.contrastive and encoding is not None:
        perturbed = encoding.with_tokens(perturb_context(encoding.tokens, hyper.beta_pert, generator=generator))
        eps_pert = model.predict_noise(z_n, batch.z_ref, n, perturbed)
        mse_pert = _per_sample_mse(eps, eps_pert)
        clean_term = mse_clean.detach() if hyper.hinge_stop_grad else mse_clean
        contrastive = contrastive_hinge(clean_term, mse_pert, hyper.margin).mean()

    aux = zero
    if encoding is not None:
        aux = aux_loss_from_logits(model.ehr.aux_logits(encoding), batch.labels)

    total = base + lambda1 * contrastive + hyper.aux_weight * aux
    return total, {"base_mse": base, "contrastive": contrastive, "aux": aux}
