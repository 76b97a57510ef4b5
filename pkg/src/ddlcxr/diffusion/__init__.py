from .objective import (LdmBatch, LdmModel, LossHyper, contrastive_hinge, lambda_ramp, ldm_loss,
                        perturb_context, predict_noise)
from .sampler import ddim_loop, ddim_sample, ddim_timesteps
from .schedule import DiffusionSchedule, forward_diffuse, make_schedule, schedule_from_betas
from .unet import ConditionalUNet

__all__ = [
    "ConditionalUNet", "DiffusionSchedule", "LdmBatch", "LdmModel", "LossHyper", "contrastive_hinge",
    "ddim_loop", "ddim_sample", "ddim_timesteps", "forward_diffuse", "lambda_ramp", "ldm_loss",
    "make_schedule", "perturb_context", "predict_noise", "schedule_from_betas",
]
