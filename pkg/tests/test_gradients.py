"""Central finite differences against autograd, in float64 on micro models."""

import dataclasses

import numpy as np
import torch

from ddlcxr.diffusion import LdmBatch, LdmModel, LossHyper, ldm_loss, make_schedule
from ddlcxr.ehr_encoder import EhrEncoder, aux_loss, aux_predict
from ddlcxr.predictor import Predictor, task_loss
from ddlcxr.vae import AutoencoderKL, LossWeights, vae_loss
from helpers import MICRO_EHR, MICRO_PRED, MICRO_UNET, MICRO_VAE, random_ehr, seeded

N_PARAMS = 120
STEP = 1e-6
# relative error with an absolute floor so parameters with a vanishing gradient do not divide by ~0
FLOOR = 1e-6


def check_gradients(loss_fn, params, n=N_PARAMS, seed=0):
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    pool = [(p, i) for p in params if p.grad is not None for i in range(p.numel())]
    assert len(pool) >= n
    rng = np.random.default_rng(seed)
    picks = [pool[j] for j in rng.choice(len(pool), size=n, replace=False)]
    worst = 0.0
    with torch.no_grad():
        for p, i in picks:
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[i])
            old = float(flat[i])
            flat[i] = old + STEP
            up = float(loss_fn())
            flat[i] = old - STEP
            down = float(loss_fn())
            flat[i] = old
            numeric = (up - down) / (2 * STEP)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
            worst = max(worst, rel)
    return worst


def test_vae_loss_gradients():
    torch.manual_seed(0)
    cfg = dataclasses.replace(MICRO_VAE, perceptual_weight=0.5, adv_weight=0.1, kl_weight=1e-2)
    model = AutoencoderKL(cfg, image_size=16).double()
    x = torch.rand(3, 1, 16, 16, generator=seeded(1), dtype=torch.float64)
    y = torch.tensor([[1.0], [0.0], [1.0]], dtype=torch.float64)
    w = LossWeights.from_config(cfg)

    def loss():
        return vae_loss(model, x, y, w, adversarial=True, generator=seeded(2))[0]

    assert check_gradients(loss, model.autoencoder_parameters()) < 1e-3


def test_aux_path_gradients():
    torch.manual_seed(1)
    enc = EhrEncoder(4, 3, MICRO_EHR).double()
    batch = random_ehr(3, 7, 4, seed=3, lengths=[7, 2, 5])
    y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]], dtype=torch.float64)

    def loss():
        return aux_loss(aux_predict(enc, enc(batch)), y)

    assert check_gradients(loss, enc.parameters()) < 1e-3


def test_ldm_loss_gradients():
    torch.manual_seed(2)
    schedule = make_schedule("linear", 50, 1e-3, 5e-2)
    model = LdmModel(2, 3, 1, MICRO_UNET, MICRO_EHR, schedule=schedule, eps_skip=True).double()
    g = seeded(4)
    z1 = torch.randn(3, 2, 8, 8, generator=g, dtype=torch.float64)
    batch = LdmBatch(z1, z1 + 0.2 * torch.randn(z1.shape, generator=g, dtype=torch.float64),
                     random_ehr(3, 5, 3, seed=5, lengths=[5, 3, 1]), torch.tensor([[1.0], [0.0], [1.0]]).double())
    # a large margin keeps every hinge strictly active, away from its kink
    hyper = LossHyper(margin=10.0, beta_pert=0.5, aux_weight=0.7)

    def loss():
        return ldm_loss(model, schedule, batch, 0.8, hyper, seed=6)[0]

    assert float(ldm_loss(model, schedule, batch, 0.8, hyper, seed=6)[1]["contrastive"]) > 1.0
    assert check_gradients(loss, model.parameters()) < 1e-3


def test_fusion_head_gradients():
    torch.manual_seed(3)
    model = Predictor(5, 2, 2, MICRO_PRED, MICRO_EHR).double()
    g = seeded(7)
    pixels = torch.rand(4, 1, 16, 16, generator=g, dtype=torch.float64)
    latent = torch.randn(4, 2, 4, 4, generator=g, dtype=torch.float64)
    ehr = random_ehr(4, 6, 5, seed=8, lengths=[6, 2, 4, 5])
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)

    def loss():
        return task_loss(torch.sigmoid(model(pixels, ehr, latent)), y)

    fusion = [*model.fusion.parameters(), *model.fusion_norm.parameters(), *model.head.parameters(),
              *model.modality.parameters(), *model.projections.parameters()]
    assert check_gradients(loss, fusion) < 1e-3
    # and across the whole network, including the encoders
    assert check_gradients(loss, model.parameters(), seed=1) < 1e-3
