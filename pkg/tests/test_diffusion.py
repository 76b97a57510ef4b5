import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlcxr.diffusion import (LdmBatch, LdmModel, LossHyper, contrastive_hinge, ddim_loop, ddim_sample,
                              ddim_timesteps, forward_diffuse, lambda_ramp, ldm_loss, make_schedule,
                              perturb_context, schedule_from_betas)
from ddlcxr.errors import ConfigError, DataError, NumericalError
from helpers import MICRO_EHR, MICRO_UNET, random_ehr, seeded
from oracles import alpha_bars_direct, chain_forward, ddim_sigma0_reference, ddpm_ancestral


def micro_ldm(schedule=None, eps_skip=False, seed=0, **kw):
    torch.manual_seed(seed)
    return LdmModel(2, 3, 1, MICRO_UNET, MICRO_EHR, schedule=schedule, eps_skip=eps_skip, **kw).double()


def micro_batch(b=4, seed=0):
    g = seeded(seed)
    z1 = torch.randn(b, 2, 8, 8, generator=g, dtype=torch.float64)
    z0 = z1 + 0.3 * torch.randn(b, 2, 8, 8, generator=g, dtype=torch.float64)
    labels = (torch.rand(b, 1, generator=g) < 0.5).double()
    return LdmBatch(z1, z0, random_ehr(b, 6, 3, seed=seed, lengths=[6, 4, 1, 3][:b] + [6] * max(b - 4, 0)),
                    labels)


# ---------------------------------------------------------------------------
# schedule


def test_alpha_bars_small_example():
    s = schedule_from_betas([0.1, 0.2])
    assert s.alpha_bars.tolist() == [0.9, 0.9 * 0.8]
    assert s.alpha_bars[1] == pytest.approx(0.72, abs=1e-15)


def test_linear_schedule_matches_direct_product_exactly():
    s = make_schedule("linear", 1000, 1e-4, 2e-2)
    assert s.alpha_bars.tolist() == alpha_bars_direct(np.linspace(1e-4, 2e-2, 1000).tolist())
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(2e-2)


def test_posterior_variance_boundary():
    assert schedule_from_betas([0.3]).posterior_vars.tolist() == [0.0]
    s = make_schedule("linear", 10)
    expect = (1 - s.alpha_bars[3]) / (1 - s.alpha_bars[4]) * s.betas[4]
    assert s.posterior_vars[4] == pytest.approx(expect, rel=1e-15)
    assert float(s.alpha_bar(0)) == 1.0


def test_cosine_schedule_is_valid():
    s = make_schedule("cosine", 100)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.parametrize("betas", [[0.0, 0.1], [0.5, 1.0], [-0.1], []])
def test_invalid_betas(betas):
    with pytest.raises(ConfigError):
        schedule_from_betas(betas)


def test_invalid_schedule_args():
    with pytest.raises(ConfigError):
        make_schedule("linear", 0)
    with pytest.raises(ConfigError):
        make_schedule("quadratic", 10)


# ---------------------------------------------------------------------------
# forward process


def test_forward_diffuse_closed_form_examples():
    z0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    s = schedule_from_betas([0.75])
    assert torch.equal(forward_diffuse(s, z0, 0, eps), z0)
    out = forward_diffuse(s, torch.zeros_like(z0), 1, eps)
    assert torch.allclose(out, math.sqrt(0.75) * eps, atol=1e-15)


def test_forward_diffuse_per_row_steps():
    s = make_schedule("linear", 50)
    z0, eps = torch.randn(3, 1, 2, 2, dtype=torch.float64), torch.randn(3, 1, 2, 2, dtype=torch.float64)
    n = torch.tensor([1, 20, 50])
    out = forward_diffuse(s, z0, n, eps)
    for i in range(3):
        ab = s.alpha_bars[int(n[i]) - 1]
        assert torch.allclose(out[i], math.sqrt(ab) * z0[i] + math.sqrt(1 - ab) * eps[i])


def test_forward_diffuse_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(DataError):
        forward_diffuse(s, torch.zeros(2, 3), 1, torch.zeros(2, 4))
    with pytest.raises(DataError):
        forward_diffuse(s, torch.zeros(2, 3), 11, torch.zeros(2, 3))


def test_forward_diffuse_matches_iterative_chain_monte_carlo():
    n_steps, draws = 1000, 10_000
    s = make_schedule("linear", n_steps)
    n = n_steps // 2
    z0 = np.array([1.5, -0.7])
    chained = chain_forward(np.tile(z0, (draws, 1)), s.betas.tolist(), n, np.random.default_rng(0))
    eps = torch.randn(draws, 2, generator=seeded(1), dtype=torch.float64)
    closed = forward_diffuse(s, torch.as_tensor(np.tile(z0, (draws, 1))), n, eps).numpy()
    ab = s.alpha_bars[n - 1]
    var = 1 - ab
    se_mean = math.sqrt(var / draws)
    se_var = var * math.sqrt(2 / (draws - 1))
    for sample in (chained, closed):
        assert np.all(np.abs(sample.mean(0) - math.sqrt(ab) * z0) < 3 * se_mean)
        assert np.all(np.abs(sample.var(0, ddof=1) - var) < 3 * se_var)
    assert np.all(np.abs(chained.mean(0) - closed.mean(0)) < 3 * math.sqrt(2) * se_mean)


# ---------------------------------------------------------------------------
# loss pieces


def test_hinge_examples():
    assert float(contrastive_hinge(torch.tensor(1.0), torch.tensor(0.5), 0.2)) == pytest.approx(0.7)
    assert float(contrastive_hinge(torch.tensor(0.3), torch.tensor(0.6), 0.2)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 2))
def test_hinge_nonnegative(a, b, m):
    assert float(contrastive_hinge(torch.tensor(a), torch.tensor(b), m)) >= 0.0


def test_lambda_ramp():
    assert lambda_ramp(0, 100) == 0.0
    assert lambda_ramp(100, 100) == 1.0
    assert lambda_ramp(50, 100) == 0.5
    assert lambda_ramp(150, 100) == 1.0


def test_perturb_context():
    e = torch.full((2, 3, 4), 2.0, dtype=torch.float64)
    assert torch.equal(perturb_context(e, 0.0, seed=3), e)
    delta = torch.randn(e.shape, generator=seeded(3), dtype=torch.float64)
    assert torch.equal(perturb_context(e, 1.0, seed=3), delta)
    assert torch.allclose(perturb_context(e, 0.5, seed=3), 0.5 * e + 0.5 * delta)
    assert torch.allclose(perturb_context(torch.full((1,), 2.0), 0.5, seed=0) - 0.5 * torch.randn(
        1, generator=seeded(0)), torch.tensor([1.0]))
    with pytest.raises(ValueError):
        perturb_context(e, 1.5)


def plain_ddpm_mse(model, schedule, batch, seed):
    """Textbook epsilon-MSE: draw n uniformly, then the noise, diffuse, regress the noise."""
    g = seeded(seed)
    b = batch.z_target.shape[0]
    n = torch.randint(1, schedule.n_steps + 1, (b,), generator=g)
    eps = torch.randn(batch.z_target.shape, generator=g, dtype=batch.z_target.dtype)
    abar = torch.tensor([alpha_bars_direct(schedule.betas.tolist())[int(k) - 1] for k in n], dtype=torch.float64)
    z_n = abar.sqrt().view(-1, 1, 1, 1) * batch.z_target + (1 - abar).sqrt().view(-1, 1, 1, 1) * eps
    eps_hat = model.predict_noise(z_n, batch.z_ref, n, model.ehr(batch.ehr))
    return ((eps - eps_hat) ** 2).mean()


@pytest.mark.parametrize("eps_skip", [False, True])
def test_ldm_loss_reduces_to_plain_ddpm(eps_skip):
    s = make_schedule("linear", 1000)
    model = micro_ldm(s, eps_skip)
    batch = micro_batch()
    hyper = LossHyper(aux_weight=0.0)
    for seed in range(3):
        total, parts = ldm_loss(model, s, batch, 0.0, hyper, seed=seed)
        ref = plain_ddpm_mse(model, s, batch, seed)
        assert abs(float(total) - float(ref)) < 1e-7
        assert float(parts["base_mse"]) == pytest.approx(float(ref), abs=1e-12)


def test_ldm_loss_composition():
    s = make_schedule("linear", 100)
    model = micro_ldm(s, True)
    batch = micro_batch()
    hyper = LossHyper(margin=0.2, beta_pert=0.5, aux_weight=0.7)
    total, parts = ldm_loss(model, s, batch, 0.3, hyper, seed=5)
    expect = parts["base_mse"] + 0.3 * parts["contrastive"] + 0.7 * parts["aux"]
    assert float(total) == pytest.approx(float(expect), rel=1e-12)
    assert float(parts["contrastive"]) >= 0
    # lambda1 = 0 still computes the hinge but leaves it out of the total
    total0, parts0 = ldm_loss(model, s, batch, 0.0, hyper, seed=5)
    assert float(parts0["contrastive"]) == float(parts["contrastive"])
    assert float(total0) == pytest.approx(float(parts0["base_mse"] + 0.7 * parts0["aux"]), rel=1e-12)


def test_ldm_loss_hinge_uses_same_draws():
    s = make_schedule("linear", 100)
    model = micro_ldm(s)
    batch = micro_batch()
    g = seeded(9)
    n = torch.randint(1, 101, (4,), generator=g)
    eps = torch.randn(batch.z_target.shape, generator=g, dtype=torch.float64)
    z_n = forward_diffuse(s, batch.z_target, n, eps)
    enc = model.encode_context(batch.ehr)
    delta = torch.randn(enc.tokens.shape, generator=g, dtype=torch.float64)
    pert = enc.with_tokens(0.5 * enc.tokens + 0.5 * delta)
    clean = ((eps - model.predict_noise(z_n, batch.z_ref, n, enc)) ** 2).flatten(1).mean(1)
    noisy = ((eps - model.predict_noise(z_n, batch.z_ref, n, pert)) ** 2).flatten(1).mean(1)
    expect = torch.clamp(clean - noisy + 0.2, min=0).mean()
    _, parts = ldm_loss(model, s, batch, 1.0, LossHyper(), seeded(9))
    assert float(parts["contrastive"]) == pytest.approx(float(expect), abs=1e-12)


def test_hinge_stop_grad_flag_changes_only_gradients():
    s = make_schedule("linear", 100)
    model = micro_ldm(s)
    batch = micro_batch()
    a, _ = ldm_loss(model, s, batch, 1.0, LossHyper(margin=5.0), seed=1)
    b, _ = ldm_loss(model, s, batch, 1.0, LossHyper(margin=5.0, hinge_stop_grad=True), seed=1)
    assert float(a) == float(b)
    ga = torch.autograd.grad(a, model.unet.conv_out.weight)[0]
    gb = torch.autograd.grad(b, model.unet.conv_out.weight)[0]
    assert not torch.allclose(ga, gb)


# ---------------------------------------------------------------------------
# noise predictor


def test_unet_shapes_and_null_context():
    model = micro_ldm()
    z = torch.randn(3, 2, 8, 8, dtype=torch.float64)
    n = torch.tensor([1, 5, 9])
    enc = model.encode_context(random_ehr(3, 5, 3))
    assert model.predict_noise(z, z, n, enc).shape == z.shape
    unet = model.unet
    ctx = torch.randn(3, 4, 16, dtype=torch.float64)
    none_valid = torch.zeros(3, 4, dtype=torch.bool)
    a = unet(z, z, n, ctx, none_valid)
    b = unet(z, z, n)
    c = unet(z, z, n, torch.zeros(3, 0, 16, dtype=torch.float64))
    assert torch.isfinite(a).all()
    assert torch.allclose(a, b, atol=1e-12) and torch.allclose(b, c, atol=1e-12)


def test_unet_padding_invariance():
    model = micro_ldm()
    z = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    ctx = torch.randn(2, 3, 16, dtype=torch.float64)
    valid = torch.ones(2, 3, dtype=torch.bool)
    padded = torch.cat([ctx, 1e3 * torch.randn(2, 4, 16, dtype=torch.float64)], dim=1)
    pvalid = torch.cat([valid, torch.zeros(2, 4, dtype=torch.bool)], dim=1)
    n = torch.tensor([3, 7])
    assert torch.allclose(model.unet(z, z, n, ctx, valid), model.unet(z, z, n, padded, pvalid), atol=1e-10)


def test_unet_shape_errors():
    model = micro_ldm()
    z = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    with pytest.raises(DataError):
        model.unet(z, torch.randn(2, 2, 4, 4, dtype=torch.float64), torch.tensor([1, 1]))
    with pytest.raises(DataError):
        model.unet(z, z, torch.tensor([1, 1]), torch.randn(2, 3, 7, dtype=torch.float64))


def test_reference_toggle_ignores_reference():
    model = micro_ldm(use_reference=False)
    z = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    n = torch.tensor([4, 4])
    a = model.predict_noise(z, torch.randn_like(z), n, None)
    b = model.predict_noise(z, torch.randn_like(z), n, None)
    assert torch.equal(a, b)


def test_eps_skip_adds_scaled_input():
    s = make_schedule("linear", 100)
    model = micro_ldm(s, eps_skip=True)
    z = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    n = torch.tensor([10, 90])
    raw = model.unet(z, z, n)
    coef = torch.tensor([math.sqrt(1 - s.alpha_bars[9]), math.sqrt(1 - s.alpha_bars[89])], dtype=torch.float64)
    assert torch.allclose(model.predict_noise(z, z, n, None), raw + coef.view(-1, 1, 1, 1) * z, atol=1e-6)


# ---------------------------------------------------------------------------
# sampler


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 200)[:3].tolist() == [5, 10, 15]
    assert ddim_timesteps(1000, 200)[-1] == 1000
    assert ddim_timesteps(7, 7).tolist() == list(range(1, 8))
    assert len(set(ddim_timesteps(1000, 333).tolist())) == 333
    with pytest.raises(ConfigError):
        ddim_timesteps(10, 11)


def test_ddim_deterministic():
    s = make_schedule("linear", 100)
    model = micro_ldm(s, True)
    model.eval()
    z_ref = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    enc = model.encode_context(random_ehr(2, 4, 3))
    a = ddim_sample(model, s, z_ref, enc, steps=10, seed=4)
    b = ddim_sample(model, s, z_ref, enc, steps=10, seed=4)
    c = ddim_sample(model, s, z_ref, enc, steps=10, seed=5)
    assert (a - b).abs().max() < 1e-6
    assert not torch.allclose(a, c)
    assert a.shape == z_ref.shape


def test_ddim_zero_network_closed_form():
    s = make_schedule("linear", 1000)
    x = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    for steps in (1, 7, 200, 1000):
        out = ddim_loop(lambda x_n, n: torch.zeros_like(x_n), s, x, steps)
        assert torch.allclose(out, x / math.sqrt(s.alpha_bars[-1]), rtol=1e-10)


def _toy_eps(x, n):
    return torch.tanh(x) * 0.5 + 0.01 * float(n if np.isscalar(n) else n.reshape(-1)[0])


def test_ddim_eta0_matches_sigma0_reference_on_two_steps():
    betas = [1e-4, 2e-2]
    s = schedule_from_betas(betas)
    x = torch.randn(2, 2, 3, 3, generator=seeded(0), dtype=torch.float64)
    ours = ddim_loop(_toy_eps, s, x, steps=2, eta=0.0)
    ref = ddim_sigma0_reference(lambda v, n: _toy_eps(v, n), betas, x.clone(), [1, 2])
    assert (ours - ref).abs().max() < 1e-4
    assert (ours - ref).abs().max() < 1e-12


def test_ddim_eta0_subsampled_matches_reference():
    s = make_schedule("linear", 50)
    x = torch.randn(2, 2, 3, 3, generator=seeded(1), dtype=torch.float64)
    grid = ddim_timesteps(50, 8).tolist()
    ours = ddim_loop(_toy_eps, s, x, steps=8)
    ref = ddim_sigma0_reference(_toy_eps, s.betas.tolist(), x.clone(), grid)
    assert (ours - ref).abs().max() < 1e-12


@pytest.mark.parametrize("betas", [[1e-4, 2e-2], np.linspace(1e-3, 0.2, 6).tolist()])
def test_ddim_eta1_equals_ddpm_ancestral(betas):
    s = schedule_from_betas(betas)
    x = torch.randn(2, 2, 3, 3, generator=seeded(2), dtype=torch.float64)
    ours = ddim_loop(_toy_eps, s, x, steps=len(betas), eta=1.0, generator=seeded(3))
    g = seeded(3)
    # the sampler draws noise for every step except the final one, whose variance is zero
    noises = [torch.randn(x.shape, generator=g, dtype=torch.float64) for _ in betas[1:]] + [torch.zeros_like(x)]
    ref = ddpm_ancestral(_toy_eps, betas, x.clone(), noises)
    assert (ours - ref).abs().max() < 1e-10


def test_ddim_non_finite_reports_step():
    s = make_schedule("linear", 20)
    bad = lambda x, n: torch.full_like(x, float("nan")) if int(n[0]) == 10 else torch.zeros_like(x)  # noqa: E731
    with pytest.raises(NumericalError, match="step 10"):
        ddim_loop(bad, s, torch.zeros(1, 1, 2, 2), steps=20)
