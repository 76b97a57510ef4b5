import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlcxr.config import EhrConfig
from ddlcxr.dataset import EhrBatch, EhrSeries, collate_series
from ddlcxr.ehr_encoder import EhrEncoder, aux_loss, aux_loss_from_logits, aux_predict, encode_ehr
from ddlcxr.errors import DataError
from helpers import MICRO_EHR, random_ehr


def random_series(rng, t, k=3):
    hours = np.sort(rng.choice(np.arange(0, 120), size=t, replace=False))
    mask = rng.random((t, k)) < 0.6
    values = np.where(mask, rng.normal(size=(t, k)), 0.0)
    return EhrSeries(values, mask, hours, rng.normal(size=2))


def encoder(k=5, labels=2, config=MICRO_EHR, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return EhrEncoder(k, labels, config).to(dtype).eval()


def test_output_shapes_and_cls_alias():
    enc = encoder()
    out = enc(random_ehr(3, 7, 5, dtype=torch.float32, lengths=[7, 4, 0]))
    assert out.tokens.shape == (3, 8, 16) and out.valid.shape == (3, 8)
    assert torch.equal(out.cls, out.tokens[:, 0])
    assert out.valid[:, 0].all() and out.valid[2, 1:].sum() == 0
    assert torch.isfinite(out.tokens[out.valid]).all()


def test_empty_series_gives_class_token_only():
    enc = encoder(k=5)
    s = EhrSeries(np.zeros((0, 3)), np.zeros((0, 3), bool), np.zeros(0, np.int64), np.zeros(2))
    out = encode_ehr(enc, s)
    assert out.tokens.shape == (1, 1, 16)
    assert torch.isfinite(out.cls).all()


def test_mask_invariance_over_fifty_series():
    enc = encoder(k=5, config=EhrConfig(d_model=32, n_heads=4, ff_dim=64, max_len=70, aux_hidden=8))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        s = random_series(rng, int(rng.integers(1, 40)))
        with torch.no_grad():
            base = enc(collate_series([s], 70))
            padded = enc(collate_series([s], 70, pad_to=len(s) + int(rng.integers(1, 30))))
        worst = max(worst, float((base.cls - padded.cls).abs().max()))
        n = len(s)
        assert torch.allclose(base.tokens[0, 1:n + 1], padded.tokens[0, 1:n + 1], atol=1e-5)
    assert worst < 1e-5


def test_padding_content_is_ignored():
    enc = encoder()
    batch = random_ehr(2, 9, 5, dtype=torch.float32, lengths=[9, 5])
    junk = EhrBatch(batch.values.clone(), batch.mask.clone(), batch.hours.clone(), batch.valid)
    pad = ~batch.valid
    junk.values[pad] = 123.0
    junk.mask[pad] = 1.0
    junk.hours[pad] = 77.0
    with torch.no_grad():
        a, b = enc(batch), enc(junk)
    assert torch.allclose(a.cls, b.cls, atol=1e-6)


def test_batching_does_not_mix_samples():
    enc = encoder()
    batch = random_ehr(3, 6, 5, dtype=torch.float32, lengths=[6, 2, 4])
    with torch.no_grad():
        full = enc(batch).cls
        single = enc(EhrBatch(batch.values[1:2, :2], batch.mask[1:2, :2], batch.hours[1:2, :2],
                              batch.valid[1:2, :2])).cls
    assert torch.allclose(full[1], single[0], atol=1e-5)


def test_shifting_hours_changes_cls():
    enc = encoder()
    batch = random_ehr(2, 6, 5, dtype=torch.float32)
    moved = EhrBatch(batch.values, batch.mask, batch.hours + 1, batch.valid)
    with torch.no_grad():
        diff = (enc(batch).cls - enc(moved).cls).abs().max()
    assert float(diff) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_channel_permutation_reparameterization(seed):
    k = 5
    enc = encoder(k=k, seed=seed % 7, dtype=torch.float64)
    batch = random_ehr(2, 6, k, seed=seed, lengths=[6, 3])
    perm = torch.as_tensor(np.random.default_rng(seed).permutation(k))
    permuted = EhrBatch(batch.values[..., perm], batch.mask[..., perm], batch.hours, batch.valid)
    twin = encoder(k=k, seed=seed % 7, dtype=torch.float64)
    with torch.no_grad():
        w = twin.embed.weight
        w.copy_(torch.cat([w[:, :k][:, perm], w[:, k:][:, perm]], dim=1))
        a, b = enc(batch).cls, twin(permuted).cls
    assert torch.allclose(a, b, atol=1e-12)


def test_length_and_channel_errors():
    enc = encoder(config=EhrConfig(d_model=16, n_heads=2, ff_dim=32, max_len=4, aux_hidden=8))
    with pytest.raises(DataError, match="max length"):
        enc(random_ehr(1, 5, 5, dtype=torch.float32))
    with pytest.raises(DataError, match="channels"):
        enc(random_ehr(1, 3, 4, dtype=torch.float32))
    rng = np.random.default_rng(1)
    with pytest.raises(DataError, match="truncate"):
        encode_ehr(enc, random_series(rng, 6))
    with pytest.raises(ValueError):
        EhrEncoder(3, 1, EhrConfig(d_model=10, n_heads=4))


def test_aux_head_logistic():
    enc = encoder(labels=25)
    with torch.no_grad():
        out = enc(random_ehr(2, 4, 5, dtype=torch.float32))
        assert aux_predict(enc, out).shape == (2, 25)
        for p in enc.aux_head[-1].parameters():
            p.zero_()
        np.testing.assert_array_equal(aux_predict(enc, out).numpy(), 0.5)
        enc.aux_head[-1].bias.fill_(0.847)
        assert float(aux_predict(enc, out)[0, 0]) == pytest.approx(0.7, abs=1e-4)


def test_aux_loss_worked_examples():
    assert float(aux_loss(torch.full((3, 4), 0.5), torch.ones(3, 4))) == pytest.approx(math.log(2))
    p = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
    assert float(aux_loss(p, torch.tensor([[1.0, 0.0]]))) == pytest.approx(-math.log(0.9), abs=1e-12)
    assert float(aux_loss(p, p.round())) == pytest.approx(0.1054, abs=1e-4)
    eps = 1e-9
    y = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
    assert float(aux_loss(y * (1 - 2 * eps) + eps, y)) < 1e-8
    with pytest.raises(DataError):
        aux_loss(torch.tensor([[1.0]]), torch.tensor([[1.0]]))
    with pytest.raises(DataError):
        aux_loss(torch.tensor([[0.5, 0.5]]), torch.tensor([[1.0]]))


def test_aux_loss_from_logits_matches():
    logits = torch.randn(4, 3, dtype=torch.float64)
    y = (torch.rand(4, 3) < 0.5).double()
    assert float(aux_loss_from_logits(logits, y)) == pytest.approx(float(aux_loss(torch.sigmoid(logits), y)),
                                                                    abs=1e-12)
