import math

import pytest
import torch

from diffwm import schedule as sch
from diffwm.codec import encode_indices
from diffwm.nets import ModelBundle, NetConfig, decoder_forward, encoder_forward
from diffwm.distortions import surrogate_deepfake
from diffwm.sampler import SampleConfig, SamplingError, guidance_gradient, sample, watermark_log_prob
from gradcheck import check_gradient

TINY = dict(resolution=16, L=8, base_channels=8, channel_mults=(1, 2), embed_dim=8, time_dim=16)


def make_bundle(tiny_ae, T=10, dtype=torch.float32, seed=0):
    ae, sur = tiny_ae
    b = ModelBundle.create(NetConfig(T=T, **TINY), seed=seed, autoencoder=ae, surrogate=sur)
    b.metadata["step"] = 1
    if dtype != torch.float32:
        b = ModelBundle.from_state(b.state()).to(dtype)
    return b.eval()


@pytest.fixture(scope="module")
def cover():
    return torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0)) * 2 - 1


@pytest.fixture(scope="module")
def bits():
    return torch.randint(0, 2, (2, 8), generator=torch.Generator().manual_seed(1))


def test_watermark_log_prob_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 8, generator=g, dtype=torch.float64)
    w = torch.randint(0, 2, (2, 4), generator=g)
    expected = 0.0
    for b in range(2):
        for i in range(4):
            row = logits[b, i]
            expected += float(row[i + 4 * int(w[b, i])] - torch.logsumexp(row, 0))
    assert float(watermark_log_prob(logits, w)) == pytest.approx(expected, abs=1e-12)


def test_zero_scale_guidance_is_bit_identical(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae)
    for seed in range(10):
        plain = sample(b, cover, bits, SampleConfig(cond=False, seed=seed))
        guided = sample(b, cover, bits, SampleConfig(cond=True, s=0.0, seed=seed))
        assert torch.equal(plain, guided), seed


def test_sampling_is_deterministic(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae)
    for cond in (False, True):
        cfg = SampleConfig(cond=cond, s=10.0, seed=3)
        assert torch.equal(sample(b, cover, bits, cfg), sample(b, cover, bits, cfg))
    assert not torch.equal(sample(b, cover, bits, SampleConfig(seed=1)), sample(b, cover, bits, SampleConfig(seed=2)))


def test_output_shape_and_range(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae)
    out, traj = sample(b, cover[0], bits[0], SampleConfig(), return_trajectory=True)
    assert out.shape == cover[0].shape
    assert out.min() >= -1 and out.max() <= 1
    assert len(traj) == b.T + 1


def test_guidance_gradient_matches_finite_differences(tiny_ae):
    b = make_bundle(tiny_ae, dtype=torch.float64, seed=2)
    g = torch.Generator().manual_seed(0)
    x_t = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
    x_c = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    w = torch.randint(0, 2, (1, 8), generator=g)
    grad, _ = guidance_gradient(b, x_t, 4, x_c, w)
    x = x_t.clone().requires_grad_(True)

    def f():
        logits = decoder_forward(b.decoder, surrogate_deepfake(b.surrogate, encoder_forward(b.encoder, x, 4, x_c, w)))
        return watermark_log_prob(logits, w)

    # the untrained surrogate flattens gradients to ~1e-8; a small step would measure roundoff
    errs = check_gradient(f, x, 20, seed=0, h=1e-3)
    assert max(errs) < 1e-3
    torch.testing.assert_close(grad, torch.autograd.grad(f(), x)[0], rtol=0, atol=0)


def test_constant_decoder_gives_zero_gradient(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae)
    with torch.no_grad():
        b.decoder.head.weight.zero_()
    grad, _ = guidance_gradient(b, torch.randn(2, 3, 16, 16), 5, cover, bits)
    assert torch.count_nonzero(grad) == 0


def test_guidance_shift_is_linear_in_scale(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae, T=1, dtype=torch.float64)
    x_co = cover.double() * 0.5

    def last(s):
        _, traj = sample(b, x_co, bits, SampleConfig(cond=True, s=s, seed=0), return_trajectory=True)
        return traj[-1]

    base = last(0.0)
    d1, d2 = last(0.01) - base, last(0.02) - base
    assert d1.abs().max() > 0
    torch.testing.assert_close(d2, 2 * d1, rtol=1e-9, atol=1e-12)
    # one step at t=1: shift = s * sqrt(1 - abar_1) / sqrt(abar_1) * sqrt(1 - abar_1) * grad
    s = sch.make_schedule(1)
    abar = s.alpha_bar_at(1)
    grad, _ = guidance_gradient(b, torch.randn(x_co.shape, generator=torch.Generator().manual_seed(0),
                                               dtype=torch.float32).double(), 1, 0 * x_co, bits)
    torch.testing.assert_close(d1, 0.01 * (1 - abar) / math.sqrt(abar) * grad, rtol=1e-9, atol=1e-12)


def test_sampling_errors(tiny_ae, cover, bits):
    b = make_bundle(tiny_ae)
    untrained = ModelBundle.create(b.cfg, seed=0)
    with pytest.raises(SamplingError, match="untrained"):
        sample(untrained, cover, bits, SampleConfig())
    with pytest.raises(ValueError, match="L=8"):
        sample(b, cover, bits[:, :4], SampleConfig())
    with pytest.raises(ValueError):
        sample(b, torch.zeros(1, 3, 32, 32), bits[:1], SampleConfig())
    no_sur = ModelBundle(b.cfg, b.encoder, b.decoder, b.autoencoder, None, {"step": 1})
    with pytest.raises(SamplingError, match="surrogate"):
        sample(no_sur, cover, bits, SampleConfig(cond=True))
    with pytest.raises(ValueError):
        SampleConfig(s=-1)
