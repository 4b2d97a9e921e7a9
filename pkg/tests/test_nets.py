import pytest
import torch

from diffwm.nets import (BundleError, IncompatibleBundleError, ModelBundle, NetConfig, decoder_forward,
                         encoder_forward, load_bundle, save_bundle, timestep_embedding)
from gradcheck import check_gradient

TINY = dict(resolution=16, L=8, base_channels=8, channel_mults=(1, 2), embed_dim=8, time_dim=16, T=10)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle.create(NetConfig(**TINY), seed=0).eval()


def inputs(cfg, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    shape = (B, 3, cfg.resolution, cfg.resolution)
    return (torch.randn(shape, generator=g), torch.randint(1, cfg.T + 1, (B,), generator=g),
            torch.rand(shape, generator=g), torch.randint(0, 2, (B, cfg.L), generator=g))


def test_shapes(bundle):
    x_t, t, x_c, w = inputs(bundle.cfg)
    assert encoder_forward(bundle.encoder, x_t, t, x_c, w).shape == x_t.shape
    assert decoder_forward(bundle.decoder, x_t).shape == (2, 8, 16)


def test_default_config_shapes():
    b = ModelBundle.create(NetConfig(), seed=0)
    x = torch.zeros(1, 3, 32, 32)
    assert encoder_forward(b.encoder, x, 5, x, torch.zeros(16, dtype=torch.long)).shape == x.shape
    assert decoder_forward(b.decoder, x).shape == (1, 16, 32)


def test_scalar_t_and_shared_watermark(bundle):
    x_t, _, x_c, w = inputs(bundle.cfg)
    with torch.no_grad():
        a = encoder_forward(bundle.encoder, x_t, 4, x_c, w[0])
        b = encoder_forward(bundle.encoder, x_t, torch.tensor([4, 4]), x_c, w[0].expand(2, -1))
    assert torch.equal(a, b)


def test_watermark_changes_output(bundle):
    x_t, t, x_c, w = inputs(bundle.cfg)
    with torch.no_grad():
        assert not torch.equal(encoder_forward(bundle.encoder, x_t, t, x_c, w),
                               encoder_forward(bundle.encoder, x_t, t, x_c, 1 - w))


def test_shape_errors(bundle):
    x_t, t, x_c, w = inputs(bundle.cfg)
    with pytest.raises(ValueError, match="L=8"):
        encoder_forward(bundle.encoder, x_t, t, x_c, w[:, :4])
    with pytest.raises(ValueError):
        encoder_forward(bundle.encoder, x_t, t, x_c[:, :, :8], w)
    with pytest.raises(ValueError):
        decoder_forward(bundle.decoder, torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError):
        NetConfig(resolution=30, channel_mults=(1, 2, 2))


def test_timestep_embedding_rescales_to_reference_range():
    a = timestep_embedding(torch.tensor([5]), 16, T=100)
    b = timestep_embedding(torch.tensor([50]), 16, T=1000)
    torch.testing.assert_close(a, b)


def test_create_is_deterministic_and_isolated():
    torch.manual_seed(99)
    before = torch.rand(1)
    torch.manual_seed(99)
    a = ModelBundle.create(NetConfig(**TINY), seed=3)
    assert torch.equal(torch.rand(1), before)
    b = ModelBundle.create(NetConfig(**TINY), seed=3)
    for (ka, va), (_, vb) in zip(a.encoder.state_dict().items(), b.encoder.state_dict().items()):
        assert torch.equal(va, vb), ka


def test_bundle_round_trip_bit_exact(bundle, tmp_path):
    bundle.metadata["step"] = 7
    path = tmp_path / "m.pt"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.trained and loaded.cfg == bundle.cfg
    x_t, t, x_c, w = inputs(bundle.cfg, seed=5)
    with torch.no_grad():
        assert torch.equal(encoder_forward(loaded.encoder, x_t, t, x_c, w),
                           encoder_forward(bundle.encoder, x_t, t, x_c, w))
        assert torch.equal(decoder_forward(loaded.decoder, x_t), decoder_forward(bundle.decoder, x_t))


def test_truncated_bundle(bundle, tmp_path):
    path = tmp_path / "m.pt"
    save_bundle(bundle, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(BundleError):
        load_bundle(path)


def test_version_mismatch(bundle, tmp_path):
    state = bundle.state()
    state["version"] = 999
    with pytest.raises(IncompatibleBundleError, match="999"):
        ModelBundle.from_state(state)
    with pytest.raises(BundleError):
        ModelBundle.from_state({"format": "other"})


def test_decoder_gradient_matches_finite_differences():
    b = ModelBundle.create(NetConfig(**TINY), seed=1).to(torch.float64).eval()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64).requires_grad_(True)
    probe = torch.randn(1, 8, 16, generator=g, dtype=torch.float64)

    def f():
        return (decoder_forward(b.decoder, x) * probe).sum()

    assert max(check_gradient(f, x, 20, seed=0, h=1e-5)) < 1e-3


@pytest.mark.parametrize("head", ["flat", "pool"])
def test_decoder_heads(head):
    b = ModelBundle.create(NetConfig(decoder_head=head, positional_queries=head == "flat", **TINY), seed=0)
    x = torch.rand(2, 3, 16, 16)
    logits = decoder_forward(b.decoder, x)
    assert logits.shape == (2, 8, 16)
    # before training only the two codec classes of each position carry mass
    off = torch.ones(8, 16, dtype=torch.bool)
    off[torch.arange(8), torch.arange(8)] = False
    off[torch.arange(8), torch.arange(8) + 8] = False
    assert b.decoder.head.bias.reshape(8, 16)[off].max() < -5
    assert (b.encoder.fusions["0"].pos is not None) == (head == "flat")


def test_unknown_decoder_head():
    with pytest.raises(ValueError, match="decoder_head"):
        NetConfig(decoder_head="conv", **TINY)


def test_x_t_skip_coefficients():
    from diffwm.nets import SIGMA_DATA, DiffusionEncoder
    from diffwm import schedule as sch

    cfg = NetConfig(**TINY)
    enc = DiffusionEncoder(cfg)
    s = sch.make_schedule(cfg.T)
    for t in (1, 5, cfg.T):
        a = s.alpha_bar_at(t)
        # minimiser of E|c x_t - x0|^2 for x0 with variance SIGMA_DATA^2 independent of the noise
        c = a**0.5 * SIGMA_DATA**2 / (a * SIGMA_DATA**2 + (1 - a))
        assert float(enc.c_skip[t]) == pytest.approx(c, rel=1e-12)
    # at T=100 the first step is nearly noise free, so the skip almost copies x_t
    fine = DiffusionEncoder(NetConfig(**{**TINY, "T": 100}))
    assert float(fine.c_skip[1]) > 0.99


def test_x_t_skip_passes_input_through():
    b = ModelBundle.create(NetConfig(**TINY), seed=0)
    off = ModelBundle.create(NetConfig(x_t_skip=False, **TINY), seed=0)
    x_t, t, x_c, w = inputs(b.cfg)
    with torch.no_grad():
        diff = encoder_forward(b.encoder, x_t, t, x_c, w) - encoder_forward(off.encoder, x_t, t, x_c, w)
    torch.testing.assert_close(diff, b.encoder.c_skip[t].float()[:, None, None, None] * x_t)


def test_timestep_range_checked(bundle):
    x_t, _, x_c, w = inputs(bundle.cfg)
    for bad in (0, bundle.cfg.T + 1):
        with pytest.raises(ValueError, match="timesteps"):
            encoder_forward(bundle.encoder, x_t, bad, x_c, w)
