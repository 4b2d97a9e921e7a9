import pytest
import torch

from diffwm.distortions import (KINDS, AutoencoderConfig, DistortionSpec, FrozenAutoencoder, SurrogateDeepfake,
                                UnknownDistortionError, apply, surrogate_deepfake, table2_bank)
from diffwm.metrics import psnr
from gradcheck import check_gradient

TABLE2_LABELS = [
    "Identity", "Resize(p=0.8)", "Dropout(p=0.6)", "GaussianNoise(s=0.1)", "SaltPepper(p=0.1)",
    "GaussianBlur(k=5,s=5)", "MedianBlur(k=5)", "Brightness(f=0.5)", "Contrast(f=0.5)",
    "Saturation(f=0.5)", "Hue(f=0.1)", "Jpeg(Q=50)",
]


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    ae = FrozenAutoencoder(AutoencoderConfig(base_channels=8, latent_channels=4)).freeze()
    torch.manual_seed(1)
    sur = SurrogateDeepfake(FrozenAutoencoder(AutoencoderConfig(base_channels=8, latent_channels=4)).freeze())
    return ae, sur


@pytest.fixture(scope="module")
def images():
    g = torch.Generator().manual_seed(3)
    co = torch.rand(2, 3, 32, 32, generator=g) * 2 - 1
    wm = (co + 0.05 * torch.randn(co.shape, generator=g)).clamp(-1, 1)
    return wm, co


def test_bank_labels():
    bank = table2_bank()
    assert [s.label for s in bank] == TABLE2_LABELS
    assert len({s.kind for s in bank}) == 12


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_shape_range_and_seed(kind, models, images):
    ae, sur = models
    wm, co = images
    spec = DistortionSpec.default(kind, seed=5)
    out = apply(spec, wm, co, autoencoder=ae, surrogate=sur)
    assert out.shape == wm.shape and out.dtype == wm.dtype
    assert out.min() >= -1 and out.max() <= 1
    assert torch.equal(out, apply(spec, wm, co, autoencoder=ae, surrogate=sur))
    single = apply(spec, wm[0], co[0], autoencoder=ae, surrogate=sur)
    assert single.shape == wm[0].shape


def test_identity_bit_exact(images):
    wm, _ = images
    assert torch.equal(apply(DistortionSpec.default("Identity"), wm), wm)


def test_stochastic_kinds_depend_on_seed(images):
    wm, co = images
    for kind in ("Dropout", "GaussianNoise", "SaltPepper"):
        a = apply(DistortionSpec.default(kind, seed=1), wm, co)
        b = apply(DistortionSpec.default(kind, seed=2), wm, co)
        assert not torch.equal(a, b), kind


def test_dropout_extremes(images):
    wm, co = images
    assert torch.equal(apply(DistortionSpec("Dropout", {"p": 1.0}), wm, co), wm)
    assert torch.equal(apply(DistortionSpec("Dropout", {"p": 0.0}), wm, co), co)
    with pytest.raises(ValueError):
        apply(DistortionSpec.default("Dropout"), wm)


def test_gaussian_noise_statistics():
    x = torch.zeros(1, 3, 128, 128, dtype=torch.float64)
    out = apply(DistortionSpec.default("GaussianNoise", seed=0), x)
    assert float(out.std()) == pytest.approx(0.1, rel=0.03)
    assert abs(float(out.mean())) < 0.005


def test_salt_pepper_fraction():
    x = torch.zeros(1, 3, 128, 128)
    out = apply(DistortionSpec.default("SaltPepper", seed=0), x)
    frac = float((out.abs() == 1).all(dim=1).double().mean())
    assert frac == pytest.approx(0.1, abs=0.01)


def test_jpeg_quality_ordering(images):
    wm, _ = images
    q100 = apply(DistortionSpec("Jpeg", {"Q": 100}), wm)
    q50 = apply(DistortionSpec("Jpeg", {"Q": 50}), wm)
    assert (psnr(q100, wm) > psnr(q50, wm)).all()


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(UnknownDistortionError, match="Resize"):
        DistortionSpec.default("Crop")
    with pytest.raises(ValueError):
        DistortionSpec("Resize", {"q": 0.5})


def test_from_config_forms():
    assert DistortionSpec.from_config("jpeg").label == "Jpeg(Q=50)"
    assert DistortionSpec.from_config({"Resize": {"p": 0.5}}).label == "Resize(p=0.5)"
    spec = DistortionSpec.from_config({"kind": "GaussianNoise", "params": {"s": 0.2}, "seed": 3})
    assert spec.seed == 3 and spec.params == {"s": 0.2}


def test_autoencoder_is_frozen(models):
    ae, _ = models
    assert all(not p.requires_grad for p in ae.parameters())
    ae.train()
    assert not ae.training
    before = {k: v.clone() for k, v in ae.state_dict().items()}
    x = torch.rand(1, 3, 16, 16, requires_grad=True)
    ae(x).sum().backward()
    assert x.grad is not None
    assert all(torch.equal(before[k], v) for k, v in ae.state_dict().items())


def test_autoencoder_state_round_trip(models, images):
    ae, _ = models
    clone = FrozenAutoencoder.from_state(ae.state())
    assert torch.equal(clone(images[0]), ae(images[0]))


def test_surrogate_deterministic_and_seeded(models, images):
    _, sur = models
    wm, _ = images
    assert torch.equal(surrogate_deepfake(sur, wm), surrogate_deepfake(sur, wm))
    assert not torch.equal(surrogate_deepfake(sur, wm, seed=1), surrogate_deepfake(sur, wm, seed=2))
    clone = SurrogateDeepfake.from_state(sur.state())
    assert torch.equal(clone(wm), sur(wm))


def test_surrogate_gradient_matches_finite_differences(models):
    _, sur = models
    sur64 = SurrogateDeepfake.from_state(sur.state())
    sur64.autoencoder.double()
    g = torch.Generator().manual_seed(0)
    x = (torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64) * 1.6 - 0.8).requires_grad_(True)
    probe = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)

    def f():
        return (surrogate_deepfake(sur64, x) * probe).sum()

    # untrained weights give gradients near 1e-7, so a smaller step drowns in roundoff
    assert max(check_gradient(f, x, 20, seed=0, h=1e-4)) < 1e-3
