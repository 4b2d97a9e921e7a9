"""Benign distortion bank, the frozen reconstruction autoencoder, and the
differentiable surrogate face manipulation.

Images are ``(B, C, H, W)`` or ``(C, H, W)`` tensors in ``[-1, 1]``.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

log = logging.getLogger(__name__)

# kind -> (parameters with their reference settings, draws random numbers?)
KINDS: dict[str, tuple[dict[str, float], bool]] = {
    "Identity": ({}, False),
    "Resize": ({"p": 0.8}, False),
    "Dropout": ({"p": 0.6}, True),
    "GaussianNoise": ({"s": 0.1}, True),
    "SaltPepper": ({"p": 0.1}, True),
    "GaussianBlur": ({"k": 5, "s": 5.0}, False),
    "MedianBlur": ({"k": 5}, False),
    "Brightness": ({"f": 0.5}, False),
    "Contrast": ({"f": 0.5}, False),
    "Saturation": ({"f": 0.5}, False),
    "Hue": ({"f": 0.1}, False),
    "Jpeg": ({"Q": 50}, False),
    "Autoencoder": ({}, False),
    "SurrogateDeepfake": ({}, False),
}
_LOOKUP = {k.lower(): k for k in KINDS}
_LOOKUP.update({"jpegtest": "Jpeg", "gaussiannoise": "GaussianNoise", "saltpepper": "SaltPepper", "deepfake": "SurrogateDeepfake"})


class UnknownDistortionError(ValueError):
    def __init__(self, kind):
        super().__init__(f"unknown distortion kind {kind!r}; valid kinds: {', '.join(KINDS)}")


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        canon = _LOOKUP.get(str(self.kind).replace("_", "").replace("-", "").lower())
        if canon is None:
            raise UnknownDistortionError(self.kind)
        object.__setattr__(self, "kind", canon)
        required, _ = KINDS[canon]
        params = dict(self.params)
        unknown = set(params) - set(required)
        if unknown:
            raise ValueError(f"{canon} does not take parameters {sorted(unknown)}; expected {sorted(required)}")
        missing = set(required) - set(params)
        if missing:
            raise ValueError(f"{canon} is missing parameters {sorted(missing)}")
        object.__setattr__(self, "params", {k: params[k] for k in required})

    @classmethod
    def default(cls, kind: str, seed: int | None = None) -> "DistortionSpec":
        canon = _LOOKUP.get(kind.replace("_", "").replace("-", "").lower())
        if canon is None:
            raise UnknownDistortionError(kind)
        return cls(canon, dict(KINDS[canon][0]), seed)

    @property
    def label(self) -> str:
        if not self.params:
            return self.kind
        args = ",".join(f"{k}={_fmt(v)}" for k, v in self.params.items())
        return f"{self.kind}({args})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_config(cls, item) -> "DistortionSpec":
        """Accept ``"jpeg"``, ``{"jpeg": {"Q": 50}}`` or ``{"kind": ..., "params": ..., "seed": ...}``."""
        if isinstance(item, str):
            return cls.default(item)
        if isinstance(item, dict) and "kind" in item:
            kind = item["kind"]
            params = item.get("params")
            spec = cls.default(kind, item.get("seed"))
            return spec if params is None else cls(spec.kind, {**spec.params, **params}, item.get("seed"))
        if isinstance(item, dict) and len(item) == 1:
            (kind, params), = item.items()
            spec = cls.default(kind)
            return cls(spec.kind, {**spec.params, **(params or {})})
        raise ValueError(f"cannot parse distortion entry {item!r}")


def _fmt(v) -> str:
    return f"{v:g}"


def table2_bank(seed: int = 0) -> list[DistortionSpec]:
    """The benign distortions with the reference parameter settings."""
    names = ["Identity", "Resize", "Dropout", "GaussianNoise", "SaltPepper", "GaussianBlur",
             "MedianBlur", "Brightness", "Contrast", "Saturation", "Hue", "Jpeg"]
    return [DistortionSpec.default(n, seed=seed) for n in names]


# --- autoencoders ----------------------------------------------------------

@dataclass
class AutoencoderConfig:
    image_channels: int = 3
    base_channels: int = 32
    latent_channels: int = 8
    n_down: int = 2


class FrozenAutoencoder(nn.Module):
    """Small convolutional autoencoder standing in for a pretrained
    reconstruction model. ``tanh`` output keeps reconstructions in ``[-1, 1]``."""

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        cfg = cfg or AutoencoderConfig()
        self.cfg = cfg
        c = cfg.base_channels
        enc: list[nn.Module] = [nn.Conv2d(cfg.image_channels, c, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.n_down):
            enc += [nn.Conv2d(c, c, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(c, cfg.latent_channels, 1))
        dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, c, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.n_down):
            dec += [nn.ConvTranspose2d(c, c, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(c, cfg.image_channels, 3, padding=1))
        self.encode = nn.Sequential(*enc)
        self.decode = nn.Sequential(*dec)
        self.frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.decode(self.encode(x)))

    def freeze(self) -> "FrozenAutoencoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True):
        # a frozen model stays in inference mode
        return super().train(mode and not getattr(self, "frozen", False))

    def state(self) -> dict:
        return {"config": asdict(self.cfg), "weights": self.state_dict(), "frozen": self.frozen}

    @classmethod
    def from_state(cls, state: dict) -> "FrozenAutoencoder":
        ae = cls(AutoencoderConfig(**state["config"]))
        ae.load_state_dict(state["weights"])
        return ae.freeze() if state.get("frozen", True) else ae


class AutoencoderTrainingError(RuntimeError):
    pass


def _psnr01(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) / 2).pow(2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def pretrain_autoencoder(
    images: torch.Tensor,
    steps: int = 1500,
    seed: int = 0,
    cfg: AutoencoderConfig | None = None,
    batch_size: int = 32,
    lr: float = 2e-3,
    val_images: torch.Tensor | None = None,
    min_psnr: float = 25.0,
) -> FrozenAutoencoder:
    """Fit the autoencoder by MSE reconstruction, then freeze it.

    Raises :class:`AutoencoderTrainingError` (carrying the final loss) if the
    held-out reconstruction PSNR stays below ``min_psnr``.
    """
    if len(images) < 16:
        raise ValueError(f"autoencoder pretraining needs at least 16 images, got {len(images)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        ae = FrozenAutoencoder(cfg)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    ae.train()
    loss = torch.tensor(float("nan"))
    for _ in range(steps):
        idx = torch.randint(len(images), (min(batch_size, len(images)),), generator=gen)
        x = images[idx]
        loss = F.mse_loss(ae(x), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    ae.freeze()
    check = val_images if val_images is not None and len(val_images) else images
    with torch.no_grad():
        psnr = _psnr01(ae(check), check)
    log.info("autoencoder pretrained: final loss %.5f, held-out PSNR %.2f dB", loss.item(), psnr)
    if not psnr >= min_psnr:
        raise AutoencoderTrainingError(
            f"autoencoder did not converge: final loss {loss.item():.5f}, PSNR {psnr:.2f} dB < {min_psnr} dB"
        )
    return ae


@dataclass
class SurrogateConfig:
    color_gain: float = 0.08
    color_bias: float = 0.05
    warp_pixels: float = 0.75
    warp_grid: int = 4
    seed: int = 0


class SurrogateDeepfake(nn.Module):
    """Differentiable stand-in for a face manipulation model.

    A seeded smooth geometric warp and per-channel color shift are applied,
    then the result is regenerated by an independently pretrained
    autoencoder. Every stage is differentiable in the input.
    """

    def __init__(self, autoencoder: FrozenAutoencoder, cfg: SurrogateConfig | None = None):
        super().__init__()
        self.autoencoder = autoencoder
        self.cfg = cfg or SurrogateConfig()

    def perturbation(self, seed: int, shape, dtype=torch.float32):
        C, H, W = shape[-3:]
        cfg = self.cfg
        g = torch.Generator().manual_seed(int(seed))
        gain = 1 + cfg.color_gain * (2 * torch.rand(C, generator=g, dtype=torch.float64) - 1)
        bias = cfg.color_bias * (2 * torch.rand(C, generator=g, dtype=torch.float64) - 1)
        coarse = torch.randn(1, 2, cfg.warp_grid, cfg.warp_grid, generator=g, dtype=torch.float64)
        flow = F.interpolate(coarse, size=(H, W), mode="bicubic", align_corners=True)
        flow = flow / flow.abs().amax().clamp_min(1e-12) * cfg.warp_pixels
        ys, xs = torch.meshgrid(torch.linspace(-1, 1, H, dtype=torch.float64),
                                torch.linspace(-1, 1, W, dtype=torch.float64), indexing="ij")
        grid = torch.stack([xs + flow[0, 0] * 2 / W, ys + flow[0, 1] * 2 / H], dim=-1)[None]
        return gain.to(dtype), bias.to(dtype), grid.to(dtype)

    def forward(self, x: torch.Tensor, seed: int | None = None) -> torch.Tensor:
        return surrogate_deepfake(self, x, seed)

    def state(self) -> dict:
        return {"config": asdict(self.cfg), "autoencoder": self.autoencoder.state()}

    @classmethod
    def from_state(cls, state: dict) -> "SurrogateDeepfake":
        return cls(FrozenAutoencoder.from_state(state["autoencoder"]), SurrogateConfig(**state["config"]))


def surrogate_deepfake(model: SurrogateDeepfake, x: torch.Tensor, seed: int | None = None) -> torch.Tensor:
    unbatched = x.ndim == 3
    xb = x.unsqueeze(0) if unbatched else x
    seed = model.cfg.seed if seed is None else seed
    gain, bias, grid = model.perturbation(seed, xb.shape, xb.dtype)
    h = xb * gain[None, :, None, None] + bias[None, :, None, None]
    h = F.grid_sample(h, grid.expand(xb.shape[0], -1, -1, -1), mode="bilinear",
                      padding_mode="border", align_corners=True)
    out = model.autoencoder(h)
    return out[0] if unbatched else out


# --- benign distortions ------------------------------------------------------

def _to01(x):
    return (x + 1) / 2


def _from01(x):
    return x * 2 - 1


def _median_blur(x: torch.Tensor, k: int) -> torch.Tensor:
    pad = k // 2
    B, C, H, W = x.shape
    patches = F.unfold(F.pad(x, (pad, pad, pad, pad), mode="reflect"), k)
    return patches.view(B, C, k * k, H * W).median(dim=2).values.view(B, C, H, W)


def _jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    out = []
    for img in x:
        arr = (_to01(img).clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
        mode = "L" if arr.shape[2] == 1 else "RGB"
        buf = io.BytesIO()
        Image.fromarray(arr.squeeze(2) if mode == "L" else arr, mode).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        dec = np.asarray(Image.open(buf).convert(mode), dtype=np.float64) / 255.0
        if dec.ndim == 2:
            dec = dec[:, :, None]
        out.append(torch.from_numpy(dec).permute(2, 0, 1))
    return _from01(torch.stack(out).to(x.dtype))


def apply(spec: DistortionSpec, x_wm: torch.Tensor, x_co: torch.Tensor | None = None,
          autoencoder: FrozenAutoencoder | None = None, surrogate: SurrogateDeepfake | None = None) -> torch.Tensor:
    """Distort the watermarked image(s) ``x_wm``; ``x_co`` is the cover (used by Dropout)."""
    unbatched = x_wm.ndim == 3
    x = x_wm.unsqueeze(0) if unbatched else x_wm
    co = None
    if x_co is not None:
        if x_co.shape != x_wm.shape:
            raise ValueError(f"cover and watermarked shapes differ: {tuple(x_co.shape)} vs {tuple(x_wm.shape)}")
        co = x_co.unsqueeze(0) if unbatched else x_co
    p = spec.params
    gen = torch.Generator().manual_seed(0 if spec.seed is None else int(spec.seed))
    kind = spec.kind

    if kind == "Identity":
        y = x
    elif kind == "Resize":
        H, W = x.shape[-2:]
        small = (max(1, round(H * p["p"])), max(1, round(W * p["p"])))
        y = F.interpolate(F.interpolate(x, size=small, mode="bilinear", align_corners=False),
                          size=(H, W), mode="bilinear", align_corners=False)
    elif kind == "Dropout":
        if co is None:
            raise ValueError("Dropout needs the cover image x_co")
        keep = torch.rand((x.shape[0], 1, *x.shape[-2:]), generator=gen, dtype=torch.float64) < p["p"]
        y = torch.where(keep.to(x.device), x, co)
    elif kind == "GaussianNoise":
        y = x + p["s"] * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    elif kind == "SaltPepper":
        u = torch.rand((x.shape[0], 1, *x.shape[-2:]), generator=gen, dtype=torch.float64)
        y = torch.where(u < p["p"] / 2, torch.full_like(x, -1.0), x)
        y = torch.where((u >= p["p"] / 2) & (u < p["p"]), torch.ones_like(x), y)
    elif kind == "GaussianBlur":
        k = int(p["k"])
        y = TF.gaussian_blur(x, [k, k], [float(p["s"])] * 2)
    elif kind == "MedianBlur":
        y = _median_blur(x, int(p["k"]))
    elif kind in ("Brightness", "Contrast", "Saturation", "Hue"):
        fn = {"Brightness": TF.adjust_brightness, "Contrast": TF.adjust_contrast,
              "Saturation": TF.adjust_saturation, "Hue": TF.adjust_hue}[kind]
        y = _from01(fn(_to01(x).clamp(0, 1), p["f"]))
    elif kind == "Jpeg":
        y = _jpeg(x, int(p["Q"]))
    elif kind == "Autoencoder":
        if autoencoder is None:
            raise ValueError("Autoencoder distortion needs a pretrained autoencoder")
        y = autoencoder(x)
    elif kind == "SurrogateDeepfake":
        if surrogate is None:
            raise ValueError("SurrogateDeepfake distortion needs a surrogate model")
        y = surrogate_deepfake(surrogate, x, spec.seed)
    else:  # pragma: no cover - guarded by DistortionSpec
        raise UnknownDistortionError(kind)

    y = y.clamp(-1, 1)
    return y[0] if unbatched else y
