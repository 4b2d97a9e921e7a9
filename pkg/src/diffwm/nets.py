"""Diffusion encoder (conditional U-Net predicting x0), watermark decoder, and
model bundle persistence."""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import schedule as sch
from .cif import EmbeddingTable, FusionBlock, lookup
from .distortions import FrozenAutoencoder, SurrogateDeepfake

BUNDLE_FORMAT = "diffwm-bundle"
BUNDLE_VERSION = 1
HEAD_PRIOR_LOGIT = -8.0
# assumed std of images in [-1, 1] for the x_t skip
SIGMA_DATA = 0.5


class BundleError(RuntimeError):
    """Checkpoint could not be read."""


class IncompatibleBundleError(BundleError):
    """Checkpoint was written by an incompatible format version."""


@dataclass
class NetConfig:
    resolution: int = 32
    image_channels: int = 3
    L: int = 16
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 64
    time_dim: int = 128
    T: int = 100
    # "flat": linear map of the whole lowest-resolution feature map; "pool": global average first
    decoder_head: str = "flat"
    positional_queries: bool = True
    # add c_skip(t) * x_t to the network output (the best linear x0 estimate from x_t alone)
    x_t_skip: bool = True

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.decoder_head not in ("flat", "pool"):
            raise ValueError(f"decoder_head must be 'flat' or 'pool', got {self.decoder_head!r}")
        n_down = len(self.channel_mults) - 1
        if len(self.channel_mults) < 2:
            raise ValueError("the U-Net needs at least two resolution levels")
        if self.resolution % (2**n_down):
            raise ValueError(f"resolution {self.resolution} is not divisible by 2**{n_down}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def level_size(self, i: int) -> int:
        return self.resolution // 2**i


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """Sinusoidal features of ``t`` rescaled to the 1000-step reference range."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.double() * (1000.0 / T))[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        # per-block scale/shift from the timestep embedding
        self.film = nn.Linear(time_dim, 2 * c_out) if time_dim else None
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.film is not None:
            scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class DiffusionEncoder(nn.Module):
    """Conditional U-Net ``E(x_t, t, x_c, w) -> x0_hat``.

    The noisy image and the scaled cover are concatenated on the channel
    axis. Watermark features are fused by cross-attention at the two
    lowest-resolution levels of the contracting path.

    With ``x_t_skip`` the output is ``c_skip(t) * x_t + net(...)``, where
    ``c_skip`` is the linear least-squares x0 estimate from ``x_t`` for images
    of std ``SIGMA_DATA``. Near t=1 the prediction then starts from the
    almost clean input instead of having to rebuild it, which otherwise caps
    the PSNR of the final sampling step.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        n = len(chs)
        self.cif_levels = (n - 2, n - 1)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(2 * cfg.image_channels, chs[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(ResBlock(chs[i], chs[i], cfg.time_dim) for i in range(n))
        self.downsamples = nn.ModuleList(nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(n - 1))
        self.tables = nn.ModuleDict({str(i): EmbeddingTable(cfg.L, cfg.embed_dim) for i in self.cif_levels})
        self.fusions = nn.ModuleDict({
            str(i): FusionBlock(chs[i], cfg.embed_dim,
                                n_positions=cfg.level_size(i) ** 2 if cfg.positional_queries else None)
            for i in self.cif_levels
        })
        self.mid = ResBlock(chs[-1], chs[-1], cfg.time_dim)
        self.up_blocks = nn.ModuleList(ResBlock(2 * chs[i], chs[i], cfg.time_dim) for i in range(n))
        self.upsamples = nn.ModuleList(nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in range(n - 1))
        self.norm_out = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.image_channels, 3, padding=1)
        abar = sch.make_schedule(cfg.T).alpha_bar
        s2 = SIGMA_DATA**2
        c = torch.as_tensor(abar**0.5 * s2 / (abar * s2 + 1.0 - abar), dtype=torch.float64)
        # index by timestep; t=0 is never used
        self.register_buffer("c_skip", torch.cat([torch.ones(1, dtype=torch.float64), c]), persistent=False)

    def forward(self, x_t, t, x_c, w):
        return encoder_forward(self, x_t, t, x_c, w)


def encoder_forward(enc: DiffusionEncoder, x_t: torch.Tensor, t, x_c: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    cfg = enc.cfg
    if x_t.shape != x_c.shape:
        raise ValueError(f"x_t and x_c shapes differ: {tuple(x_t.shape)} vs {tuple(x_c.shape)}")
    if x_t.ndim != 4 or x_t.shape[1] != cfg.image_channels or x_t.shape[-1] != cfg.resolution:
        raise ValueError(
            f"expected images (B, {cfg.image_channels}, {cfg.resolution}, {cfg.resolution}), got {tuple(x_t.shape)}"
        )
    B = x_t.shape[0]
    w = torch.as_tensor(w).long()
    if w.ndim == 1:
        w = w.expand(B, -1)
    if w.shape != (B, cfg.L):
        raise ValueError(f"expected watermark of length L={cfg.L}, got shape {tuple(w.shape)}")
    t = torch.as_tensor(t, device=x_t.device).long().reshape(-1)
    if t.numel() == 1:
        t = t.expand(B)
    if t.shape != (B,) or int(t.min()) < 1 or int(t.max()) > cfg.T:
        raise ValueError(f"timesteps must be one per image in [1, {cfg.T}], got {t.tolist()}")
    temb = enc.time_mlp(timestep_embedding(t, cfg.time_dim, cfg.T).to(x_t.dtype))

    h = enc.conv_in(torch.cat([x_t, x_c], dim=1))
    skips = []
    n = len(enc.down_blocks)
    for i in range(n):
        h = enc.down_blocks[i](h, temb)
        if i in enc.cif_levels:
            h = enc.fusions[str(i)](h, lookup(enc.tables[str(i)], w))
        skips.append(h)
        if i < n - 1:
            h = enc.downsamples[i](h)
    h = enc.mid(h, temb)
    for i in reversed(range(n)):
        h = enc.up_blocks[i](torch.cat([h, skips[i]], dim=1), temb)
        if i > 0:
            h = F.interpolate(enc.upsamples[i - 1](h), scale_factor=2.0, mode="nearest")
    out = enc.conv_out(F.silu(enc.norm_out(h)))
    if cfg.x_t_skip:
        out = out + enc.c_skip[t].to(x_t.dtype)[:, None, None, None] * x_t
    return out


class WatermarkDecoder(nn.Module):
    """Contracting trunk of the encoder architecture (own weights) with a
    linear head at the lowest resolution producing ``L x 2L`` logits.

    The default flat head sees every spatial position of the lowest feature
    map; ``decoder_head="pool"`` averages over positions first.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        n = len(chs)
        self.conv_in = nn.Conv2d(cfg.image_channels, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(chs[i], chs[i]) for i in range(n))
        self.downsamples = nn.ModuleList(nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(n - 1))
        self.norm_out = nn.GroupNorm(_groups(chs[-1]), chs[-1])
        n_in = chs[-1] * (cfg.level_size(n - 1) ** 2 if cfg.decoder_head == "flat" else 1)
        self.head = nn.Linear(n_in, cfg.L * 2 * cfg.L)
        with torch.no_grad():
            # start with the codec's structure: only classes i and i+L are plausible at position i
            prior = torch.full((cfg.L, 2 * cfg.L), HEAD_PRIOR_LOGIT)
            idx = torch.arange(cfg.L)
            prior[idx, idx] = 0.0
            prior[idx, idx + cfg.L] = 0.0
            self.head.bias.copy_(prior.flatten())

    def forward(self, x):
        return decoder_forward(self, x)


def decoder_forward(dec: WatermarkDecoder, x: torch.Tensor) -> torch.Tensor:
    cfg = dec.cfg
    if x.ndim != 4 or x.shape[1] != cfg.image_channels or tuple(x.shape[-2:]) != (cfg.resolution, cfg.resolution):
        raise ValueError(
            f"decoder expects images (B, {cfg.image_channels}, {cfg.resolution}, {cfg.resolution}), "
            f"got {tuple(x.shape)}"
        )
    h = dec.conv_in(x)
    n = len(dec.blocks)
    for i in range(n):
        h = dec.blocks[i](h)
        if i < n - 1:
            h = dec.downsamples[i](h)
    h = F.silu(dec.norm_out(h))
    h = h.flatten(1) if cfg.decoder_head == "flat" else h.mean(dim=(2, 3))
    return dec.head(h).reshape(x.shape[0], cfg.L, 2 * cfg.L)


@dataclass
class ModelBundle:
    """Everything needed to embed and extract: trained encoder/decoder plus the
    frozen autoencoder and the surrogate manipulation used for guidance."""

    cfg: NetConfig
    encoder: DiffusionEncoder
    decoder: WatermarkDecoder
    autoencoder: FrozenAutoencoder | None = None
    surrogate: SurrogateDeepfake | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: NetConfig, seed: int = 0, **kwargs) -> "ModelBundle":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = DiffusionEncoder(cfg)
            dec = WatermarkDecoder(cfg)
        return cls(cfg=cfg, encoder=enc, decoder=dec, **kwargs)

    @property
    def L(self) -> int:
        return self.cfg.L

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def trained(self) -> bool:
        return int(self.metadata.get("step", 0)) > 0

    def eval(self) -> "ModelBundle":
        for m in (self.encoder, self.decoder, self.autoencoder, self.surrogate):
            if m is not None:
                m.eval()
        return self

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for m in (self.encoder, self.decoder, self.autoencoder, self.surrogate):
            if m is not None:
                m.to(dtype)
        return self

    def state(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "config": asdict(self.cfg),
            "encoder": self.encoder.state_dict(),
            "decoder": self.decoder.state_dict(),
            "autoencoder": None if self.autoencoder is None else self.autoencoder.state(),
            "surrogate": None if self.surrogate is None else self.surrogate.state(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_state(cls, state: dict) -> "ModelBundle":
        if not isinstance(state, dict) or state.get("format") != BUNDLE_FORMAT:
            raise BundleError("not a model bundle")
        if state.get("version") != BUNDLE_VERSION:
            raise IncompatibleBundleError(
                f"bundle format version {state.get('version')!r} is incompatible with this build "
                f"(expects {BUNDLE_VERSION})"
            )
        cfg = NetConfig(**state["config"])
        enc, dec = DiffusionEncoder(cfg), WatermarkDecoder(cfg)
        enc.load_state_dict(state["encoder"])
        dec.load_state_dict(state["decoder"])
        ae = None if state["autoencoder"] is None else FrozenAutoencoder.from_state(state["autoencoder"])
        sur = None if state["surrogate"] is None else SurrogateDeepfake.from_state(state["surrogate"])
        return cls(cfg, enc, dec, ae, sur, dict(state["metadata"]))


def atomic_torch_save(obj, path: str | os.PathLike) -> None:
    """Serialize to a sibling temp file and rename, so a failed write never
    clobbers an existing file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(obj, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def torch_load(path: str | os.PathLike) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of types for damaged archives
        raise BundleError(f"cannot read checkpoint {path}: {exc}") from exc


def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> None:
    atomic_torch_save(bundle.state(), path)


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    return ModelBundle.from_state(torch_load(path)).eval()
