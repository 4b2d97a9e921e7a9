"""Watermarked-image generation by DDIM sampling, with optional guidance from
a differentiable face manipulation model."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import schedule as sch
from .codec import encode_indices
from .distortions import surrogate_deepfake
from .nets import ModelBundle, decoder_forward, encoder_forward


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    cond: bool = False
    s: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("guidance scale must be >= 0")


def watermark_log_prob(logits: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Sum over positions (and batch) of ``log softmax(logits)[i, i + w_i*L]``."""
    target = encode_indices(w).expand(logits.shape[:-1])
    return torch.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).sum()


def guidance_gradient(bundle: ModelBundle, x_t: torch.Tensor, t, x_c: torch.Tensor, w: torch.Tensor,
                      surrogate_seed: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient w.r.t. ``x_t`` of the watermark log-probability after the
    manipulation: encoder -> surrogate -> decoder. ``x_c`` is held constant.

    Returns ``(grad, x0_hat)`` so the caller can reuse the prediction.
    """
    if bundle.surrogate is None:
        raise SamplingError("guidance requested but the bundle has no surrogate manipulation model")
    with torch.enable_grad():
        x = x_t.detach().requires_grad_(True)
        x0_hat = encoder_forward(bundle.encoder, x, t, x_c, w)
        logits = decoder_forward(bundle.decoder, surrogate_deepfake(bundle.surrogate, x0_hat, surrogate_seed))
        objective = watermark_log_prob(logits, w)
        (grad,) = torch.autograd.grad(objective, x)
    return grad, x0_hat.detach()


@torch.no_grad()
def sample(bundle: ModelBundle, x_co: torch.Tensor, w: torch.Tensor, cfg: SampleConfig,
           return_trajectory: bool = False):
    """Generate watermarked image(s) for cover(s) ``x_co`` and bits ``w``.

    ``x_co`` may be ``(C, H, W)`` or a batch; ``w`` is ``(L,)`` or ``(B, L)``.
    Output is clamped to ``[-1, 1]``.
    """
    if not bundle.trained:
        raise SamplingError("model bundle is untrained (step 0); train it first")
    ncfg = bundle.cfg
    unbatched = x_co.ndim == 3
    xb = x_co.unsqueeze(0) if unbatched else x_co
    if tuple(xb.shape[1:]) != (ncfg.image_channels, ncfg.resolution, ncfg.resolution):
        raise ValueError(f"cover must be {ncfg.image_channels}x{ncfg.resolution}x{ncfg.resolution}, got {tuple(x_co.shape)}")
    w = torch.as_tensor(w).long()
    if w.shape[-1] != ncfg.L:
        raise ValueError(f"watermark has {w.shape[-1]} bits, expected L={ncfg.L}")
    if cfg.cond and bundle.surrogate is None:
        raise SamplingError("guidance requested but the bundle has no surrogate manipulation model")

    s = sch.make_schedule(ncfg.T)
    g = torch.Generator().manual_seed(int(cfg.seed))
    x = torch.randn(xb.shape, generator=g, dtype=torch.float32).to(xb.dtype)
    traj = [x]
    for t in range(s.T, 0, -1):
        x_c = float(sch.condition_scale_sample(t, s)) * xb
        if cfg.cond:
            grad, x0_hat = guidance_gradient(bundle, x, t, x_c, w)
            if not torch.isfinite(grad).all():
                raise SamplingError(f"non-finite guidance gradient at t={t} (seed {cfg.seed})")
        else:
            x0_hat = encoder_forward(bundle.encoder, x, t, x_c, w)
        eps = sch.noise_from_x0(x, x0_hat, t, s)
        if cfg.cond:
            eps = eps - cfg.s * float(sch.condition_scale_train(t, s)) * grad
        x = sch.ddim_step(x, eps, t, s)
        if return_trajectory:
            traj.append(x)
    out = x.clamp(-1, 1)
    out = out[0] if unbatched else out
    return (out, traj) if return_trajectory else out
