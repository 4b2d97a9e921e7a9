"""Image quality metrics.

Inputs are images in ``[-1, 1]``; both metrics rescale to ``[0, 1]`` first,
so PSNR uses a peak of 1 on the rescaled data (equivalently 2 on the raw
range). SSIM is the single-scale Wang et al. index with an 11x11 Gaussian
window (sigma 1.5), K1=0.01, K2=0.03, data range 1, population statistics,
averaged over the valid (unpadded) window positions and channels. It is not
clipped, so strongly anti-correlated images score below zero.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float | torch.Tensor:
    """PSNR in dB; ``math.inf`` for identical images. Batched input gives one value per image."""
    _check(a, b)
    d = ((a.double() - b.double()) / 2).pow(2)
    mse = d.mean() if a.ndim == 3 else d.flatten(1).mean(1)
    out = 10 * torch.log10(1.0 / mse)  # inf where mse == 0
    return float(out) if out.ndim == 0 else out


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_map(x: torch.Tensor, y: torch.Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Per-position SSIM of ``[0, 1]`` images ``(B, C, H, W)``; differentiable."""
    C = x.shape[1]
    if min(x.shape[-2:]) < window:
        raise ValueError(f"images of size {tuple(x.shape[-2:])} are smaller than the {window}x{window} window")
    k = gaussian_window(window, sigma, x.dtype).to(x.device).expand(C, 1, window, window)

    def filt(z):
        return F.conv2d(z, k, groups=C)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(a: torch.Tensor, b: torch.Tensor) -> float | torch.Tensor:
    """Mean SSIM between ``[-1, 1]`` images; per-image values for batches."""
    _check(a, b)
    unbatched = a.ndim == 3
    x = (a.double() + 1) / 2
    y = (b.double() + 1) / 2
    if unbatched:
        x, y = x[None], y[None]
    out = ssim_map(x, y).flatten(1).mean(1)
    return float(out[0]) if unbatched else out


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"
