"""Training objective: quality (MSE + weighted perceptual), recovery
(cross-entropy over the 2L embedding-index classes) and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .codec import encode_indices
from .metrics import ssim_map

PerceptualMetric = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta_initial: float = 10.0
    beta_final: float = 1.0
    beta_switch_step: int = 1000

    def __post_init__(self):
        if min(self.alpha, self.beta_initial, self.beta_final) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beta_switch_step < 0:
            raise ValueError("beta_switch_step must be >= 0")

    def beta_at(self, step: int) -> float:
        return self.beta_initial if step < self.beta_switch_step else self.beta_final


class StructuralDissimilarity:
    """Deterministic perceptual proxy: mean of ``(1 - SSIM) / 2`` over a small
    image pyramid. Scales smaller than the window are skipped."""

    name = "ms-dssim"

    def __init__(self, scales: int = 3, window: int = 7, sigma: float = 1.5):
        self.scales = scales
        self.window = window
        self.sigma = sigma

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        x, y = (a + 1) / 2, (b + 1) / 2
        terms = []
        for s in range(self.scales):
            if min(x.shape[-2:]) < self.window:
                break
            terms.append((1 - ssim_map(x, y, self.window, self.sigma).mean()) / 2)
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        if not terms:
            raise ValueError(f"images {tuple(a.shape[-2:])} are smaller than the perceptual window")
        return torch.stack(terms).mean()


def quality_loss(x0_hat: torch.Tensor, x0: torch.Tensor, alpha: float = 0.1,
                 perceptual: PerceptualMetric | None = None) -> torch.Tensor:
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    loss = F.mse_loss(x0_hat, x0)
    if alpha:
        perceptual = perceptual or StructuralDissimilarity()
        loss = loss + alpha * perceptual(x0_hat, x0)
    return loss


def recovery_loss(logits: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of each position's ``2L``-way logits against the index
    ``i + w_i*L``, averaged over positions (and batch)."""
    target = encode_indices(w)
    L = target.shape[-1]
    if logits.shape[-2:] != (L, 2 * L) or logits.shape[:-2] != target.shape[:-1]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match watermark {tuple(target.shape)}")
    return F.cross_entropy(logits.reshape(-1, 2 * L), target.reshape(-1))


def total_loss(quality: torch.Tensor, recovery: torch.Tensor, step: int, weights: LossWeights) -> torch.Tensor:
    if step < 0:
        raise ValueError("step must be >= 0")
    return quality + weights.beta_at(step) * recovery
