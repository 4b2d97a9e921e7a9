"""Diffusion-time algebra: schedule construction, forward noising and DDIM.

Timesteps are 1-based (``1..T``). ``alpha_bar_at(0)`` is 1 by convention so
that the last DDIM update (t=1) lands exactly on the model's prediction.
Schedule coefficients are kept in float64; image arithmetic follows the dtype
of the tensors passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

REFERENCE_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02


def reference_alpha_bar() -> np.ndarray:
    """Cumulative products of the 1000-step linear beta schedule (index 0 is step 1)."""
    betas = np.linspace(BETA_START, BETA_END, REFERENCE_STEPS, dtype=np.float64)
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    # alpha_bar with the t=0 entry prepended; index directly by timestep
    _abar: np.ndarray = field(repr=False, compare=False)

    alpha_bar_0 = 1.0

    def check_t(self, t) -> None:
        tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.T:
            raise ValueError(f"timestep out of range [1, {self.T}]: {t!r}")

    def alpha_bar_at(self, t) -> np.ndarray | float:
        """alpha_bar for timestep(s) ``t`` in ``0..T`` (0 gives exactly 1)."""
        tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if tt.min() < 0 or tt.max() > self.T:
            raise ValueError(f"timestep out of range [0, {self.T}]: {t!r}")
        out = self._abar[tt]
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"T": self.T}


def make_schedule(T: int) -> NoiseSchedule:
    """Compress the reference 1000-step linear schedule to ``T`` steps.

    alpha_bar is resampled at ``T`` evenly spaced reference steps ending at
    step 1000, so the terminal noise level is the same for every ``T``. The
    per-step betas are recovered from consecutive ratios.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool):
        raise TypeError(f"T must be an integer, got {type(T).__name__}")
    if not 1 <= T <= REFERENCE_STEPS:
        raise ValueError(f"T must lie in [1, {REFERENCE_STEPS}], got {T}")
    ref = reference_alpha_bar()
    steps = np.round(np.linspace(REFERENCE_STEPS / T, REFERENCE_STEPS, T)).astype(np.int64)
    resampled = np.concatenate([[1.0], ref[steps - 1]])
    beta = 1.0 - resampled[1:] / resampled[:-1]
    # rebuild from the betas so the product identity holds exactly; for tiny T
    # (beta close to 1) this moves alpha_bar by ~1e-12 relative
    alpha_bar = np.cumprod(1.0 - beta)
    abar = np.concatenate([[1.0], alpha_bar])
    alpha_bar.setflags(write=False)
    beta.setflags(write=False)
    abar.setflags(write=False)
    return NoiseSchedule(T=int(T), beta=beta, alpha_bar=alpha_bar, _abar=abar)


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    """Broadcast per-sample (or scalar) coefficients against an image batch."""
    c = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype, device=like.device)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    s.check_t(t)
    abar = s.alpha_bar_at(t)
    return _coef(np.sqrt(abar), x0) * x0 + _coef(np.sqrt(1.0 - abar), x0) * eps


def noise_from_x0(x_t: torch.Tensor, x0_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward noising for the noise given an x0 estimate."""
    s.check_t(t)
    abar = np.asarray(s.alpha_bar_at(t))
    return _coef(1.0 / np.sqrt(1.0 - abar), x_t) * x_t - _coef(np.sqrt(abar / (1.0 - abar)), x_t) * x0_hat


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update x_t -> x_{t-1}."""
    s.check_t(t)
    tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    abar_t = np.asarray(s.alpha_bar_at(tt))
    abar_prev = np.asarray(s.alpha_bar_at(tt - 1))
    x0_pred = (x_t - _coef(np.sqrt(1.0 - abar_t), x_t) * eps_hat) / _coef(np.sqrt(abar_t), x_t)
    return _coef(np.sqrt(abar_prev), x_t) * x0_pred + _coef(np.sqrt(1.0 - abar_prev), x_t) * eps_hat


def condition_scale_train(t, s: NoiseSchedule):
    """Facial-condition scale used in training: sqrt(1 - abar_t)."""
    s.check_t(t)
    return np.sqrt(1.0 - s.alpha_bar_at(t))


def condition_scale_sample(t, s: NoiseSchedule):
    """Facial-condition scale used in sampling: sqrt(1 - abar_{t-1})."""
    s.check_t(t)
    tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    return np.sqrt(1.0 - s.alpha_bar_at(tt - 1))
