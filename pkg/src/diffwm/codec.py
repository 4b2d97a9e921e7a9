"""Watermark bits <-> positional-bit embedding indices <-> decoder logits.

Position ``i`` carrying bit ``b`` maps to index ``i + b*L``, so every
(position, bit) pair owns one of ``2L`` classes. Extraction compares only the
two classes valid for a position; ties resolve to 0.
"""

from __future__ import annotations

import numpy as np
import torch


def _as_bits(w) -> torch.Tensor:
    bits = torch.as_tensor(w)
    if bits.ndim == 0 or bits.shape[-1] == 0:
        raise ValueError("watermark must contain at least one bit")
    if not torch.all((bits == 0) | (bits == 1)):
        raise ValueError("watermark bits must be 0 or 1")
    return bits.long()


def encode_indices(w) -> torch.Tensor:
    """Indices ``i + w_i * L``; accepts ``(L,)`` or batched ``(B, L)`` bits."""
    bits = _as_bits(w)
    L = bits.shape[-1]
    return torch.arange(L, device=bits.device) + bits * L


def decode_bits(e) -> torch.Tensor:
    """Exact inverse of :func:`encode_indices`."""
    idx = torch.as_tensor(e).long()
    L = idx.shape[-1]
    offset = idx - torch.arange(L, device=idx.device)
    valid = (offset == 0) | (offset == L)
    if not torch.all(valid):
        bad = torch.nonzero(~valid)[0].tolist()
        raise ValueError(f"invalid embedding index at position {bad}: {idx[tuple(bad)].item()} (L={L})")
    return offset // L


def bit_logits(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather the (bit=0, bit=1) logits per position from ``(..., L, 2L)`` scores."""
    L = logits.shape[-2]
    if logits.shape[-1] != 2 * L:
        raise ValueError(f"logits must have shape (..., L, 2L); got {tuple(logits.shape)}")
    pos = torch.arange(L, device=logits.device)
    return logits[..., pos, pos], logits[..., pos, pos + L]


def logits_to_bits(logits: torch.Tensor) -> torch.Tensor:
    """Restricted two-class argmax per position (ties -> 0)."""
    logits = torch.as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise ValueError("decoder logits contain non-finite values")
    zero, one = bit_logits(logits)
    return (one > zero).long()


def bit_confidence(logits: torch.Tensor) -> torch.Tensor:
    """Probability of the decoded bit under the two-class softmax per position."""
    zero, one = bit_logits(logits)
    p_one = torch.sigmoid(one - zero)
    return torch.where(one > zero, p_one, 1.0 - p_one)


def ber(w_hat, w) -> float | torch.Tensor:
    """Bit error rate in percent. Batched inputs return one value per row."""
    a, b = _as_bits(w_hat), _as_bits(w)
    if a.shape != b.shape:
        raise ValueError(f"watermark lengths differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    rate = (a != b).double().mean(dim=-1) * 100.0
    return float(rate) if rate.ndim == 0 else rate


# --- text formats used on the command line -------------------------------

def parse_bits(text: str, L: int | None = None) -> torch.Tensor:
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"watermark must be a string of '0'/'1' characters, got {text!r}")
    if L is not None and len(text) != L:
        raise ValueError(f"watermark has {len(text)} bits, expected L={L}")
    return torch.tensor([int(c) for c in text], dtype=torch.long)


def format_bits(w) -> str:
    return "".join(str(int(b)) for b in _as_bits(w).flatten().tolist())


def random_bits(L: int, seed: int, n: int | None = None) -> torch.Tensor:
    """Reproducible uniform bits from an integer seed."""
    rng = np.random.default_rng(seed)
    shape = (L,) if n is None else (n, L)
    return torch.from_numpy(rng.integers(0, 2, size=shape)).long()
