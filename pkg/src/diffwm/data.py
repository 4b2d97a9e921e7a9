"""Image I/O, dataset ingestion and a procedural toy-face corpus."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


def load_image(path: str | os.PathLike, resolution: int | None = None) -> torch.Tensor:
    """Decode an image file to a ``(3, H, W)`` float32 tensor in ``[-1, 1]``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return ((x.detach().double().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_image(x: torch.Tensor, path: str | os.PathLike) -> None:
    """Write a ``(3, H, W)`` ``[-1, 1]`` tensor losslessly (PNG)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit pixels, as writing a PNG would."""
    return (((x.clamp(-1, 1) + 1) * 127.5).round() / 127.5 - 1.0).to(x.dtype)


@dataclass
class Dataset:
    train: torch.Tensor
    val: torch.Tensor
    train_names: list[str] = field(default_factory=list)
    val_names: list[str] = field(default_factory=list)
    skipped: int = 0


def ingest_dataset(path: str | os.PathLike, resolution: int, split_seed: int = 0,
                   val_fraction: float = 0.1) -> Dataset:
    """Decode every readable image under ``path`` and split it deterministically."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    images, names, skipped = [], [], 0
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        try:
            images.append(load_image(f, resolution))
            names.append(str(f.relative_to(root)))
        except (UnidentifiedImageError, OSError, ValueError):
            skipped += 1
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, root)
    if not images:
        raise DatasetError(f"no readable images in {root}")
    order = np.random.default_rng(split_seed).permutation(len(images))
    n_val = int(round(len(images) * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    stack = torch.stack(images)
    return Dataset(
        train=stack[torch.from_numpy(train_idx)],
        val=stack[torch.from_numpy(val_idx)],
        train_names=[names[i] for i in train_idx],
        val_names=[names[i] for i in val_idx],
        skipped=skipped,
    )


# --- procedural faces ------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    return u * u + v * v


def _soft(d, edge=0.08):
    return np.clip((1.0 - d) / edge, 0.0, 1.0)


def synth_face(rng: np.random.Generator, size: int = 32, supersample: int = 4) -> np.ndarray:
    """One ``size x size`` RGB uint8 cartoon face with randomized geometry and colors."""
    n = size * supersample
    yy, xx = np.mgrid[0:n, 0:n] / n
    bg_a, bg_b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ramp = (yy * np.cos(rng.uniform(0, np.pi)) + xx * np.sin(rng.uniform(0, np.pi)))[..., None]
    img = bg_a * (1 - ramp) + bg_b * ramp

    cx, cy = 0.5 + rng.normal(0, 0.03), 0.54 + rng.normal(0, 0.03)
    rx, ry = rng.uniform(0.26, 0.34), rng.uniform(0.32, 0.40)
    tilt = rng.normal(0, 0.12)
    skin = np.array([0.95, 0.78, 0.62]) * rng.uniform(0.45, 1.05) + rng.normal(0, 0.03, 3)
    hair = rng.uniform(0.0, 0.6, 3) * rng.uniform(0.3, 1.0)

    head = _soft(_ellipse(yy, xx, cy, cx, ry, rx, tilt), 0.06)[..., None]
    hair_mask = _soft(_ellipse(yy, xx, cy - ry * rng.uniform(0.25, 0.45), cx, ry * 0.85, rx * 1.12, tilt), 0.06)
    hair_mask = (hair_mask * (yy < cy - ry * rng.uniform(0.1, 0.35)))[..., None]
    shade = 1.0 - 0.25 * np.clip(_ellipse(yy, xx, cy, cx, ry, rx, tilt), 0, 1)[..., None]
    img = img * (1 - head) + skin * shade * head
    img = img * (1 - hair_mask) + hair * hair_mask

    eye_dx, eye_y = rx * rng.uniform(0.35, 0.5), cy - ry * rng.uniform(0.05, 0.22)
    eye_r = rng.uniform(0.035, 0.055)
    iris = rng.uniform(0.0, 0.5, 3)
    for sgn in (-1, 1):
        ex = cx + sgn * eye_dx
        white = _soft(_ellipse(yy, xx, eye_y, ex, eye_r * 0.7, eye_r * 1.3, tilt), 0.2)[..., None]
        pupil = _soft(_ellipse(yy, xx, eye_y, ex + rng.normal(0, 0.006), eye_r * 0.55, eye_r * 0.55), 0.2)[..., None]
        brow = _soft(_ellipse(yy, xx, eye_y - eye_r * 1.8, ex, eye_r * 0.3, eye_r * 1.5, tilt + sgn * rng.normal(0, 0.2)), 0.3)[..., None]
        img = img * (1 - white) + 0.95 * white
        img = img * (1 - pupil) + iris * pupil
        img = img * (1 - brow) + hair * 0.8 * brow

    nose = _soft(_ellipse(yy, xx, cy + ry * 0.12, cx, ry * 0.12, rx * 0.08), 0.4)[..., None]
    img = img * (1 - 0.25 * nose)
    my, mw = cy + ry * rng.uniform(0.42, 0.55), rx * rng.uniform(0.3, 0.5)
    smile = rng.uniform(-0.04, 0.06)
    mouth_d = _ellipse(yy - smile * ((xx - cx) / mw) ** 2, xx, my, cx, rng.uniform(0.012, 0.03), mw)
    mouth = _soft(mouth_d, 0.3)[..., None]
    lips = np.array([0.75, 0.2, 0.25]) * rng.uniform(0.6, 1.0)
    img = img * (1 - mouth) + lips * mouth

    img = img + rng.normal(0, 0.01, img.shape)
    img = np.clip(img, 0, 1)
    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return (img * 255).round().astype(np.uint8)


def write_toy_faces(out_dir: str | os.PathLike, n: int = 320, size: int = 32, seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        p = out / f"face_{i:05d}.png"
        Image.fromarray(synth_face(rng, size)).save(p, format="PNG")
        paths.append(p)
    return paths
