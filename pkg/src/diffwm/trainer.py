"""Joint training of the diffusion encoder and watermark decoder.

Randomness is counter based: every draw comes from a generator seeded by
``(root seed, stream name, step)``. Resuming therefore only needs the step
counter, and each stream (data order, timesteps, noise, watermarks,
parameter init) can be varied on its own.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import schedule as sch
from .data import Dataset, ingest_dataset
from .distortions import FrozenAutoencoder, SurrogateDeepfake
from .losses import LossWeights, StructuralDissimilarity, quality_loss, recovery_loss, total_loss
from .nets import ModelBundle, NetConfig, atomic_torch_save, decoder_forward, encoder_forward, save_bundle, torch_load

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "beta", "t_mean", "quality", "recovery", "total"]
CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


def substream(seed: int, name: str, counter: int = 0) -> torch.Generator:
    """Independent generator for a named stream at a given counter value."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(counter)])
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs/train"
    autoencoder: str = ""
    surrogate: str = ""
    resolution: int = 32
    L: int = 16
    T: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    # "constant", or "cosine": decay from lr to 0 over `steps`
    lr_schedule: str = "constant"
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    steps: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    split_seed: int = 0
    val_fraction: float = 0.1
    checkpoint_interval: int = 500
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 64
    decoder_head: str = "flat"
    positional_queries: bool = True
    x_t_skip: bool = True
    detach_ae_gap: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        self.channel_mults = tuple(self.channel_mults)
        if self.resolution not in (16, 32, 64, 128):
            raise ValueError(f"resolution must be one of 32, 64, 128 (16 for tests), got {self.resolution}")
        for name in ("L", "T", "batch_size", "steps", "checkpoint_interval", "base_channels", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.decoder_head not in ("flat", "pool"):
            raise ValueError(f"decoder_head must be 'flat' or 'pool', got {self.decoder_head!r}")

    def net_config(self) -> NetConfig:
        return NetConfig(resolution=self.resolution, L=self.L, T=self.T, base_channels=self.base_channels,
                         channel_mults=self.channel_mults, embed_dim=self.embed_dim,
                         decoder_head=self.decoder_head, positional_queries=self.positional_queries,
                         x_t_skip=self.x_t_skip)

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> torch.Tensor:
    """Indices of the batch for ``step``: a fresh seeded permutation per epoch, last partial batch dropped."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, j = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=substream(seed, "data", epoch))
    return perm[j * bs:(j + 1) * bs]


def train_step(bundle: ModelBundle, optimizer: torch.optim.Optimizer, x0: torch.Tensor, step: int,
               cfg: TrainConfig, s: sch.NoiseSchedule, perceptual=None) -> dict[str, float]:
    """One iteration of the training algorithm on a batch of clean images."""
    if bundle.autoencoder is None:
        raise ValueError("training needs a pretrained frozen autoencoder in the bundle")
    B = x0.shape[0]
    t = torch.randint(1, s.T + 1, (B,), generator=substream(cfg.seed, "t", step))
    eps = torch.randn(x0.shape, generator=substream(cfg.seed, "eps", step), dtype=x0.dtype)
    w = torch.randint(0, 2, (B, cfg.L), generator=substream(cfg.seed, "w", step))
    x_t = sch.forward_noise(x0, t, eps, s)
    x_c = sch._coef(sch.condition_scale_train(t, s), x0) * x0

    bundle.encoder.train()
    bundle.decoder.train()
    x0_hat = encoder_forward(bundle.encoder, x_t, t, x_c, w)
    if cfg.detach_ae_gap:
        with torch.no_grad():
            gap = bundle.autoencoder(x0_hat.detach()) - x0_hat.detach()
        reconstructed = x0_hat + gap
    else:
        reconstructed = bundle.autoencoder(x0_hat)
    logits = decoder_forward(bundle.decoder, reconstructed)

    q = quality_loss(x0_hat, x0, cfg.weights.alpha, perceptual)
    r = recovery_loss(logits, w)
    total = total_loss(q, r, step, cfg.weights)
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss at step {step} (t drawn: {t.tolist()}, seed {cfg.seed}): "
            f"quality={q.item()}, recovery={r.item()}"
        )
    for group in optimizer.param_groups:
        group["lr"] = lr_at(cfg, step)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "step": step,
        "beta": cfg.weights.beta_at(step),
        "t_mean": float(t.double().mean()),
        "quality": q.item(),
        "recovery": r.item(),
        "total": total.item(),
    }


def _write_log(path: Path, rows: list[dict]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_COLUMNS})
    os.replace(tmp, path)


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def load_frozen(path: str, what: str) -> dict:
    if not path:
        raise FileNotFoundError(f"no {what} configured; run `diffwm pretrain-ae` first and set the path")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} file {path} not found; run `diffwm pretrain-ae` first")
    return torch_load(path)


def train(cfg: TrainConfig, resume: bool = False, stop_at: int | None = None,
          dataset: Dataset | None = None, autoencoder: FrozenAutoencoder | None = None,
          surrogate: SurrogateDeepfake | None = None) -> ModelBundle:
    """Run training to ``cfg.steps`` (or ``stop_at``), checkpointing to ``cfg.out_dir``.

    Writes ``checkpoint.pt`` every ``checkpoint_interval`` steps, and on
    completion ``model.pt`` plus the per-step ``train_log.csv``.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = ingest_dataset(cfg.dataset, cfg.resolution, cfg.split_seed, cfg.val_fraction)
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")
    if autoencoder is None:
        autoencoder = FrozenAutoencoder.from_state(load_frozen(cfg.autoencoder, "autoencoder"))
    if surrogate is None and cfg.surrogate:
        surrogate = SurrogateDeepfake.from_state(load_frozen(cfg.surrogate, "surrogate"))
    autoencoder.freeze()

    s = sch.make_schedule(cfg.T)
    bundle = ModelBundle.create(cfg.net_config(), seed=substream(cfg.seed, "init").initial_seed(),
                                autoencoder=autoencoder, surrogate=surrogate)
    opt = make_optimizer(bundle, cfg)
    rows: list[dict] = []
    start = 0
    ckpt_path = out / "checkpoint.pt"
    log_path = out / "train_log.csv"
    if resume and ckpt_path.exists():
        ckpt = torch_load(ckpt_path)
        bundle.encoder.load_state_dict(ckpt["encoder"])
        bundle.decoder.load_state_dict(ckpt["decoder"])
        opt.load_state_dict(ckpt["optimizer"])
        start = int(ckpt["step"])
        rows = [r for r in read_log(log_path) if r["step"] < start] if log_path.exists() else []
        log.info("resumed from step %d", start)

    perceptual = StructuralDissimilarity()
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start, end):
        x0 = dataset.train[batch_indices(len(dataset.train), cfg.batch_size, step, cfg.seed)]
        rows.append(train_step(bundle, opt, x0, step, cfg, s, perceptual))
        done = step + 1
        if done % cfg.checkpoint_interval == 0 or done == end:
            atomic_torch_save({"version": CHECKPOINT_VERSION, "step": done, "config": cfg.to_dict(),
                               "encoder": bundle.encoder.state_dict(), "decoder": bundle.decoder.state_dict(),
                               "optimizer": opt.state_dict()}, ckpt_path)
            _write_log(log_path, rows)
        if step % 100 == 0:
            r = rows[-1]
            log.info("step %d  beta %g  quality %.5f  recovery %.4f  total %.4f",
                     step, r["beta"], r["quality"], r["recovery"], r["total"])

    bundle.metadata = {"step": end, "seed": cfg.seed, "split_seed": cfg.split_seed, "train_config": cfg.to_dict()}
    bundle.eval()
    if end == cfg.steps:
        save_bundle(bundle, out / "model.pt")
    return bundle
