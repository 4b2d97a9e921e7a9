"""``diffwm`` command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch
from PIL import UnidentifiedImageError

from .codec import bit_confidence, format_bits, logits_to_bits, parse_bits, random_bits
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetError, ingest_dataset, load_image, save_image, write_toy_faces
from .distortions import (AutoencoderTrainingError, DistortionSpec, SurrogateDeepfake, UnknownDistortionError,
                          apply, pretrain_autoencoder)
from .evaluation import evaluate, write_report
from .nets import BundleError, ModelBundle, atomic_torch_save, decoder_forward, load_bundle, torch_load
from .sampler import SampleConfig, SamplingError, sample
from .trainer import TrainingDivergedError, train

log = logging.getLogger("diffwm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
SIDECAR_VERSION = 1


def _echo(name: str, resolved: dict) -> None:
    log.info("%s resolved config:\n%s", name, json.dumps(resolved, indent=2, sort_keys=True, default=str))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


def _dataset(cfg: ExperimentConfig):
    if not cfg.dataset:
        raise ConfigError("dataset", "no dataset directory configured")
    if not Path(cfg.dataset).is_dir():
        raise ConfigError("dataset", f"dataset directory not found: {cfg.dataset}")
    return ingest_dataset(cfg.dataset, cfg.resolution, cfg.split_seed, cfg.val_fraction)


def cmd_pretrain_ae(args) -> int:
    cfg = load_config(args.config)
    resolved = cfg.resolved()
    _echo("pretrain-ae", resolved)
    ds = _dataset(cfg)
    p = cfg.pretrain
    ae = pretrain_autoencoder(ds.train, p.steps, p.seed, p.autoencoder, p.batch_size, p.lr, ds.val, p.min_psnr)
    other = pretrain_autoencoder(ds.train, p.steps, p.seed + 1, p.surrogate_autoencoder, p.batch_size, p.lr,
                                 ds.val, p.min_psnr)
    atomic_torch_save(ae.state(), cfg.autoencoder_path)
    atomic_torch_save(SurrogateDeepfake(other, p.surrogate).state(), cfg.surrogate_path)
    _write_json(Path(cfg.out_dir) / "pretrain.json", {"version": SIDECAR_VERSION, "config": resolved})
    print(cfg.autoencoder_path)
    print(cfg.surrogate_path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train_config()
    resolved = cfg.resolved()
    _echo("train", resolved)
    ds = _dataset(cfg)
    out = Path(tcfg.out_dir)
    _write_json(out / "config.json", {"version": SIDECAR_VERSION, "config": resolved})
    train(tcfg, resume=args.resume, dataset=ds)
    print(out / "model.pt")
    return EXIT_OK


def _bits(args, L: int) -> tuple[torch.Tensor, str]:
    if args.bits is not None:
        return parse_bits(args.bits, L), "literal"
    return random_bits(L, args.bits_seed), f"seed:{args.bits_seed}"


def cmd_embed(args) -> int:
    bundle = load_bundle(args.model)
    w, source = _bits(args, bundle.L)
    cover = load_image(args.image, bundle.cfg.resolution)
    scfg = SampleConfig(cond=args.guided, s=args.scale, seed=args.seed)
    resolved = {"model": str(args.model), "image": str(args.image), "bits": format_bits(w), "bits_source": source,
                "sample": asdict(scfg), "resolution": bundle.cfg.resolution}
    _echo("embed", resolved)
    out = sample(bundle, cover, w, scfg)
    save_image(out, args.out)
    _write_json(Path(str(args.out) + ".json"), {"version": SIDECAR_VERSION, **resolved})
    print(args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    bundle = load_bundle(args.model)
    img = load_image(args.image)
    res = bundle.cfg.resolution
    if tuple(img.shape[-2:]) != (res, res):
        raise ValueError(f"image is {img.shape[-1]}x{img.shape[-2]}, the model expects {res}x{res}")
    with torch.no_grad():
        logits = decoder_forward(bundle.decoder, img[None])[0]
    bits = logits_to_bits(logits)
    conf = bit_confidence(logits)
    if args.json:
        print(json.dumps({"bits": format_bits(bits), "confidence": [round(float(c), 6) for c in conf]}))
    else:
        print(format_bits(bits))
        print(" ".join(f"{float(c):.3f}" for c in conf))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    resolved = cfg.resolved()
    _echo("evaluate", resolved)
    bundle = load_bundle(args.model)
    if bundle.cfg.resolution != cfg.resolution:
        raise ConfigError("resolution", f"{cfg.resolution} does not match the model's {bundle.cfg.resolution}")
    ds = _dataset(cfg)
    e = cfg.evaluate
    report = evaluate(bundle, ds.val, cfg.distortion_specs(), e.n_images, e.seed, cfg.sample, e.batch_size)
    report.config = {"model": str(args.model), **resolved}
    out = Path(args.out) if args.out else cfg.eval_dir
    csv_path, _ = write_report(report, out)
    print(f"PSNR {report.psnr:.2f} dB  SSIM {report.ssim:.4f}  {report.perceptual_name} {report.perceptual:.4f}")
    for r in report.rows:
        print(f"{r.distortion:24s} BER {r.mean_ber:6.2f}%")
    print(csv_path)
    return EXIT_OK


def parse_spec(tokens: list[str]) -> DistortionSpec:
    """``Kind [k=v ...] [seed=N]`` or ``kind=Kind k=v ...``."""
    kind, params, seed = None, {}, None
    for tok in tokens:
        if "=" not in tok:
            if kind is not None:
                raise ConfigError("spec", f"unexpected token {tok!r}; parameters take the form key=value")
            kind = tok
            continue
        k, v = tok.split("=", 1)
        if k == "kind":
            kind = v
        elif k == "seed":
            seed = int(v)
        else:
            try:
                params[k] = float(v)
            except ValueError:
                raise ConfigError(f"spec.{k}", f"expected a number, got {v!r}") from None
    if kind is None:
        raise ConfigError("spec", "no distortion kind given")
    base = DistortionSpec.default(kind)
    try:
        return DistortionSpec(base.kind, {**base.params, **params}, seed)
    except ValueError as exc:
        raise ConfigError("spec", str(exc)) from exc


def cmd_distort(args) -> int:
    spec = parse_spec(args.spec)
    x = load_image(args.input)
    cover = load_image(args.cover) if args.cover else None
    bundle = load_bundle(args.model) if args.model else None
    if spec.kind in ("Autoencoder", "SurrogateDeepfake") and bundle is None:
        raise ConfigError("model", f"{spec.kind} needs --model with an embedded {spec.kind.lower()}")
    resolved = {"spec": spec.to_dict(), "label": spec.label, "input": str(args.input),
                "cover": args.cover, "model": args.model}
    _echo("distort", resolved)
    with torch.no_grad():
        out = apply(spec, x, cover, bundle and bundle.autoencoder, bundle and bundle.surrogate)
    save_image(out, args.out)
    _write_json(Path(str(args.out) + ".json"), {"version": SIDECAR_VERSION, **resolved})
    print(args.out)
    return EXIT_OK


def cmd_toy_data(args) -> int:
    paths = write_toy_faces(args.out, n=args.n, size=args.size, seed=args.seed)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffwm", description="Diffusion-based face image watermarking")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress and resolved configs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-ae", help="pretrain the frozen autoencoder and the surrogate manipulation")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_pretrain_ae)

    p = sub.add_parser("train", help="train the diffusion encoder and watermark decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from out_dir/train/checkpoint.pt")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="generate a watermarked image for a cover")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    bits = p.add_mutually_exclusive_group(required=True)
    bits.add_argument("--bits", help="literal 0/1 string of length L")
    bits.add_argument("--bits-seed", type=int, help="draw L bits from this seed")
    p.add_argument("--guided", action="store_true", help="apply manipulation-resistant guidance")
    p.add_argument("--scale", type=float, default=100.0, help="guidance scale s (default 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("extract", help="decode the watermark from an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("evaluate", help="BER under the configured distortions plus quality metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="report directory (default: evaluate.out_dir or out_dir/eval)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("distort", help="apply one distortion to an image")
    p.add_argument("--spec", nargs="+", required=True, metavar="K=V", help="e.g. Jpeg Q=50, or kind=Resize p=0.5")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cover", help="cover image (Dropout)")
    p.add_argument("--model", help="bundle holding the autoencoder / surrogate")
    p.set_defaults(fn=cmd_distort)

    p = sub.add_parser("toy-data", help="write a procedural toy face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=320)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_toy_data)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, UnknownDistortionError) as exc:
        print(f"diffwm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, BundleError, SamplingError, TrainingDivergedError, AutoencoderTrainingError,
            UnidentifiedImageError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"diffwm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
