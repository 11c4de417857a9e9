"""Unified command-line entry point.

Every run writes a manifest next to its outputs: the command, the full
config echo, the seed, a revision string, and checksums of the input files
it consumed, so any artifact can be traced back to what produced it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigInvalid, RunConfig, load_config

log = logging.getLogger(__name__)

COMMANDS = [
    "make-phantoms",
    "train-vae",
    "train-scmg",
    "train-diffusion",
    "gen-masks",
    "gen-images",
    "eval",
    "curvature-report",
    "downstream",
    "summarize",
]


def _revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_out(out: str) -> Path:
    root = os.environ.get("LESIONSYNTH_OUT")
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "revision": _revision(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_make_phantoms(args) -> int:
    from .data import PhantomParams, generate_phantom_set, save_dataset

    out = _resolve_out(args.out)
    params = PhantomParams(resolution=args.resolution, texture_variant=args.texture)
    records = generate_phantom_set(params, args.count, args.seed)
    save_dataset(records, out)
    write_manifest(out, "make-phantoms", asdict(params), args.seed, [], [out / "labels.csv"])
    print(f"wrote {len(records)} phantoms to {out}")
    return 0


def _cmd_train_vae(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset_dir
    from .vae import VAEConfig, train_vae

    cfg = load_config(args.config)
    out = _resolve_out(args.out or str(Path(cfg.out_root) / "vae"))
    records = load_dataset_dir(cfg.data.phantom_dir)
    vae_cfg = VAEConfig(
        resolution=cfg.resolution,
        latent_channels=cfg.vae.latent_channels,
        base_channels=cfg.vae.base_channels,
        kl_weight=cfg.vae.kl_weight,
        epochs=cfg.vae.epochs,
        batch_size=cfg.vae.batch_size,
        lr=cfg.vae.lr,
        seed=cfg.seed,
    )
    model, history = train_vae(np.stack([r.image for r in records]), vae_cfg)
    ckpt = save_checkpoint(
        out / "vae.pt",
        kind="vae",
        state_dicts={"vae": model.state_dict()},
        config={**cfg.to_dict(), "vae_config": asdict(vae_cfg)},
        step=len(history),
        frozen=True,
        extra={"history": history},
    )
    write_manifest(out, "train-vae", cfg.to_dict(), cfg.seed,
                   [args.config, Path(cfg.data.phantom_dir) / "labels.csv"], [ckpt])
    print(f"vae checkpoint: {ckpt} (final recon {history[-1]['recon']:.5f})")
    return 0


def _cmd_train_scmg(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset_dir
    from .scmg import SCMGConfig, train_scmg

    cfg = load_config(args.config)
    out = _resolve_out(args.out or str(Path(cfg.out_root) / "scmg"))
    records = load_dataset_dir(cfg.data.phantom_dir)
    scmg_cfg = SCMGConfig(
        resolution=cfg.resolution,
        z_dim=cfg.scmg.z_dim,
        lr_g=cfg.scmg.lr_g,
        lr_d=cfg.scmg.lr_d,
        batch_size=cfg.scmg.batch_size,
        epochs=cfg.scmg.epochs,
        enable_curvature=cfg.scmg.enable_curvature,
        cls_target=cfg.scmg.cls_target,
        seed=cfg.seed,
    )
    state, history = train_scmg(records, scmg_cfg)
    ckpt = save_checkpoint(
        out / "scmg.pt",
        kind="scmg",
        state_dicts={
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
        },
        config={**cfg.to_dict(), "scmg_config": _plain(asdict(scmg_cfg))},
        step=state.step,
        extra={
            "history": history,
            "kappa_targets": {int(k): float(v) for k, v in state.kappa_targets.items()},
        },
    )
    write_manifest(out, "train-scmg", cfg.to_dict(), cfg.seed,
                   [args.config, Path(cfg.data.phantom_dir) / "labels.csv"], [ckpt])
    print(f"scmg checkpoint: {ckpt} ({state.step} steps)")
    return 0


def _cmd_train_diffusion(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import bounding_rectangle, load_dataset_dir
    from .diffusion import DiffusionTrainConfig, train_diffusion
    from .vae import ConvVAE, VAEConfig

    cfg = load_config(args.config)
    out = _resolve_out(args.out or str(Path(cfg.out_root) / "diffusion"))
    records = load_dataset_dir(cfg.data.phantom_dir)
    vae_payload = load_checkpoint(cfg.diffusion.vae_checkpoint, expected_kind="vae")
    vae = ConvVAE(VAEConfig(**vae_payload["config"]["vae_config"]))
    vae.load_state_dict(vae_payload["state"]["vae"])
    vae.freeze()
    train_cfg = DiffusionTrainConfig(
        timesteps=cfg.diffusion.timesteps,
        epochs=cfg.diffusion.epochs,
        batch_size=cfg.diffusion.batch_size,
        accum_steps=cfg.diffusion.accum_steps,
        lr=cfg.diffusion.lr,
        lock_base=cfg.diffusion.lock_base,
        seed=cfg.seed,
    )
    state, sched, history = train_diffusion(records, vae, train_cfg)
    from .text import write_vocabulary

    write_vocabulary(out / "vocab.txt")
    rectangles = [bounding_rectangle(r.mask) for r in records]
    ckpt = save_checkpoint(
        out / "diffusion.pt",
        kind="diffusion",
        state_dicts={"denoiser": state.state_dict(), "vae": vae.state_dict()},
        config={
            **cfg.to_dict(),
            "train_config": asdict(train_cfg),
            "vae_config": vae_payload["config"]["vae_config"],
        },
        step=len(history),
        extra={
            "history": history,
            "beta": sched.beta.tolist(),
            "rectangles": rectangles,
        },
    )
    write_manifest(out, "train-diffusion", cfg.to_dict(), cfg.seed,
                   [args.config, cfg.diffusion.vae_checkpoint], [ckpt])
    print(f"diffusion checkpoint: {ckpt} (final loss {history[-1]['loss']:.4f})")
    return 0


def _load_scmg_generator(path):
    from .checkpoint import load_checkpoint
    from .scmg import MaskGenerator, SCMGConfig

    payload = load_checkpoint(path, expected_kind="scmg")
    raw = dict(payload["config"]["scmg_config"])
    raw["adam_betas"] = tuple(raw.get("adam_betas", (0.5, 0.999)))
    g = MaskGenerator(SCMGConfig(**raw))
    g.load_state_dict(payload["state"]["generator"])
    g.eval()
    return g, payload


def _load_diffusion(path):
    from .checkpoint import load_checkpoint
    from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule
    from .vae import ConvVAE, VAEConfig

    payload = load_checkpoint(path, expected_kind="diffusion")
    vae = ConvVAE(VAEConfig(**payload["config"]["vae_config"]))
    vae.load_state_dict(payload["state"]["vae"])
    vae.freeze()
    state = Denoiser(DenoiserConfig(resolution=vae.config.resolution))
    state.load_state_dict(payload["state"]["denoiser"])
    state.eval()
    beta = np.asarray(payload["extra"]["beta"])
    sched = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    return state, vae, sched, payload


def _cmd_gen_masks(args) -> int:
    from PIL import Image

    from .data import TumorClass, rectangle_map
    from .scmg import sample_masks

    g, payload = _load_scmg_generator(args.ckpt)
    out = _resolve_out(args.out)
    x, y, w, h = (int(v) for v in args.rect.split(","))
    res = g.config.resolution
    rect = rectangle_map((res, res), (y, x, h, w))  # CLI order is x,y,w,h
    k = TumorClass.BENIGN if args.tumor_class == "benign" else TumorClass.MALIGNANT
    masks = sample_masks(g, args.count, k, [rect], seed=args.seed)
    outputs = []
    for i, m in enumerate(masks):
        p = out / f"mask_{i:04d}.png"
        Image.fromarray((m * 255).astype(np.uint8)).save(p)
        outputs.append(p)
    write_manifest(out, "gen-masks", {"rect": args.rect, "class": args.tumor_class,
                                      "count": args.count}, args.seed, [args.ckpt], outputs)
    print(f"wrote {len(outputs)} masks to {out}")
    return 0


def _cmd_gen_images(args) -> int:
    from .diffusion import generate_dataset

    state, vae, sched, diff_payload = _load_diffusion(args.diffusion_ckpt)
    g, _ = _load_scmg_generator(args.scmg_ckpt)
    out = _resolve_out(args.out)
    rectangles = [tuple(r) for r in diff_payload["extra"]["rectangles"]]
    manifest = generate_dataset(
        state, vae, g, sched,
        n=args.count,
        class_mix=args.class_mix,
        rectangles=rectangles,
        out_dir=out,
        steps=args.steps,
        eta=args.eta,
        seed=args.seed,
    )
    write_manifest(out, "gen-images",
                   {"count": args.count, "steps": args.steps, "eta": args.eta,
                    "class_mix": args.class_mix},
                   args.seed, [args.diffusion_ckpt, args.scmg_ckpt], [manifest])
    print(f"generated {args.count} images; manifest at {manifest}")
    return 0


def _cmd_eval(args) -> int:
    from .data import load_dataset_dir
    from .metrics import (HandcraftedExtractor, TrainedCnnExtractor,
                          extract_features, fid, kid)

    real = load_dataset_dir(args.real)
    fake = load_dataset_dir(args.fake)
    if args.extractor == "handcrafted":
        extractor = HandcraftedExtractor()
    elif args.extractor == "cnn-phantom":
        extractor = TrainedCnnExtractor(seed=args.seed).train_on(real)
    else:
        print(f"error: unknown extractor {args.extractor!r}", file=sys.stderr)
        return 1
    fs_real = extract_features(np.stack([r.image for r in real]), extractor)
    fs_fake = extract_features(np.stack([r.image for r in fake]), extractor)
    subset = min(100, fs_real.n, fs_fake.n)
    report = {
        "extractor_id": extractor.extractor_id,
        "n_real": fs_real.n,
        "n_fake": fs_fake.n,
        "fid": fid(fs_real, fs_fake),
        "kid": kid(fs_real, fs_fake, subset_size=subset, subsets=10, seed=args.seed),
    }
    out = _resolve_out(args.out)
    (out / "metrics.json").write_text(json.dumps(report, indent=2))
    write_manifest(out, "eval", {"extractor": args.extractor}, args.seed,
                   [Path(args.real) / "labels.csv", Path(args.fake) / "labels.csv"],
                   [out / "metrics.json"])
    print(json.dumps(report, indent=2))
    return 0


def _cmd_curvature_report(args) -> int:
    from PIL import Image

    from .metrics import curvature_report

    mask_dir = Path(args.mask_dir)
    labels = {}
    with open(args.labels, newline="") as fh:
        for row in csv.DictReader(fh):
            labels[row["record_id"]] = 0 if row["class"] == "benign" else 1
    masks, ks = [], []
    for path in sorted(mask_dir.glob("*.png")):
        rid = path.stem
        if rid not in labels:
            continue
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
        masks.append((arr > 127).astype(np.float64))
        ks.append(labels[rid])
    report = curvature_report(masks, ks)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_downstream(args) -> int:
    from .data import (PhantomParams, SplitSpec, generate_phantom_set,
                       load_dataset_dir, split)
    from .downstream import ExperimentGrid, run_grid, save_records

    cfg = load_config(args.config)
    out = _resolve_out(args.out or str(Path(cfg.out_root) / "downstream"))
    task = "classification" if args.task == "cls" else "segmentation"
    records = load_dataset_dir(cfg.data.phantom_dir)
    synthetic = load_dataset_dir(cfg.downstream.synthetic_dir)
    for rec in synthetic:
        rec.source = "synthetic"
    train, test = split(records, SplitSpec(seed=cfg.seed))
    external = None
    if task == "segmentation":
        external = generate_phantom_set(
            PhantomParams(resolution=cfg.resolution, texture_variant="coarse"),
            count=max(20, len(test) // 2),
            base_seed=cfg.seed + 900_000,
        )
    grid = ExperimentGrid(
        task=task,
        ratios=cfg.downstream.ratios,
        include_ordinary=cfg.downstream.include_ordinary,
        seeds=cfg.downstream.seeds,
        epochs=cfg.downstream.epochs,
        lr=cfg.downstream.lr,
        batch_size=cfg.downstream.batch_size,
    )
    results = run_grid(grid, train, test, synthetic, external)
    store = out / "records.jsonl"
    save_records(results, store)
    write_manifest(out, "downstream", cfg.to_dict(), cfg.seed,
                   [args.config], [store])
    print(f"wrote {len(results)} metric records to {store}")
    return 0


def _cmd_summarize(args) -> int:
    from .downstream import load_records, summarize

    records = load_records(args.store)
    print(summarize(records, fmt=args.format))
    return 0


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionsynth",
        description="Controllable ultrasound lesion synthesis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-phantoms", help="generate a phantom dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--texture", default="standard", choices=["standard", "coarse"])
    p.set_defaults(func=_cmd_make_phantoms)

    for name, fn in [("train-vae", _cmd_train_vae), ("train-scmg", _cmd_train_scmg),
                     ("train-diffusion", _cmd_train_diffusion)]:
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} from a config file")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("gen-masks", help="sample lesion masks from a trained generator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="tumor_class", required=True, choices=["benign", "malignant"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--rect", required=True, help="x,y,w,h in pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_masks)

    p = sub.add_parser("gen-images", help="generate synthetic image/mask/label triplets")
    p.add_argument("--diffusion-ckpt", required=True)
    p.add_argument("--scmg-ckpt", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--class-mix", type=float, default=0.5,
                   help="probability of drawing the malignant class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_images)

    p = sub.add_parser("eval", help="FID/KID between two dataset directories")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--extractor", default="handcrafted",
                   choices=["handcrafted", "cnn-phantom"])
    p.add_argument("--out", default="eval")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("curvature-report", help="per-class curvature statistics of a mask directory")
    p.add_argument("mask_dir")
    p.add_argument("--labels", required=True, help="CSV with record_id,class columns")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_curvature_report)

    p = sub.add_parser("downstream", help="augmentation experiment grid")
    p.add_argument("--task", required=True, choices=["cls", "seg"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_downstream)

    p = sub.add_parser("summarize", help="summarize a downstream results store")
    p.add_argument("--in", dest="store", required=True)
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.set_defaults(func=_cmd_summarize)

    return parser


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage/help printing
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
