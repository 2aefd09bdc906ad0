"""Command-line interface.

Subcommands cover the whole pipeline: synthetic data generation, detector
and diffusion training, single-image detection / restoration / refinement,
full evaluation with report emission, and the box-filter benchmark.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imageops, synth
from .detector import DetectorConfig, DetectorNet, detect_mask, train_detector
from .diffusion import DiffusionModel, DiffusionSchedule, refine, train_diffusion
from .guided import GuidedFilterConfig, masked_guided_filter, standard_guided_filter
from .pipeline import PipelineConfig, bench, report_table, run_pipeline
from .synth import DatasetManifest


def _load_config_file(path) -> dict:
    """key=value lines; '#' comments and blank lines ignored."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _apply_config(args, cfg: dict):
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise SystemExit(f"unknown config key: {key}")
        current = getattr(args, attr)
        if isinstance(current, bool):
            value = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(args, attr, value)
    return args


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc


def _out_path(args, name: str) -> Path:
    base = Path(args.out_dir) if args.out_dir else Path(".")
    base.mkdir(parents=True, exist_ok=True)
    return base / name


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    specs = synth.default_specs(args.count, args.eval_count, size=args.size,
                                seed=args.seed)
    manifest = synth.generate_dataset(specs, args.out)
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return 0


def cmd_train_detector(args) -> int:
    manifest = DatasetManifest.load(args.data)
    cfg = DetectorConfig(patch_size=args.patch, tau=args.tau, seed=args.seed)
    net, log = train_detector(manifest, Path(args.data).parent, cfg,
                              epochs=args.steps, lr=args.lr, seed=args.seed)
    net.save(args.out)
    for e in log.epochs:
        print(f"epoch {e['epoch']}: loss {e['loss']:.4f} acc {e['acc']:.4f}")
    print(f"saved detector to {args.out}")
    return 0


def cmd_detect(args) -> int:
    net = DetectorNet.load(args.ckpt)
    img = imageops.load_png(args.infile)
    cfg = DetectorConfig(patch_size=args.patch, threshold=args.threshold)
    soft, mask = detect_mask(img, cfg, net)
    imageops.save_png(args.out, mask)
    if args.soft_out:
        imageops.save_png(args.soft_out, soft)
    print(f"wrote mask to {args.out} ({mask.mean():.1%} blurry)")
    return 0


def cmd_restore(args) -> int:
    blur = imageops.load_png(args.blur)
    ref = imageops.load_png(args.ref)
    cfg = GuidedFilterConfig(radius=args.radius, eps=args.eps)
    if args.unmasked:
        out = standard_guided_filter(blur, ref, cfg)
    else:
        mask = (imageops.load_png(args.mask) > 0.5).astype(np.float32)
        out = masked_guided_filter(blur, ref, mask, cfg)
    imageops.save_png(args.out, np.clip(out, 0.0, 1.0))
    print(f"wrote restored image to {args.out}")
    return 0


def cmd_train_diffusion(args) -> int:
    manifest = DatasetManifest.load(args.data)
    root = Path(args.data).parent
    rng = np.random.default_rng(args.seed)
    crops = []
    for rec in manifest.split("train"):
        sharp = imageops.load_png(root / rec.sharp)
        short = imageops.load_png(root / rec.short)
        mask = imageops.load_png(root / rec.mask)
        h, w = sharp.shape[:2]
        for _ in range(args.crops_per_image):
            y = int(rng.integers(0, h - args.crop + 1))
            x = int(rng.integers(0, w - args.crop + 1))
            sl = np.s_[y : y + args.crop, x : x + args.crop]
            crops.append({
                "x0": sharp[sl].transpose(2, 0, 1),
                "ref": short[sl].transpose(2, 0, 1),
                "mask": mask[sl],
            })
    model, losses = train_diffusion(crops, steps=args.steps, seed=args.seed,
                                    lr=args.lr)
    model.save(args.out)
    print(f"trained {args.steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"saved diffusion model to {args.out}")
    return 0


def cmd_refine(args) -> int:
    from .pipeline import refine_tiles

    model = DiffusionModel.load(args.ckpt)
    schedule = DiffusionSchedule()
    h_img = imageops.load_png(args.infile)
    ref = imageops.load_png(args.ref)
    mask = (imageops.load_png(args.mask) > 0.5).astype(np.float32)
    if h_img.shape[0] <= args.tile and h_img.shape[1] <= args.tile:
        out = refine(h_img.transpose(2, 0, 1), ref.transpose(2, 0, 1), mask,
                     model, schedule, args.strength, seed=args.seed,
                     recompose_base=h_img.transpose(2, 0, 1))
        out = out.transpose(1, 2, 0)
    else:
        out = refine_tiles(h_img, ref, mask, h_img, model, schedule,
                           args.strength, seed=args.seed, tile=args.tile)
    imageops.save_png(args.out, np.clip(out, 0.0, 1.0))
    print(f"wrote refined image to {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.data)
    cfg = PipelineConfig(
        detector_ckpt=args.detector, diffusion_ckpt=args.diffusion,
        patch_size=args.patch, radius=args.radius, eps=args.eps,
        strength=args.strength, recompose=not args.no_recompose, seed=args.seed,
    )
    out_dir = args.out_dir or "eval-out"
    report = run_pipeline(cfg, manifest, Path(args.data).parent, out_dir,
                          split=args.split)
    print(report_table(report))
    if report["errors"]:
        for err in report["errors"]:
            print(f"record {err['id']} failed: {err['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    rows = bench(seed=args.seed)
    print(f"{'radius':>8} {'box_sum (s)':>14} {'filter (s)':>14}")
    for row in rows:
        print(f"{row['radius']:>8} {row['box_sum_s']:>14.5f} {row['filter_s']:>14.5f}")
    if args.out_dir:
        path = _out_path(args, "bench.json")
        path.write_text(json.dumps(rows, indent=2))
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localdeblur",
        description="Local motion deblurring with short-exposure guidance.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="key=value file overriding subcommand flags")
    parser.add_argument("--out-dir", help="directory for reports and figures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--eval-count", type=int, default=12)
    p.add_argument("--size", type=_size, default=(128, 128))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train the patch blur detector")
    p.add_argument("--data", required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=14, help="training epochs")
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="predict a blur mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--soft-out", help="also write the soft confidence map")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("restore", help="masked guided filtering")
    p.add_argument("--blur", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask")
    p.add_argument("--radius", type=int, default=12)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--unmasked", action="store_true",
                   help="run the classic unmasked filter (ablation)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train-diffusion", help="train the refinement sandbox")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--crop", type=int, default=16)
    p.add_argument("--crops-per-image", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("refine", help="diffusion refinement of a restored image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--strength", type=float, default=0.05)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="run the full pipeline over a manifest split")
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--diffusion")
    p.add_argument("--split", default="eval")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--radius", type=int, default=12)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--strength", type=float, default=0.05)
    p.add_argument("--no-recompose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="radius-independence benchmark")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(args, _load_config_file(args.config))
    if args.func is cmd_restore and not args.unmasked and not args.mask:
        parser.error("restore requires --mask unless --unmasked is given")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
