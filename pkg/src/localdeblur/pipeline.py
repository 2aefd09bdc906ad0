"""End-to-end evaluation: detect, restore, refine, measure, report.

The report is a versioned JSON document with stable key order, a CSV of
per-record rows, a plain-text table, and a couple of matplotlib figures.
Records are isolated: a failure in one record is logged and the rest of
the split still runs.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, imageops, metrics
from .detector import DetectorConfig, DetectorNet, detect_mask, mask_metrics
from .diffusion import DiffusionModel, DiffusionSchedule, refine
from .guided import GuidedFilterConfig, masked_guided_filter, standard_guided_filter
from .synth import DatasetManifest

REPORT_VERSION = 1


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    detector_ckpt: str
    diffusion_ckpt: str | None = None
    patch_size: int = 16
    radius: int = 12
    eps: float = 1e-4
    strength: float = 0.05
    refine_tile: int = 16
    recompose: bool = True
    seed: int = 0

    def __post_init__(self):
        if not Path(self.detector_ckpt).exists():
            raise PipelineError(f"missing detector checkpoint: {self.detector_ckpt}")
        if self.diffusion_ckpt is not None and not Path(self.diffusion_ckpt).exists():
            raise PipelineError(f"missing diffusion checkpoint: {self.diffusion_ckpt}")
        if not 0 < self.strength <= 1:
            raise PipelineError(f"strength must be in (0,1], got {self.strength}")


def _chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def _hwc(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(1, 2, 0))


def refine_tiles(h_img: np.ndarray, ref: np.ndarray, mask: np.ndarray,
                 base: np.ndarray, model: DiffusionModel,
                 schedule: DiffusionSchedule, strength: float, seed: int,
                 tile: int = 16) -> np.ndarray:
    """Diffusion-refine only the tiles that intersect the mask.

    Tiles without masked pixels keep the restored input unchanged, so the
    clear-region pass-through survives refinement (the recomposition inside
    each refined tile uses ``base`` bit-exact where the mask is 0).
    """
    grid = imageops.PatchGrid.for_image(h_img.shape[0], h_img.shape[1], tile)
    h_tiles = imageops.unfold(h_img, grid)
    r_tiles = imageops.unfold(ref, grid)
    m_tiles = imageops.unfold(mask, grid)
    b_tiles = imageops.unfold(base, grid)
    out_tiles = []
    for i, (ht, rt, mt, bt) in enumerate(zip(h_tiles, r_tiles, m_tiles, b_tiles)):
        if mt.max() > 0:
            refined = refine(_chw(ht), _chw(rt), mt.astype(np.float32), model,
                             schedule, strength, seed=seed + i,
                             recompose_base=_chw(bt))
            out_tiles.append(_hwc(refined))
        else:
            out_tiles.append(ht)
    return imageops.fold(out_tiles, grid)


def _region_psnr(a, b, region):
    try:
        return metrics.psnr(a, b, region)
    except metrics.MetricError:
        return None


def evaluate_record(rec, root, cfg: PipelineConfig, det_cfg: DetectorConfig,
                    net: DetectorNet, model: DiffusionModel | None,
                    schedule: DiffusionSchedule | None, seed: int):
    """Run one record through the full pipeline; returns (row, images)."""
    blur = imageops.load_png(root / rec.blurred)
    ref = imageops.load_png(root / rec.short)
    sharp = imageops.load_png(root / rec.sharp)
    gt_mask = imageops.load_png(root / rec.mask)

    soft, pred = detect_mask(blur, det_cfg, net)
    gf = GuidedFilterConfig(radius=cfg.radius, eps=cfg.eps)
    restored = masked_guided_filter(blur, ref, pred, gf)
    unmasked = standard_guided_filter(blur, ref, gf)
    if model is not None:
        final = refine_tiles(restored, ref, pred, blur, model, schedule,
                             cfg.strength, seed, tile=cfg.refine_tile)
        if cfg.recompose:
            keep = pred[:, :, None] > 0
            final = np.where(keep, final, blur)
        final = final.astype(np.float32)
    else:
        final = restored

    mm = mask_metrics(pred, gt_mask)
    row = {
        "id": rec.id,
        "mask_acc": mm["acc"],
        "mask_miou": mm["miou"],
        "psnr_full": metrics.psnr(final, sharp),
        "psnr_masked": _region_psnr(final, sharp, pred),
        "psnr_clear": _region_psnr(final, blur, 1 - pred),
        "ssim": metrics.ssim(final, sharp),
        "psnr_input_full": metrics.psnr(blur, sharp),
        "psnr_input_masked": _region_psnr(blur, sharp, pred),
        "psnr_filtered_full": metrics.psnr(restored, sharp),
        "psnr_filtered_masked": _region_psnr(restored, sharp, pred),
        "psnr_unmasked_full": metrics.psnr(unmasked, sharp),
    }
    images = {"soft": soft, "mask": pred, "restored": restored, "final": final}
    return row, images


def run_pipeline(cfg: PipelineConfig, manifest: DatasetManifest, root,
                 out_dir=None, split: str = "eval") -> dict:
    """Evaluate a manifest split; returns the report dict (also written to
    ``out_dir`` as JSON + CSV + text table + figures when given)."""
    root = Path(root)
    det_cfg = DetectorConfig(patch_size=cfg.patch_size)
    net = DetectorNet.load(cfg.detector_ckpt)
    model = schedule = None
    if cfg.diffusion_ckpt is not None:
        model = DiffusionModel.load(cfg.diffusion_ckpt)
        schedule = DiffusionSchedule()

    rows, errors, images_kept = [], [], None
    records = manifest.split(split)
    for i, rec in enumerate(records):
        try:
            row, images = evaluate_record(rec, root, cfg, det_cfg, net, model,
                                          schedule, seed=cfg.seed + 1000 * i)
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            errors.append({"id": rec.id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append(row)
        if out_dir is not None:
            _save_outputs(Path(out_dir), rec.id, images)
        if images_kept is None:
            images_kept = (rec, images)

    keys = [k for k in (rows[0] if rows else {}) if k != "id"]
    aggregates = {}
    for k in keys:
        vals = [r[k] for r in rows if r[k] is not None]
        aggregates[k] = float(np.mean(vals)) if vals else None

    report = {
        "version": REPORT_VERSION,
        "tool": f"localdeblur {__version__}",
        "split": split,
        "config": asdict(cfg),
        "n_records": len(records),
        "n_failed": len(errors),
        "records": rows,
        "aggregates": aggregates,
        "errors": errors,
    }
    if out_dir is not None:
        write_report(report, Path(out_dir))
        if images_kept is not None:
            _save_figures(Path(out_dir), report, images_kept, root)
    return report


# ---------------------------------------------------------------------------
# emission

def _save_outputs(out_dir: Path, rec_id: str, images: dict) -> None:
    d = out_dir / "outputs"
    d.mkdir(parents=True, exist_ok=True)
    for key, img in images.items():
        imageops.save_png(d / f"{rec_id}_{key}.png", img)


def report_table(report: dict) -> str:
    cols = ["id", "psnr_full", "psnr_masked", "psnr_clear", "ssim",
            "mask_acc", "mask_miou"]
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    fmt = lambda v: "     -" if v is None else (v if isinstance(v, str) else f"{v:14.4f}")  # noqa: E731
    for r in report["records"]:
        lines.append("  ".join(f"{fmt(r[c]):>14}" for c in cols))
    agg = report["aggregates"]
    lines.append("  ".join(
        f"{fmt('mean' if c == 'id' else agg.get(c)):>14}" for c in cols))
    return "\n".join(lines)


def write_report(report: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "report.txt").write_text(report_table(report) + "\n")
    rows = report["records"]
    with open(out_dir / "report.csv", "w", newline="") as f:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def _save_figures(out_dir: Path, report: dict, kept, root: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    rows = report["records"]
    if rows:
        ids = [r["id"] for r in rows]
        x = np.arange(len(ids))
        fig, ax = plt.subplots(figsize=(max(6, len(ids) * 0.6), 4))
        for off, key, label in ((-0.25, "psnr_input_masked", "input"),
                                (0.0, "psnr_filtered_masked", "filtered"),
                                (0.25, "psnr_masked", "final")):
            vals = [r[key] if r[key] is not None else 0.0 for r in rows]
            ax.bar(x + off, vals, width=0.25, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("masked-region PSNR (dB)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(fig_dir / "psnr_masked.png", dpi=120)
        plt.close(fig)

    rec, images = kept
    blur = imageops.load_png(root / rec.blurred)
    sharp = imageops.load_png(root / rec.sharp)
    gt_mask = imageops.load_png(root / rec.mask)
    panels = [(blur, "blurred input"), (sharp, "ground truth"),
              (images["soft"], "confidence"), (gt_mask, "gt mask"),
              (images["mask"], "predicted mask"), (images["restored"], "restored"),
              (images["final"], "final")]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
    for ax, (img, title) in zip(axes, panels):
        ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(fig_dir / "qualitative.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# benchmarking

def bench(radii=(2, 4, 8, 16, 32), box_size=1024, filter_size=512,
          repeats=5, seed: int = 0) -> list[dict]:
    """Median wall-clock across radii; one warmup before timing."""
    rng = np.random.default_rng(seed)
    big = rng.random((box_size, box_size))
    blur = rng.random((filter_size, filter_size, 3)).astype(np.float32)
    ref = rng.random((filter_size, filter_size, 3)).astype(np.float32)
    mask = np.zeros((filter_size, filter_size), dtype=np.float32)
    mask[: filter_size // 2] = 1

    rows = []
    for r in radii:
        imageops.box_sum(big, r)
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            imageops.box_sum(big, r)
            ts.append(time.perf_counter() - t0)
        cfg = GuidedFilterConfig(radius=r, eps=1e-4)
        masked_guided_filter(blur, ref, mask, cfg)
        tf = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            masked_guided_filter(blur, ref, mask, cfg)
            tf.append(time.perf_counter() - t0)
        rows.append({"radius": r, "box_sum_s": float(np.median(ts)),
                     "filter_s": float(np.median(tf))})
    return rows
