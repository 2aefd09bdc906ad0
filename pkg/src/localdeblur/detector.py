"""Patch-contextual local blur detection.

A small CNN classifies each non-overlapping patch as blurry or clear.
Patch confidences come from a temperature-scaled softmax with optional
Gumbel noise (noise during training only); the pixel-level confidence map
is the patch values broadcast over their footprints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imageops
from .autodiff import AdamW, Tensor, load_checkpoint, save_checkpoint
from .synth import DatasetManifest

_EPS = 1e-7


class DetectorError(ValueError):
    pass


@dataclass
class DetectorConfig:
    patch_size: int = 16
    tau: float = 1.0
    threshold: float = 0.5
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise DetectorError(f"temperature must be > 0, got {self.tau}")
        if not 0 < self.threshold < 1:
            raise DetectorError(f"threshold must be in (0,1), got {self.threshold}")


# ---------------------------------------------------------------------------
# gumbel softmax

def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """G = -log(-log U), U ~ Uniform(0,1) clamped strictly inside (0,1)."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u)).astype(np.float32)


def gumbel_softmax(logits: np.ndarray, tau: float, noise: np.ndarray | None = None) -> np.ndarray:
    """softmax((logits + noise) / tau) along the last axis."""
    if tau <= 0:
        raise DetectorError(f"temperature must be > 0, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is not None:
        logits = logits + np.asarray(noise, dtype=np.float64)
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# network

class DetectorNet:
    """Three conv3x3+relu+maxpool2 stages (C->12->24->30), then a linear
    head on the flattened (p/8)^2 x 30 features. Under 10k parameters at
    the default 16x16 patch size."""

    def __init__(self, channels: int = 3, patch_size: int = 16, seed: int = 0,
                 params: dict | None = None, dtype=np.float32):
        if patch_size % 8 != 0:
            raise DetectorError(f"patch size must be a multiple of 8, got {patch_size}")
        self.channels = channels
        self.patch_size = patch_size
        flat = 30 * (patch_size // 8) ** 2
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "conv1_w": self._he(rng, (12, channels, 3, 3)),
                "conv1_b": np.zeros(12, dtype=np.float32),
                "conv2_w": self._he(rng, (24, 12, 3, 3)),
                "conv2_b": np.zeros(24, dtype=np.float32),
                "conv3_w": self._he(rng, (30, 24, 3, 3)),
                "conv3_b": np.zeros(30, dtype=np.float32),
                "fc_w": self._he(rng, (flat, 2)),
                "fc_b": np.zeros(2, dtype=np.float32),
            }
        self.params = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in params.items()}

    @staticmethod
    def _he(rng, shape):
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, patches: Tensor) -> Tensor:
        """patches: (N, C, p, p) -> logits (N, 2); blur class is column 1."""
        if patches.shape[2] != self.patch_size:
            raise DetectorError(
                f"net built for {self.patch_size}x{self.patch_size} patches, "
                f"got {patches.shape[2]}x{patches.shape[3]}")
        p = self.params
        x = patches.conv2d(p["conv1_w"], p["conv1_b"]).relu().maxpool2d()
        x = x.conv2d(p["conv2_w"], p["conv2_b"]).relu().maxpool2d()
        x = x.conv2d(p["conv3_w"], p["conv3_b"]).relu().maxpool2d()
        x = x.reshape(x.shape[0], p["fc_w"].shape[0])
        return x @ p["fc_w"] + p["fc_b"]

    def save(self, path):
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path):
        raw = load_checkpoint(path)
        patch = 8 * int(round(np.sqrt(raw["fc_w"].shape[0] / 30)))
        return cls(channels=raw["conv1_w"].shape[1], patch_size=patch, params=raw)


# ---------------------------------------------------------------------------
# patch handling

def _to_patch_batch(img: np.ndarray, grid: imageops.PatchGrid, channels: int) -> np.ndarray:
    patches = imageops.unfold(img, grid)
    batch = np.stack(patches)  # (N, p, p[, C])
    if batch.ndim == 3:
        batch = batch[:, :, :, None]
    if batch.shape[3] != channels:
        raise DetectorError(f"expected {channels} channels, got {batch.shape[3]}")
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2), dtype=np.float32)


def detect_patches(img: np.ndarray, cfg: DetectorConfig, net: DetectorNet,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Blur probability per patch. Zero Gumbel noise unless ``rng`` is given."""
    grid = imageops.PatchGrid.for_image(img.shape[0], img.shape[1], cfg.patch_size)
    batch = _to_patch_batch(img, grid, cfg.channels)
    logits = net.forward(Tensor(batch)).data
    noise = sample_gumbel(rng, logits.shape) if rng is not None else None
    probs = gumbel_softmax(logits, cfg.tau, noise)
    return probs[:, 1].astype(np.float32)


def patch_labels(mask: np.ndarray, grid: imageops.PatchGrid) -> np.ndarray:
    """Per-patch target: majority vote of mask pixels, ties count as blurry."""
    labels = np.empty(grid.n_patches, dtype=np.float32)
    for i, patch in enumerate(imageops.unfold(mask, grid)):
        labels[i] = 1.0 if patch.mean() >= 0.5 else 0.0
    return labels


def ce_loss(v: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    targets = np.asarray(targets, dtype=np.float32)
    if not np.all((targets == 0) | (targets == 1)):
        raise DetectorError("targets must be 0/1")
    vc = v.clip(_EPS, 1.0 - _EPS)
    t = Tensor(targets, dtype=vc.dtype)
    return -(t * vc.log() + (1.0 - t) * (1.0 - vc).log()).mean()


def assemble_confidence_map(values: np.ndarray, grid: imageops.PatchGrid) -> np.ndarray:
    """Broadcast one value per patch over its footprint, crop to source size."""
    values = np.asarray(values, dtype=np.float32)
    if values.size != grid.n_patches:
        raise DetectorError(f"expected {grid.n_patches} values, got {values.size}")
    coarse = values.reshape(grid.grid_rows, grid.grid_cols)
    padded = imageops.nearest_resize(coarse, grid.padded_h, grid.padded_w)
    return padded[
        grid.pad_top : grid.pad_top + grid.source_h,
        grid.pad_left : grid.pad_left + grid.source_w,
    ]


def binarize(m: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(m) >= threshold).astype(np.float32)


def detect_mask(img: np.ndarray, cfg: DetectorConfig, net: DetectorNet):
    """Full inference path: patch confidences -> soft map -> binary mask."""
    grid = imageops.PatchGrid.for_image(img.shape[0], img.shape[1], cfg.patch_size)
    values = detect_patches(img, cfg, net)
    soft = assemble_confidence_map(values, grid)
    return soft, binarize(soft, cfg.threshold)


# ---------------------------------------------------------------------------
# metrics

def mask_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Pixel accuracy and mean IoU over the blur and clear classes."""
    pred = np.asarray(pred); gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DetectorError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred > 0.5
    g = gt > 0.5
    acc = float(np.mean(p == g))
    ious = []
    for cls in (True, False):
        inter = np.sum((p == cls) & (g == cls))
        union = np.sum((p == cls) | (g == cls))
        ious.append(1.0 if union == 0 else inter / union)
    return {"acc": acc, "miou": float(np.mean(ious))}


def gradient_energy(img: np.ndarray) -> float:
    """Mean squared finite-difference gradient magnitude (luma)."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=2)
    gy = np.diff(x, axis=0)
    gx = np.diff(x, axis=1)
    return float((gy**2).mean() + (gx**2).mean())


def gradient_energy_baseline(img: np.ndarray, patch_size: int, threshold: float) -> np.ndarray:
    """Fixed-threshold baseline: a patch is blurry when its gradient energy
    falls below ``threshold``. Returns one 0/1 value per patch."""
    grid = imageops.PatchGrid.for_image(img.shape[0], img.shape[1], patch_size)
    vals = np.array([gradient_energy(p) for p in imageops.unfold(img, grid)])
    return (vals < threshold).astype(np.float32)


def fit_gradient_threshold(energies: np.ndarray, labels: np.ndarray) -> float:
    """Best single threshold on the training set (upper bound for the baseline)."""
    order = np.argsort(energies)
    e = energies[order]; y = labels[order]
    candidates = np.concatenate([[e[0] - 1e-9], (e[:-1] + e[1:]) / 2, [e[-1] + 1e-9]])
    best_t, best_acc = candidates[0], -1.0
    for t in candidates:
        acc = np.mean((energies < t) == (labels > 0.5))
        if acc > best_acc:
            best_acc, best_t = acc, t
    return float(best_t)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)


def _load_patch_dataset(manifest: DatasetManifest, root, cfg: DetectorConfig, split="train"):
    xs, ys = [], []
    records = manifest.split(split)
    if not records:
        raise DetectorError(f"no '{split}' records in manifest")
    for rec in records:
        img = imageops.load_png(root / rec.blurred)
        mask = imageops.load_png(root / rec.mask)
        grid = imageops.PatchGrid.for_image(img.shape[0], img.shape[1], cfg.patch_size)
        xs.append(_to_patch_batch(img, grid, cfg.channels))
        ys.append(patch_labels(mask, grid))
    return np.concatenate(xs), np.concatenate(ys)


def train_detector(manifest: DatasetManifest, root, cfg: DetectorConfig,
                   epochs: int = 8, batch_size: int = 256, lr: float = 1e-3,
                   weight_decay: float = 1e-2, seed: int = 0):
    """Train on the manifest's train split. Deterministic per seed; Gumbel
    noise is sampled fresh per patch per step and disabled at eval."""
    x, y = _load_patch_dataset(manifest, root, cfg, "train")
    net = DetectorNet(channels=cfg.channels, patch_size=cfg.patch_size, seed=seed)
    opt = AdamW(net.params.values(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    log = TrainLog()
    n = x.shape[0]
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            logits = net.forward(Tensor(x[idx]))
            noise = Tensor(sample_gumbel(rng, logits.shape))
            probs = ((logits + noise) * (1.0 / cfg.tau)).softmax(axis=1)
            loss = ce_loss(probs[:, 1], y[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        # noise-free loss and accuracy at epoch end
        preds = []
        for start in range(0, n, 1024):
            logits = net.forward(Tensor(x[start : start + 1024])).data
            preds.append(gumbel_softmax(logits, cfg.tau)[:, 1])
        v = np.clip(np.concatenate(preds), _EPS, 1 - _EPS)
        eval_loss = float(-np.mean(y * np.log(v) + (1 - y) * np.log(1 - v)))
        acc = float(np.mean((v > 0.5) == (y > 0.5)))
        log.epochs.append({"epoch": epoch, "loss": eval_loss,
                           "noisy_loss": float(np.mean(losses)), "acc": acc})
    return net, log
