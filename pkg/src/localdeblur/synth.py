"""Synthetic locally-blurred scenes.

Each record is a triplet plus mask: a sharp ground-truth image, a locally
blurred version (a moving textured object blurred with a line-segment
motion kernel over a static background), a dark/noisy short-exposure
companion, and the ground-truth blur mask.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageops

MANIFEST_VERSION = 1


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# motion kernel

@dataclass(frozen=True)
class MotionKernel:
    length: float
    angle: float
    taps: np.ndarray  # 2-D, sums to 1

    @property
    def radius(self) -> int:
        return self.taps.shape[0] // 2


def make_motion_kernel(length: float, angle: float) -> MotionKernel:
    """Rasterize a line-segment PSF with bilinear tap weights, unit mass."""
    if length < 1:
        raise SynthError(f"kernel length must be >= 1, got {length}")
    half = (length - 1) / 2.0
    r = int(math.ceil(half))
    size = 2 * r + 1
    taps = np.zeros((size, size), dtype=np.float64)
    n_samples = max(1, int(math.ceil(length)))
    dx, dy = math.cos(angle), math.sin(angle)
    for s in np.linspace(-half, half, n_samples):
        x, y = r + s * dx, r + s * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                if wy * wx > 0:
                    taps[y0 + oy, x0 + ox] += wy * wx
    taps /= taps.sum()
    return MotionKernel(length=length, angle=angle, taps=taps)


def _convolve2d(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-padded 2-D convolution, one channel at a time."""
    r = taps.shape[0] // 2
    pad = [(r, r), (r, r)] + ([(0, 0)] if img.ndim == 3 else [])
    xp = np.pad(img.astype(np.float64), pad)
    h, w = img.shape[:2]
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(taps.shape[0]):
        for j in range(taps.shape[1]):
            if taps[i, j] != 0:
                out += taps[i, j] * xp[i : i + h, j : j + w]
    return out


def dilate_square(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)^2 structuring element."""
    if radius <= 0:
        return (mask > 0).astype(np.float32)
    return (imageops.box_sum((mask > 0).astype(np.float64), radius) > 0).astype(np.float32)


# ---------------------------------------------------------------------------
# compositing

def composite_local_blur(sharp: np.ndarray, object_mask: np.ndarray, kernel: MotionKernel,
                         background: np.ndarray | None = None):
    """Blur the moving object layer and composite it over the static background.

    ``background`` is the scene without the object; when not supplied, the
    object region of ``sharp`` is treated as empty (zeros). Returns
    (B, M_gt): the locally blurred image and the dilated blur mask. Outside
    M_gt, B equals ``sharp`` bit-exact.
    """
    sharp = imageops.validate_image(sharp, "sharp")
    if object_mask.shape[:2] != sharp.shape[:2]:
        raise SynthError(f"mask {object_mask.shape} vs sharp {sharp.shape}")
    alpha = (object_mask > 0).astype(np.float64)
    m_gt = dilate_square(alpha, int(math.ceil(kernel.length / 2)))

    a3 = alpha[:, :, None] if sharp.ndim == 3 else alpha
    if background is None:
        bg = sharp.astype(np.float64) * (1.0 - a3)
    else:
        if background.shape != sharp.shape:
            raise SynthError(f"background {background.shape} vs sharp {sharp.shape}")
        bg = background.astype(np.float64)
    obj = sharp.astype(np.float64) * a3  # premultiplied moving layer
    blurred_obj = _convolve2d(obj, kernel.taps)
    blurred_alpha = _convolve2d(a3, kernel.taps)
    blurred = blurred_obj + (1.0 - blurred_alpha) * bg
    b = np.where((m_gt > 0)[:, :, None] if sharp.ndim == 3 else m_gt > 0,
                 np.clip(blurred, 0.0, 1.0), sharp.astype(np.float64))
    return b.astype(sharp.dtype), m_gt


# ---------------------------------------------------------------------------
# short exposure

def simulate_short_exposure(sharp: np.ndarray, s: float, sigma: float, seed: int) -> np.ndarray:
    """Scale brightness in HSV space, add Gaussian noise, clamp to [0,1]."""
    if not 0 < s <= 1:
        raise SynthError(f"exposure scale must be in (0,1], got {s}")
    if sigma < 0:
        raise SynthError(f"noise sigma must be >= 0, got {sigma}")
    hsv = imageops.rgb_to_hsv(sharp)
    hsv[:, :, 2] *= s
    out = imageops.hsv_to_rgb(hsv).astype(np.float64)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# scene synthesis

@dataclass
class SceneSpec:
    """Everything needed to deterministically regenerate one record."""

    seed: int
    size: tuple[int, int] = (128, 128)
    blur_length_range: tuple[float, float] = (10.0, 20.0)
    object_size_range: tuple[int, int] = (44, 72)
    exposure_scale: float = 0.55
    noise_sigma: float = 0.01
    split: str = "train"


def _textured_field(rng: np.random.Generator, h: int, w: int, cell: int, amp: float,
                    grain: float) -> np.ndarray:
    """Coarse bilinear-interpolated noise plus fine sharp grain, 3 channels."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.random((gh, gw, 3))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0 = ys.astype(int); x0 = xs.astype(int)
    fy = (ys - y0)[:, None, None]; fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    field = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
             + c10 * fy * (1 - fx) + c11 * fy * fx)
    field = 0.5 + amp * (field - 0.5)
    field += grain * rng.standard_normal((h, w, 3))
    return np.clip(field, 0.0, 1.0)


def _object_mask(rng: np.random.Generator, h: int, w: int, size: int) -> np.ndarray:
    """Random ellipse or rectangle placed away from the border."""
    size = min(size, min(h, w) // 2)
    margin = min(size // 2 + 10, min(h, w) // 2 - 2)
    cy = rng.integers(margin, h - margin)
    cx = rng.integers(margin, w - margin)
    ry = size // 2
    rx = int(ry * rng.uniform(0.6, 1.4))
    rx = max(8, min(rx, w // 2 - 12))
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return mask.astype(np.float32)


def render_scene(spec: SceneSpec):
    """Build one record: returns dict with sharp, blurred, short, mask, params."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    bg_cell = int(rng.integers(8, 33))
    bg_amp = rng.uniform(0.3, 0.9)
    bg_grain = rng.uniform(0.02, 0.10)
    background = _textured_field(rng, h, w, bg_cell, bg_amp, bg_grain)

    obj_size = int(rng.integers(*spec.object_size_range))
    mask = _object_mask(rng, h, w, obj_size)
    obj_cell = int(rng.integers(4, 17))
    obj_amp = rng.uniform(0.4, 1.0)
    obj_grain = rng.uniform(0.02, 0.10)
    obj_tex = _textured_field(rng, h, w, obj_cell, obj_amp, obj_grain)
    tint = rng.uniform(0.3, 1.0, size=3)
    obj_tex = np.clip(obj_tex * tint[None, None, :], 0.0, 1.0)

    sharp = np.where(mask[:, :, None] > 0, obj_tex, background).astype(np.float32)

    length = rng.uniform(*spec.blur_length_range)
    angle = rng.uniform(0.0, math.pi)
    kernel = make_motion_kernel(length, angle)
    blurred, m_gt = composite_local_blur(sharp, mask, kernel, background=background.astype(np.float32))

    short = simulate_short_exposure(sharp, spec.exposure_scale, spec.noise_sigma,
                                    seed=spec.seed + 101)
    return {
        "sharp": sharp,
        "blurred": blurred,
        "short": short,
        "mask": m_gt,
        "params": {"blur_length": length, "blur_angle": angle,
                   "object_size": obj_size},
    }


# ---------------------------------------------------------------------------
# manifest

@dataclass
class DatasetRecord:
    id: str
    split: str
    blurred: str
    short: str
    sharp: str
    mask: str
    scene: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    version: int
    records: list[DatasetRecord]

    def split(self, tag: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == tag]

    def to_json(self) -> str:
        return json.dumps(
            {"version": self.version, "records": [asdict(r) for r in self.records]},
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        obj = json.loads(text)
        if obj.get("version") != MANIFEST_VERSION:
            raise SynthError(f"unsupported manifest version {obj.get('version')}")
        recs = [DatasetRecord(**r) for r in obj["records"]]
        return cls(version=obj["version"], records=recs)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        m = cls.from_json(path.read_text())
        ids = [r.id for r in m.records]
        if len(set(ids)) != len(ids):
            raise SynthError("duplicate record ids in manifest")
        for r in m.records:
            for key in ("blurred", "short", "sharp", "mask"):
                p = path.parent / getattr(r, key)
                if not p.exists():
                    raise SynthError(f"missing asset for record {r.id}: {p}")
        return m


def generate_dataset(specs: list[SceneSpec], out_dir) -> DatasetManifest:
    """Render all specs, write PNG assets and a JSON manifest; deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, spec in enumerate(specs):
        rec_id = f"{spec.split}-{i:05d}"
        scene = render_scene(spec)
        paths = {}
        for key in ("blurred", "short", "sharp", "mask"):
            rel = f"{rec_id}_{key}.png"
            imageops.save_png(out_dir / rel, scene[key])
            paths[key] = rel
        records.append(DatasetRecord(
            id=rec_id, split=spec.split, scene={"seed": spec.seed, **scene["params"]},
            **paths,
        ))
    manifest = DatasetManifest(version=MANIFEST_VERSION, records=records)
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_specs(n_train: int, n_eval: int, size=(128, 128), seed: int = 0,
                  **kwargs) -> list[SceneSpec]:
    specs = [SceneSpec(seed=seed + i, size=size, split="train", **kwargs)
             for i in range(n_train)]
    specs += [SceneSpec(seed=seed + 90000 + i, size=size, split="eval", **kwargs)
              for i in range(n_eval)]
    return specs
