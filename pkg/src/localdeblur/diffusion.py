"""Toy denoising-diffusion sandbox.

A small pixel-space DDPM on 32x32 crops whose U-Net encoder features are
replaced, scale for scale, by the masked cross-attention fusion of
short-exposure features. The point is the conditioning mechanism, not
image quality: everything runs on the CPU in seconds to minutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamW, ShapeError, Tensor, load_checkpoint, save_checkpoint
from .fusion import FusionParams, fuse_scale
from .imageops import nearest_resize


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise schedule

@dataclass
class DiffusionSchedule:
    """Linear beta schedule. Arrays are indexed t-1 for step t, so
    ``alpha_bar[0]`` is alpha_1 (the convention used throughout)."""

    t_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.t_steps < 1:
            raise DiffusionError(f"need at least 1 step, got {self.t_steps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise DiffusionError(
                f"betas must satisfy 0 < start <= end < 1, got {self.beta_start}, {self.beta_end}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.t_steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not 1 <= t <= schedule.t_steps:
        raise DiffusionError(f"t must be in [1, {schedule.t_steps}], got {t}")
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# timestep embedding

def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    """Standard sin/cos positional embedding of a scalar timestep, (1, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).reshape(1, dim)


# ---------------------------------------------------------------------------
# networks

def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class DiffusionModel:
    """U-Net denoiser + short-exposure reference encoder + fusion parameters.

    Encoder: three conv(3x3)+relu stages with 2x pooling between them, so a
    (h, w) input yields feature scales h, h/2, h/4. The reference encoder
    mirrors those shapes. The decoder consumes the fused features as skip
    connections and predicts the noise residual.
    """

    def __init__(self, in_channels: int = 3, channels: tuple = (16, 32, 64),
                 temb_dim: int = 32, t_steps: int = 200, seed: int = 0,
                 params: dict | None = None, dtype=np.float32):
        if len(channels) != 3:
            raise DiffusionError(f"expected 3 scales of channels, got {channels}")
        self.in_channels = in_channels
        self.channels = tuple(int(c) for c in channels)
        self.temb_dim = temb_dim
        self.t_steps = t_steps
        self.dtype = dtype
        c0, c1, c2 = self.channels
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "enc0_w": _he(rng, (c0, in_channels, 3, 3), dtype), "enc0_b": np.zeros(c0, dtype),
                "enc1_w": _he(rng, (c1, c0, 3, 3), dtype), "enc1_b": np.zeros(c1, dtype),
                "enc2_w": _he(rng, (c2, c1, 3, 3), dtype), "enc2_b": np.zeros(c2, dtype),
                "ref0_w": _he(rng, (c0, in_channels, 3, 3), dtype), "ref0_b": np.zeros(c0, dtype),
                "ref1_w": _he(rng, (c1, c0, 3, 3), dtype), "ref1_b": np.zeros(c1, dtype),
                "ref2_w": _he(rng, (c2, c1, 3, 3), dtype), "ref2_b": np.zeros(c2, dtype),
                "temb0_w": _he(rng, (temb_dim, c0), dtype), "temb0_b": np.zeros(c0, dtype),
                "temb1_w": _he(rng, (temb_dim, c1), dtype), "temb1_b": np.zeros(c1, dtype),
                "temb2_w": _he(rng, (temb_dim, c2), dtype), "temb2_b": np.zeros(c2, dtype),
                "dec1_w": _he(rng, (c1, c2 + c1, 3, 3), dtype), "dec1_b": np.zeros(c1, dtype),
                "dec0_w": _he(rng, (c0, c1 + c0, 3, 3), dtype), "dec0_b": np.zeros(c0, dtype),
                "out_w": _he(rng, (in_channels, c0, 3, 3), dtype),
                "out_b": np.zeros(in_channels, dtype),
            }
            fus = FusionParams(list(self.channels), seed=seed + 7, dtype=dtype)
            params.update({f"fus_{k}": v.data for k, v in fus.params.items()})
        self.params = {k: Tensor(v, requires_grad=True, dtype=dtype)
                       for k, v in params.items()}
        self.fusion = FusionParams.__new__(FusionParams)
        self.fusion.channels = list(self.channels)
        self.fusion.params = {k[len("fus_"):]: v for k, v in self.params.items()
                              if k.startswith("fus_")}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _temb(self, t: int, scale: int) -> Tensor:
        p = self.params
        emb = Tensor(sinusoidal_embedding(t, self.temb_dim), dtype=self.dtype)
        vec = emb @ p[f"temb{scale}_w"] + p[f"temb{scale}_b"]
        c = vec.shape[1]
        return vec.reshape(1, c, 1, 1)

    def encode(self, x: Tensor, t: int) -> list[Tensor]:
        """Noisy-input encoder features at scales h, h/2, h/4."""
        p = self.params
        e0 = (x.conv2d(p["enc0_w"], p["enc0_b"]) + self._temb(t, 0)).relu()
        e1 = (e0.maxpool2d().conv2d(p["enc1_w"], p["enc1_b"]) + self._temb(t, 1)).relu()
        e2 = (e1.maxpool2d().conv2d(p["enc2_w"], p["enc2_b"]) + self._temb(t, 2)).relu()
        return [e0, e1, e2]

    def encode_ref(self, r: Tensor) -> list[Tensor]:
        """Short-exposure reference features, shape-matched to encode()."""
        p = self.params
        f0 = r.conv2d(p["ref0_w"], p["ref0_b"]).relu()
        f1 = f0.maxpool2d().conv2d(p["ref1_w"], p["ref1_b"]).relu()
        f2 = f1.maxpool2d().conv2d(p["ref2_w"], p["ref2_b"]).relu()
        return [f0, f1, f2]

    def decode(self, feats: list[Tensor]) -> Tensor:
        p = self.params
        d1 = Tensor.concat([feats[2].upsample2(), feats[1]], axis=1)
        d1 = d1.conv2d(p["dec1_w"], p["dec1_b"]).relu()
        d0 = Tensor.concat([d1.upsample2(), feats[0]], axis=1)
        d0 = d0.conv2d(p["dec0_w"], p["dec0_b"]).relu()
        return d0.conv2d(p["out_w"], p["out_b"])

    def predict(self, x_t, t: int, ref, mask: np.ndarray) -> Tensor:
        """Predicted noise for a batch: encoder features are swapped for the
        masked-attention fusion with the reference features before decoding."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=self.dtype)
        ref = ref if isinstance(ref, Tensor) else Tensor(ref, dtype=self.dtype)
        if x_t.data.ndim != 4 or ref.data.ndim != 4:
            raise ShapeError("predict expects (N, C, H, W) batches")
        if x_t.shape != ref.shape:
            raise ShapeError(f"input {x_t.shape} vs reference {ref.shape}")
        n, _, h, w = x_t.shape
        if mask.shape != (n, h, w):
            raise ShapeError(f"mask {mask.shape} vs batch {(n, h, w)}")
        es = self.encode(x_t, t)
        fs = self.encode_ref(ref)
        fused = []
        for i, (e, f) in enumerate(zip(es, fs)):
            c, hi, wi = e.shape[1], e.shape[2], e.shape[3]
            per_sample = []
            for j in range(n):
                m_i = nearest_resize(mask[j].astype(np.float64), hi, wi)
                d = fuse_scale(f[j], e[j], m_i, self.fusion, i)
                per_sample.append(d.reshape(1, c, hi, wi))
            fused.append(Tensor.concat(per_sample, axis=0) if n > 1 else per_sample[0])
        return self.decode(fused)

    def save(self, path):
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path):
        raw = load_checkpoint(path)
        channels = tuple(raw[f"enc{i}_w"].shape[0] for i in range(3))
        return cls(in_channels=raw["enc0_w"].shape[1], channels=channels,
                   temb_dim=raw["temb0_w"].shape[0], params=raw)


# ---------------------------------------------------------------------------
# training

def train_step(model: DiffusionModel, batch: dict, schedule: DiffusionSchedule,
               opt: AdamW, rng: np.random.Generator, t: int | None = None,
               noise: np.ndarray | None = None) -> float:
    """One denoising step on {x0, ref, mask}; returns the MSE loss value.

    ``t`` and ``noise`` are drawn fresh from ``rng`` unless pinned, which
    turns the step into a deterministic objective (useful for overfit runs)."""
    x0 = np.asarray(batch["x0"], dtype=model.dtype)
    ref = np.asarray(batch["ref"], dtype=model.dtype)
    mask = np.asarray(batch["mask"])
    if t is None:
        t = int(rng.integers(1, schedule.t_steps + 1))
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    noise = noise.astype(model.dtype)
    x_t = forward_noise(x0, t, noise, schedule).astype(model.dtype)
    pred = model.predict(x_t, t, ref, mask)
    err = pred - Tensor(noise, dtype=model.dtype)
    loss = (err * err).mean()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"diffusion loss diverged at t={t}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.data)


def train_diffusion(crops: list[dict], steps: int, seed: int = 0,
                    lr: float = 2e-3, batch_size: int = 2,
                    model: DiffusionModel | None = None,
                    schedule: DiffusionSchedule | None = None):
    """Train on a list of {x0, ref, mask} crops; deterministic per seed."""
    if not crops:
        raise DiffusionError("no training crops")
    schedule = schedule or DiffusionSchedule()
    model = model or DiffusionModel(t_steps=schedule.t_steps, seed=seed)
    opt = AdamW(model.params.values(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(crops), size=batch_size)
        batch = {
            "x0": np.stack([crops[i]["x0"] for i in idx]),
            "ref": np.stack([crops[i]["ref"] for i in idx]),
            "mask": np.stack([crops[i]["mask"] for i in idx]),
        }
        losses.append(train_step(model, batch, schedule, opt, rng))
    return model, losses


# ---------------------------------------------------------------------------
# sampling and refinement

def _denoise_from(model: DiffusionModel, x: np.ndarray, t0: int, ref: np.ndarray,
                  mask: np.ndarray, schedule: DiffusionSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """Ancestral reverse process from step t0 down to 1."""
    for t in range(t0, 0, -1):
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        ab = schedule.alpha_bar[t - 1]
        eps = model.predict(x[None], t, ref[None], mask[None]).data[0]
        x = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            ab_prev = schedule.alpha_bar[t - 2]
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
            x = x + sigma * rng.standard_normal(x.shape).astype(x.dtype)
    return x


def sample(model: DiffusionModel, ref: np.ndarray, mask: np.ndarray,
           schedule: DiffusionSchedule, seed: int = 0) -> np.ndarray:
    """Draw one image from pure noise, conditioned on (ref, mask)."""
    ref = np.asarray(ref, dtype=model.dtype)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ref.shape).astype(model.dtype)
    x = _denoise_from(model, x, schedule.t_steps, ref, mask, schedule, rng)
    return np.clip(x, 0.0, 1.0)


def refine(h_img: np.ndarray, ref: np.ndarray, mask: np.ndarray,
           model: DiffusionModel, schedule: DiffusionSchedule,
           strength: float, seed: int = 0,
           recompose_base: np.ndarray | None = None) -> np.ndarray:
    """Partially re-noise a restored image and denoise it back.

    ``strength`` in (0, 1] picks the starting step t0 = round(strength * T);
    small values perturb H only slightly. With ``recompose_base`` given, the
    result outside the mask is replaced by that base image bit-exact.
    """
    if not 0 < strength <= 1:
        raise DiffusionError(f"strength must be in (0, 1], got {strength}")
    h_img = np.asarray(h_img, dtype=model.dtype)
    ref = np.asarray(ref, dtype=model.dtype)
    t0 = max(1, int(round(strength * schedule.t_steps)))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(h_img.shape).astype(model.dtype)
    x = forward_noise(h_img, t0, noise, schedule).astype(model.dtype)
    x = _denoise_from(model, x, t0, ref, mask, schedule, rng)
    out = np.clip(x, 0.0, 1.0)
    if recompose_base is not None:
        base = np.asarray(recompose_base, dtype=out.dtype)
        keep = mask[None] > 0
        out = np.where(keep, out, base)
    return out
