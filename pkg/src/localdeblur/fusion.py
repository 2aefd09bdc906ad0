"""Masked cross-attention feature fusion.

Short-exposure features F_i and encoder features E_i are concatenated
along the spatial (token) axis; the mask-weighted copy drives queries and
keys, the unweighted copy drives values. The E-position half of the
attention output replaces E_i scale for scale.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor
from .imageops import nearest_resize


class FusionError(ValueError):
    pass


class FusionParams:
    """Per-scale bias-free 1x1 Q/K/V projections and a learnable positive
    temperature gamma = exp(g), initialized to sqrt(channels)."""

    def __init__(self, channels: list[int], seed: int = 0, params: dict | None = None,
                 dtype=np.float32):
        self.channels = list(channels)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i, c in enumerate(channels):
                scale = 1.0 / np.sqrt(c)
                for name in ("q", "k", "v"):
                    params[f"s{i}_{name}"] = (rng.standard_normal((c, c)) * scale).astype(np.float32)
                params[f"s{i}_log_gamma"] = np.array(0.5 * np.log(c), dtype=np.float32)
        self.params = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in params.items()}

    def at_scale(self, i: int):
        p = self.params
        return p[f"s{i}_q"], p[f"s{i}_k"], p[f"s{i}_v"], p[f"s{i}_log_gamma"]

    def gamma(self, i: int) -> float:
        return float(np.exp(self.params[f"s{i}_log_gamma"].data))


def _to_tokens(x: Tensor) -> Tensor:
    """(C, h, w) -> (N, C) token matrix."""
    c = x.shape[0]
    return x.reshape(c, x.shape[1] * x.shape[2]).transpose()


def fuse_scale(f: Tensor, e: Tensor, mask: np.ndarray, params: FusionParams,
               scale_index: int) -> Tensor:
    """Fuse one scale; returns a tensor with exactly E's shape."""
    if f.shape != e.shape:
        raise ShapeError(f"fuse_scale: F {f.shape} vs E {e.shape}")
    c, h, w = e.shape
    if mask.shape != (h, w):
        raise ShapeError(f"fuse_scale: mask {mask.shape} vs features {(h, w)}")
    if not (np.all(np.isfinite(f.data)) and np.all(np.isfinite(e.data))):
        raise FusionError("non-finite features")
    wq, wk, wv, log_gamma = params.at_scale(scale_index)
    if wq.shape[0] != c:
        raise ShapeError(f"fuse_scale: params for {wq.shape[0]} channels, features have {c}")

    m = Tensor(np.broadcast_to(mask.astype(f.data.dtype), (c, h, w)).copy())
    masked = Tensor.concat([_to_tokens(f * m), _to_tokens(e * m)], axis=0)   # (2N, C)
    plain = Tensor.concat([_to_tokens(f), _to_tokens(e)], axis=0)            # (2N, C)

    q = masked @ wq
    k = masked @ wk
    v = plain @ wv
    inv_gamma = (-log_gamma).exp()
    attn = ((q @ k.transpose()) * inv_gamma).softmax(axis=1)                 # rows sum to 1
    out = attn @ v                                                           # (2N, C)
    n = h * w
    return out[n:, :].transpose().reshape(c, h, w)


def fuse_pyramid(fs: list[Tensor], es: list[Tensor], mask: np.ndarray,
                 params: FusionParams) -> list[Tensor]:
    """Per-scale fusion with the mask nearest-downsampled to each scale."""
    if len(fs) != len(es):
        raise FusionError(f"scale count mismatch: {len(fs)} vs {len(es)}")
    out = []
    for i, (f, e) in enumerate(zip(fs, es)):
        m_i = nearest_resize(mask, e.shape[1], e.shape[2])
        out.append(fuse_scale(f, e, m_i, params, i))
    return out
