"""Mask-gated guided image restoration.

Per window, an affine map from the short-exposure reference R to the
blurry input B is fit by ridge regression over masked pixels only; the
output is gated so pixels outside the mask pass through unchanged. All
windowed moments run on integral images, so runtime does not depend on
the radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import box_sum, validate_image

_DET_TINY = 1e-12


class FilterError(ValueError):
    pass


@dataclass
class GuidedFilterConfig:
    radius: int = 12
    eps: float = 1e-4

    def __post_init__(self):
        if self.radius < 1:
            raise FilterError(f"radius must be >= 1, got {self.radius}")
        if self.eps <= 0:
            raise FilterError(f"eps must be > 0, got {self.eps}")


@dataclass
class WindowCoeffs:
    """Per-window affine coefficients and their per-pixel aggregates."""

    a: np.ndarray
    b: np.ndarray
    a_mean: np.ndarray
    b_mean: np.ndarray
    masked_count: np.ndarray


def _check_shapes(b, r, m=None):
    b = validate_image(b, "blurry")
    r = validate_image(r, "reference")
    if b.shape != r.shape:
        raise FilterError(f"shape mismatch: blurry {b.shape} vs reference {r.shape}")
    if m is not None:
        if m.shape != b.shape[:2]:
            raise FilterError(f"mask shape {m.shape} vs image {b.shape[:2]}")
        if not np.all((m == 0) | (m == 1)):
            raise FilterError("mask must be binary")
    return b, r


def _solve_channel(bc: np.ndarray, rc: np.ndarray, m: np.ndarray, radius: int, eps: float):
    """Exact minimizer per window of sum_i m_i^2 (a r_i + b - b_i)^2 + eps a^2,
    via the 2x2 normal equations; windows with no masked pixels get (0, 0)."""
    m = m.astype(np.float64)
    rc = rc.astype(np.float64)
    bc = bc.astype(np.float64)
    n = box_sum(m, radius)                 # sum M^2 (M binary)
    s_r = box_sum(m * rc, radius)
    s_b = box_sum(m * bc, radius)
    s_rr = box_sum(m * rc * rc, radius)
    s_rb = box_sum(m * rc * bc, radius)
    det = (s_rr + eps) * n - s_r * s_r
    has_mask = n > 0
    safe_det = np.abs(det) > _DET_TINY
    ok = has_mask & safe_det
    a = np.zeros_like(n)
    b = np.zeros_like(n)
    a[ok] = (n[ok] * s_rb[ok] - s_r[ok] * s_b[ok]) / det[ok]
    b[ok] = ((s_rr[ok] + eps) * s_b[ok] - s_r[ok] * s_rb[ok]) / det[ok]
    # degenerate but non-empty window: constant fit through the masked mean
    deg = has_mask & ~safe_det
    b[deg] = s_b[deg] / n[deg]
    return a, b, n


def _aggregate(a: np.ndarray, b: np.ndarray, n: np.ndarray, radius: int):
    """Mean of (a_k, b_k) over covering windows that saw any masked pixel."""
    valid = (n > 0).astype(np.float64)
    cover = box_sum(valid, radius)
    covered = cover > 0
    a_mean = np.zeros_like(a)
    b_mean = np.zeros_like(b)
    a_mean[covered] = box_sum(a, radius)[covered] / cover[covered]
    b_mean[covered] = box_sum(b, radius)[covered] / cover[covered]
    return a_mean, b_mean


def solve_window_coeffs(blurry: np.ndarray, reference: np.ndarray, mask: np.ndarray,
                        cfg: GuidedFilterConfig) -> list[WindowCoeffs]:
    """Window coefficients per channel (list of one WindowCoeffs per channel)."""
    blurry, reference = _check_shapes(blurry, reference, mask)
    out = []
    for c in range(blurry.shape[2] if blurry.ndim == 3 else 1):
        bc = blurry[:, :, c] if blurry.ndim == 3 else blurry
        rc = reference[:, :, c] if reference.ndim == 3 else reference
        a, b, n = _solve_channel(bc, rc, mask, cfg.radius, cfg.eps)
        a_mean, b_mean = _aggregate(a, b, n, cfg.radius)
        out.append(WindowCoeffs(a=a, b=b, a_mean=a_mean, b_mean=b_mean, masked_count=n))
    return out


def masked_guided_filter(blurry: np.ndarray, reference: np.ndarray, mask: np.ndarray,
                         cfg: GuidedFilterConfig) -> np.ndarray:
    """H(x) = M(x) (a(x) R(x) + b(x)) + (1 - M(x)) B(x).

    Clear pixels (M=0) pass through bit-exact."""
    blurry, reference = _check_shapes(blurry, reference, mask)
    coeffs = solve_window_coeffs(blurry, reference, mask, cfg)
    inside = mask > 0
    out = np.array(blurry, copy=True)
    for c, wc in enumerate(coeffs):
        bc = blurry[:, :, c] if blurry.ndim == 3 else blurry
        rc = reference[:, :, c] if reference.ndim == 3 else reference
        filtered = wc.a_mean * rc.astype(np.float64) + wc.b_mean
        target = out[:, :, c] if out.ndim == 3 else out
        target[inside] = filtered[inside].astype(out.dtype)
    return out


def standard_guided_filter(blurry: np.ndarray, reference: np.ndarray,
                           cfg: GuidedFilterConfig) -> np.ndarray:
    """Classic unmasked guided filter in the same raw-sum convention
    (equivalent to the masked filter with an all-ones mask). Ablation baseline."""
    blurry, reference = _check_shapes(blurry, reference)
    ones = np.ones(blurry.shape[:2], dtype=np.float64)
    out = np.empty_like(blurry, dtype=np.float64)
    for c in range(blurry.shape[2] if blurry.ndim == 3 else 1):
        bc = blurry[:, :, c] if blurry.ndim == 3 else blurry
        rc = reference[:, :, c] if reference.ndim == 3 else reference
        a, b, n = _solve_channel(bc, rc, ones, cfg.radius, cfg.eps)
        a_mean, b_mean = _aggregate(a, b, n, cfg.radius)
        filtered = a_mean * rc.astype(np.float64) + b_mean
        if blurry.ndim == 3:
            out[:, :, c] = filtered
        else:
            out = filtered
    return out.astype(blurry.dtype)
