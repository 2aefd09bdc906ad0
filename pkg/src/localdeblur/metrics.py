"""Full-reference image quality metrics.

PSNR (optionally restricted to a region) and a windowed SSIM. Both assume
[0, 1] data; identical images report a capped 99 dB PSNR so that reports
stay finite and comparable.
"""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class MetricError(ValueError):
    pass


def _as_float(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """Mean squared error, optionally over a boolean/binary spatial region."""
    a, b = _as_float(a, b)
    d2 = (a - b) ** 2
    if region is None:
        return float(d2.mean())
    region = np.asarray(region) > 0
    if region.shape != a.shape[:2]:
        raise MetricError(f"region {region.shape} vs image {a.shape[:2]}")
    if not region.any():
        raise MetricError("empty region")
    if d2.ndim == 3:
        d2 = d2.mean(axis=2)
    return float(d2[region].mean())


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) on [0,1] data, capped at 99 dB."""
    err = mse(a, b, region)
    if err <= 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP))


def _window_moments(x: np.ndarray, win: int):
    """Means of all win x win sliding windows via cumulative sums."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    sums = (c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win])
    return sums / (win * win)


def ssim(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over sliding windows; color inputs use the channel mean."""
    a, b = _as_float(a, b)
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    if min(a.shape) < win:
        raise MetricError(f"image {a.shape} smaller than {win}x{win} window")
    mu_a = _window_moments(a, win)
    mu_b = _window_moments(b, win)
    var_a = _window_moments(a * a, win) - mu_a**2
    var_b = _window_moments(b * b, win) - mu_b**2
    cov = _window_moments(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def boundary_band(mask: np.ndarray, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` of the mask edge, on either side."""
    from .synth import dilate_square

    m = np.asarray(mask) > 0
    grown = dilate_square(m.astype(np.float64), width) > 0
    shrunk = ~(dilate_square((~m).astype(np.float64), width) > 0)
    return (grown & ~shrunk).astype(np.float32)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Per-pixel finite-difference gradient magnitude of the channel mean."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=2)
    gy = np.zeros_like(x)
    gx = np.zeros_like(x)
    gy[:-1] = np.diff(x, axis=0)
    gx[:, :-1] = np.diff(x, axis=1)
    return np.sqrt(gy**2 + gx**2)


def band_artifact_energy(img: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                         width: int = 2) -> float:
    """Mean excess gradient magnitude in a band around the mask boundary,
    relative to the ground truth's gradients in the same band."""
    band = boundary_band(mask, width) > 0
    if not band.any():
        raise MetricError("mask has no boundary")
    g_img = gradient_magnitude(img)
    g_gt = gradient_magnitude(gt)
    return float(np.abs(g_img[band] - g_gt[band]).mean())
