"""Core image containers and windowed primitives.

Images are numpy arrays of shape (H, W) or (H, W, C) with C in {1, 3},
float32 values in [0, 1]. All window sums run on a summed-area table so
their cost does not depend on the radius.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from matplotlib import colors as _mplcolors
from PIL import Image as _PILImage


class ImageError(ValueError):
    pass


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        pass
    elif img.ndim == 3 and img.shape[2] in (1, 3):
        pass
    else:
        raise ImageError(f"{name}: expected (H,W) or (H,W,1|3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError(f"{name}: non-finite values")
    return img


# ---------------------------------------------------------------------------
# color

def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """RGB -> HSV with hue scaled to [0, 1]. Requires 3 channels."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"rgb_to_hsv: need 3 channels, got shape {img.shape}")
    return _mplcolors.rgb_to_hsv(img.astype(np.float64)).astype(np.float32)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"hsv_to_rgb: need 3 channels, got shape {img.shape}")
    return _mplcolors.hsv_to_rgb(img.astype(np.float64)).astype(np.float32)


# ---------------------------------------------------------------------------
# patch grid / fold / unfold

@dataclass(frozen=True)
class PatchGrid:
    """Bookkeeping for splitting an image into non-overlapping square patches.

    Sizes that are not multiples of ``patch_size`` are reflection-padded to
    the next multiple; outputs are cropped back to the source size.
    """

    patch_size: int
    source_h: int
    source_w: int
    pad_top: int
    pad_left: int
    pad_bottom: int
    pad_right: int
    grid_rows: int
    grid_cols: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise ImageError(f"patch_size must be >= 1, got {patch_size}")
        pad_h = (-height) % patch_size
        pad_w = (-width) % patch_size
        top, left = pad_h // 2, pad_w // 2
        return cls(
            patch_size=patch_size,
            source_h=height,
            source_w=width,
            pad_top=top,
            pad_left=left,
            pad_bottom=pad_h - top,
            pad_right=pad_w - left,
            grid_rows=(height + pad_h) // patch_size,
            grid_cols=(width + pad_w) // patch_size,
        )

    @property
    def padded_h(self) -> int:
        return self.source_h + self.pad_top + self.pad_bottom

    @property
    def padded_w(self) -> int:
        return self.source_w + self.pad_left + self.pad_right

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def patch_slices(self, index: int):
        """Row/col slices of patch ``index`` inside the padded image."""
        r, c = divmod(index, self.grid_cols)
        ps = self.patch_size
        return slice(r * ps, (r + 1) * ps), slice(c * ps, (c + 1) * ps)


def _check_grid(img: np.ndarray, grid: PatchGrid) -> None:
    if img.shape[0] != grid.source_h or img.shape[1] != grid.source_w:
        raise ImageError(
            f"grid built for {grid.source_h}x{grid.source_w}, "
            f"image is {img.shape[0]}x{img.shape[1]}"
        )


def pad_to_grid(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    _check_grid(img, grid)
    pads = [(grid.pad_top, grid.pad_bottom), (grid.pad_left, grid.pad_right)]
    if img.ndim == 3:
        pads.append((0, 0))
    if max(grid.pad_top, grid.pad_bottom, grid.pad_left, grid.pad_right) == 0:
        return img
    return np.pad(img, pads, mode="reflect")


def unfold(img: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Split into non-overlapping patches, row-major order."""
    padded = pad_to_grid(validate_image(img), grid)
    out = []
    for i in range(grid.n_patches):
        ys, xs = grid.patch_slices(i)
        out.append(padded[ys, xs].copy())
    return out

def fold(patches: list[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`unfold`; returns the image cropped to source size."""
    if len(patches) != grid.n_patches:
        raise ImageError(f"expected {grid.n_patches} patches, got {len(patches)}")
    first = np.asarray(patches[0])
    shape = (grid.padded_h, grid.padded_w) + first.shape[2:]
    canvas = np.zeros(shape, dtype=first.dtype)
    for i, p in enumerate(patches):
        ys, xs = grid.patch_slices(i)
        canvas[ys, xs] = p
    return canvas[
        grid.pad_top : grid.pad_top + grid.source_h,
        grid.pad_left : grid.pad_left + grid.source_w,
    ]


# ---------------------------------------------------------------------------
# integral image / box sums

class IntegralImage:
    """Summed-area table with double-precision accumulators."""

    def __init__(self, img: np.ndarray):
        img = validate_image(img)
        self.height = img.shape[0]
        self.width = img.shape[1]
        sat = np.zeros((self.height + 1, self.width + 1) + img.shape[2:], dtype=np.float64)
        sat[1:, 1:] = np.cumsum(np.cumsum(img, axis=0, dtype=np.float64), axis=1)
        self.sat = sat

    def rect_sum(self, y0: int, x0: int, y1: int, x1: int) -> np.ndarray | float:
        """Sum over rows [y0, y1) and cols [x0, x1)."""
        s = self.sat
        return s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]

    def window_sums(self, radius: int) -> np.ndarray:
        """Per-pixel sums over (2r+1)^2 windows clipped at the borders."""
        h, w = self.height, self.width
        y0 = np.clip(np.arange(h) - radius, 0, h)
        y1 = np.clip(np.arange(h) + radius + 1, 0, h)
        x0 = np.clip(np.arange(w) - radius, 0, w)
        x1 = np.clip(np.arange(w) + radius + 1, 0, w)
        s = self.sat
        return (
            s[y1[:, None], x1[None, :]]
            - s[y0[:, None], x1[None, :]]
            - s[y1[:, None], x0[None, :]]
            + s[y0[:, None], x0[None, :]]
        )


def box_sum(img: np.ndarray, radius: int, dtype=np.float64) -> np.ndarray:
    """Sliding-window sum over clipped (2r+1)^2 windows, O(1) per pixel."""
    if radius < 0:
        raise ImageError(f"radius must be >= 0, got {radius}")
    img = validate_image(img)
    if radius == 0:
        return img.astype(dtype)
    return IntegralImage(img).window_sums(radius).astype(dtype)


def box_count(height: int, width: int, radius: int) -> np.ndarray:
    """Number of valid pixels in each clipped (2r+1)^2 window."""
    ys = np.minimum(np.arange(height) + radius + 1, height) - np.maximum(
        np.arange(height) - radius, 0
    )
    xs = np.minimum(np.arange(width) + radius + 1, width) - np.maximum(
        np.arange(width) - radius, 0
    )
    return (ys[:, None] * xs[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# resampling

def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize: out(y,x) = in(floor(y*h/out_h), floor(x*w/out_w))."""
    if out_h <= 0 or out_w <= 0:
        raise ImageError(f"target dims must be positive, got {out_h}x{out_w}")
    arr = np.asarray(arr)
    in_h, in_w = arr.shape[0], arr.shape[1]
    ys = (np.arange(out_h) * in_h) // out_h
    xs = (np.arange(out_w) * in_w) // out_w
    return arr[ys[:, None], xs[None, :]]


# ---------------------------------------------------------------------------
# I/O

def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Round-half-up quantization to 8 bits."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    img = validate_image(img)
    q = quantize_u8(img)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    mode = "L" if q.ndim == 2 else "RGB"
    _PILImage.fromarray(q, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with _PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im)
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


_RAW_MAGIC = b"LDRAW1\x00"


def save_raw(path, arr: np.ndarray) -> None:
    """Lossless float dump: magic, ndim/dims header, little-endian float32."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        f.write(arr.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(_RAW_MAGIC))
        if magic != _RAW_MAGIC:
            raise ImageError(f"bad raw dump magic: {magic!r}")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(shape).astype(np.float32)
