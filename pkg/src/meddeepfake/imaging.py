"""Image decode and preprocessing.

Images are numpy float32 arrays of shape (H, W, 3) with values in [0, 1]
after decode.  Preprocessing resizes the short side to the backbone input
resolution with bilinear sampling, center-crops to a square, and applies
per-channel mean/std normalization.

Only PNG and JPEG are supported; grayscale and alpha inputs are converted
to 3 channels on decode.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageError

SUPPORTED_FORMATS = {"PNG", "JPEG"}


def load_image(path: str | Path) -> np.ndarray:
    """Decode one image to float32 (H, W, 3) in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format not in SUPPORTED_FORMATS:
                raise ImageError(f"{path}: unsupported format {img.format!r} "
                                 f"(PNG and JPEG only)")
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageError(f"{path}: cannot decode image: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"{path}: decoded to unexpected shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError(f"{path}: zero-size image")
    return arr


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float array as an 8-bit PNG (deterministic bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with the half-pixel coordinate convention.

    Output pixel center (i + 0.5) maps to input coordinate
    (i + 0.5) * scale - 0.5; edges clamp.  Linear gradients are preserved
    exactly away from the borders, which is what the tests check against.
    """
    image = np.asarray(image, dtype=np.float32)
    in_h, in_w = image.shape[:2]
    if in_h == 0 or in_w == 0 or out_h <= 0 or out_w <= 0:
        raise ImageError(f"resize: invalid sizes {image.shape[:2]} -> ({out_h}, {out_w})")
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = _axis_coords(out_h, in_h)
    x0, x1, fx = _axis_coords(out_w, in_w)
    top = image[y0][:, x0] * (1 - fx)[None, :, None] + image[y0][:, x1] * fx[None, :, None]
    bot = image[y1][:, x0] * (1 - fx)[None, :, None] + image[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ImageError(f"center_crop: image {h}x{w} smaller than crop {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top:top + size, left:left + size]


def preprocess(image: np.ndarray, target_resolution: int,
               mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
               std: tuple[float, float, float] = (0.5, 0.5, 0.5)) -> np.ndarray:
    """Short-side resize, center crop, then per-channel normalization."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageError(f"preprocess: expected (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ImageError("preprocess: zero-size image")
    if target_resolution <= 0:
        raise ImageError(f"preprocess: bad target resolution {target_resolution}")
    if min(h, w) != target_resolution:
        scale = target_resolution / min(h, w)
        new_h = max(target_resolution, int(round(h * scale)))
        new_w = max(target_resolution, int(round(w * scale)))
        image = resize_bilinear(image, new_h, new_w)
    image = center_crop(image, target_resolution)
    mean_arr = np.asarray(mean, dtype=np.float32).reshape(1, 1, 3)
    std_arr = np.asarray(std, dtype=np.float32).reshape(1, 1, 3)
    return (image - mean_arr) / std_arr
