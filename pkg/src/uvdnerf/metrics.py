"""Image quality metrics restricted to the subject's bounding box."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])

# (y0, y1, x0, x1), end-exclusive.
Box = tuple[int, int, int, int]


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {a.shape} vs {b.shape}")


def crop(image: np.ndarray, box: Box | None) -> np.ndarray:
    if box is None:
        return image
    y0, y1, x0, x1 = box
    return image[y0:y1, x0:x1]


def mask_bounding_box(mask: np.ndarray) -> Box | None:
    """Tight box around the nonzero pixels of ``mask``, or None when empty."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    if not len(rows):
        return None
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def expand_box(box: Box, shape: tuple[int, ...], min_size: int = SSIM_WINDOW) -> Box:
    """Grow ``box`` symmetrically to at least ``min_size`` per side within ``shape``."""
    height, width = shape[:2]
    if height < min_size or width < min_size:
        raise ValueError(f"Image of {height}x{width} pixels is smaller than {min_size}x{min_size}")

    def grow(lo: int, hi: int, limit: int) -> tuple[int, int]:
        missing = min_size - (hi - lo)
        if missing <= 0:
            return lo, hi
        lo -= missing // 2
        hi += missing - missing // 2
        if lo < 0:
            hi -= lo
            lo = 0
        if hi > limit:
            lo -= hi - limit
            hi = limit
        return lo, hi

    y0, y1 = grow(box[0], box[1], height)
    x0, x1 = grow(box[2], box[3], width)
    return y0, y1, x0, x1


def psnr(a: np.ndarray, b: np.ndarray, box: Box | None = None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((crop(a, box) - crop(b, box)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ LUMA


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian kernel."""
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray, box: Box | None = None) -> float:
    """Mean SSIM of the grayscale images over all valid window positions.

    Raises:
        ValueError: Shapes differ, or the (cropped) image is smaller than the window
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    x = grayscale(crop(a, box))
    y = grayscale(crop(b, box))
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape}")
    window = gaussian_window()

    def filt(img: np.ndarray) -> np.ndarray:
        return convolve2d(img, window, mode="valid")

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))
