"""Intensity-image pipeline: blur, contrast stretch, bilateral filter, Sobel.

Images are (rows, cols) float64 grids aligned with the scan. The azimuth
axis is a 360° panorama, so every filter wraps columns and replicates rows
at the top/bottom border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from featsense.errors import BadKernel
from featsense.scan_io import StructuredScan


@dataclass
class ImagePipelineParams:
    gaussian_sigma: float = 1.0
    gaussian_ksize: int = 5
    bilateral_sigma_space: float = 2.0
    bilateral_sigma_range: float = 0.1
    bilateral_ksize: int = 5
    sobel_threshold: float = 0.5


def _check_kernel(ksize: int):
    if ksize < 1 or ksize % 2 == 0:
        raise BadKernel(f"kernel size must be odd and >= 1, got {ksize}")


def _gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float = 1.0, ksize: int = 5) -> np.ndarray:
    _check_kernel(ksize)
    if sigma <= 0:
        raise BadKernel("sigma must be positive")
    if ksize == 1:
        return img.copy()
    k = _gaussian_kernel(sigma, ksize)
    out = convolve1d(img, k, axis=1, mode="wrap")
    return convolve1d(out, k, axis=0, mode="nearest")


def normalize_histogram(img: np.ndarray) -> np.ndarray:
    """Min-max contrast stretch to [0, 1]; constant images map to zero."""
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _shifted(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # rows replicate at the border, columns wrap
    rows = np.clip(np.arange(img.shape[0]) + dy, 0, img.shape[0] - 1)
    return np.roll(img[rows], -dx, axis=1)


def bilateral_filter(img: np.ndarray, sigma_space: float = 2.0,
                     sigma_range: float = 0.1, ksize: int = 5) -> np.ndarray:
    _check_kernel(ksize)
    if sigma_space <= 0 or sigma_range <= 0:
        raise BadKernel("sigmas must be positive")
    r = ksize // 2
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = _shifted(img, dy, dx)
            w = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_space ** 2))
            w = w * np.exp(-((shifted - img) ** 2) / (2.0 * sigma_range ** 2))
            num += w * shifted
            den += w
    return num / den


_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
_SOBEL_DIFF = np.array([1.0, 0.0, -1.0])


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx = convolve1d(img, _SOBEL_DIFF, axis=1, mode="wrap")
    gx = convolve1d(gx, _SOBEL_SMOOTH, axis=0, mode="nearest")
    gy = convolve1d(img, _SOBEL_SMOOTH, axis=1, mode="wrap")
    gy = convolve1d(gy, _SOBEL_DIFF, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def sobel_edges(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    mask = sobel_magnitude(img) > threshold
    mask[0, :] = False
    mask[-1, :] = False
    mask[:, 0] = False
    mask[:, -1] = False
    return mask


def intensity_edge_mask(scan: StructuredScan,
                        params: ImagePipelineParams | None = None) -> np.ndarray:
    """Full pipeline on the scan's intensity channel; invalid cells read 0."""
    params = params or ImagePipelineParams()
    img = np.where(scan.valid, scan.intensity, 0.0)
    img = gaussian_blur(img, params.gaussian_sigma, params.gaussian_ksize)
    img = normalize_histogram(img)
    img = bilateral_filter(img, params.bilateral_sigma_space,
                           params.bilateral_sigma_range, params.bilateral_ksize)
    return sobel_edges(img, params.sobel_threshold)


def write_pgm(img: np.ndarray, path) -> None:
    """Debug dump of an image (floats in [0,1]) or mask as binary PGM (P5)."""
    a = img.astype(np.float64)
    data = np.clip(a * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(data.tobytes())
