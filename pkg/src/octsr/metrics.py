"""Image quality metrics and axial spatial-frequency analysis.

Images are expected in [0, 1], so PSNR uses a peak value of 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frames import pixels_of

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PROFILE_EPS = 1e-12


def _pair(a, b):
    x = np.asarray(pixels_of(a), dtype=np.float64)
    y = np.asarray(pixels_of(b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    x, y = _pair(a, b)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation with taps ``g`` along both axes."""
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim_map(a, b):
    x, y = _pair(a, b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = _filter_valid(x * x, g) - mu_xx
    var_y = _filter_valid(y * y, g) - mu_yy
    cov = _filter_valid(x * y, g) - mu_xy
    num = (2 * mu_xy + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(a, b):
    """Mean structural similarity over valid 11x11 Gaussian windows (sigma 1.5)."""
    return float(np.mean(ssim_map(a, b)))


@dataclass
class FrequencyProfile:
    """Per-column log10 DFT magnitudes (W x H) and their column mean (H)."""

    per_column: np.ndarray
    mean: np.ndarray

    def __len__(self):
        return len(self.mean)


def spatial_frequency_profile(img):
    """1-D DFT of every A-line along depth, log10(|X| + 1e-12)."""
    px = np.asarray(pixels_of(img), dtype=np.float64)
    if px.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got {px.shape}")
    spec = np.log10(np.abs(np.fft.fft(px, axis=0)) + PROFILE_EPS).T
    return FrequencyProfile(spec, spec.mean(axis=0))


def profile_distance(p: FrequencyProfile, q: FrequencyProfile):
    """RMS difference of the averaged log profiles."""
    if len(p.mean) != len(q.mean):
        raise ValueError(f"profile lengths differ: {len(p.mean)} vs {len(q.mean)}")
    return float(np.sqrt(np.mean((p.mean - q.mean) ** 2)))


def write_profile_csv(path, profile: FrequencyProfile):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_index", "mean_log_magnitude"])
        for i, v in enumerate(profile.mean):
            w.writerow([i, repr(float(v))])
