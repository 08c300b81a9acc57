"""Non-learned upsampling of LR images onto the floor(m*H) x floor(m*W) grid.

Output pixel (h, w) sits at source coordinate (h/m, w/m), the same placement
the reconstruction network uses.
"""

from __future__ import annotations

import math

import numpy as np

from .frames import OctImage, pixels_of

CUBIC_A = -0.5


def output_size(n, m):
    return int(math.floor(m * n))


def source_index(n_out, m):
    """floor(i / m) for each output index i."""
    return np.floor(np.arange(n_out) / m).astype(np.int64)


def _wrap(image, out, m, method):
    extra = {"upsample": method}
    if isinstance(image, OctImage):
        return OctImage(out, image.axial_pixel_pitch / m, image.lateral_pixel_pitch / m,
                        provenance="reconstructed", factors=image.factors,
                        intensity_range=image.intensity_range, extra=extra)
    return OctImage(out, provenance="reconstructed", extra=extra)


def upsample_nearest(image, m):
    if m < 1:
        raise ValueError(f"magnification must be >= 1, got {m}")
    px = pixels_of(image)
    H, W = px.shape
    rows = source_index(output_size(H, m), m)
    cols = source_index(output_size(W, m), m)
    return _wrap(image, px[np.ix_(rows, cols)], m, "nearest")


def cubic_kernel(t, a=CUBIC_A):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0),
    )


def _cubic_matrix(n_in, n_out, m):
    """Interpolation matrix n_out x n_in with edge-clamped taps."""
    x = np.arange(n_out) / m
    base = np.floor(x).astype(np.int64)
    frac = x - base
    mat = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = np.clip(base + off, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), idx), cubic_kernel(frac - off))
    return mat


def upsample_bicubic(image, m):
    """Separable cubic convolution (a = -0.5), edge clamping, output clipped to [0, 1]."""
    if m < 1:
        raise ValueError(f"magnification must be >= 1, got {m}")
    px = np.asarray(pixels_of(image), dtype=np.float64)
    H, W = px.shape
    if H < 4 or W < 4:
        raise ValueError(f"bicubic needs at least 4x4 input, got {px.shape}")
    rmat = _cubic_matrix(H, output_size(H, m), m)
    cmat = _cubic_matrix(W, output_size(W, m), m)
    out = np.clip(rmat @ px @ cmat.T, 0.0, 1.0).astype(np.float32)
    return _wrap(image, out, m, "bicubic")
