"""Spectral-spatial down-scaling of SD-OCT acquisitions.

A compressed image is formed as

    I_c(l, m) = skip_m( |IDFT(S * T_l)| )

where ``T_l`` keeps the central 1/l of each A-line spectrum and ``skip_m``
keeps every m-th pixel (floor-indexed for non-integer m) along both axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frames import OctImage, SpectralFrame, pixels_of

MIN_WINDOW = 2
MIN_SKIP_SIZE = 8


@dataclass(frozen=True)
class Factors:
    """Spectral factor ``l`` and spatial factor ``m`` (both real, >= 1)."""

    l: float = 1.0
    m: float = 1.0

    def __post_init__(self):
        if not (self.l >= 1 and self.m >= 1):
            raise ValueError(f"factors must be >= 1, got l={self.l}, m={self.m}")

    @property
    def compression_ratio(self) -> float:
        return compression_ratio(self)

    def as_tuple(self):
        return (self.l, self.m)


def compression_ratio(f: Factors) -> float:
    """Fraction of raw spectral samples acquired: 1 / (l * m)."""
    return 1.0 / (f.l * f.m)


def truncate_spectrum_center(frame: SpectralFrame, l: float) -> SpectralFrame:
    """Zero everything outside the centred window of round(N_k / l) samples."""
    if l < 1:
        raise ValueError(f"spectral factor must be >= 1, got {l}")
    n_k = frame.n_k
    width = int(round(n_k / l))
    if width < MIN_WINDOW:
        raise ValueError(f"l={l} leaves a window of {width} samples (< {MIN_WINDOW})")
    start = (n_k - width) // 2
    out = np.zeros_like(frame.samples)
    out[:, start:start + width] = frame.samples[:, start:start + width]
    return SpectralFrame(out, meta={"source": frame.meta, "truncate_center": l})


def drop_spectrum_uniform(frame: SpectralFrame, l) -> SpectralFrame:
    """Keep only samples whose index is a multiple of the integer ``l``."""
    if isinstance(l, bool) or float(l) != int(l):
        raise ValueError(f"uniform dropping needs an integer factor, got {l}")
    l = int(l)
    if l < 1:
        raise ValueError(f"spectral factor must be >= 1, got {l}")
    out = np.zeros_like(frame.samples)
    out[:, ::l] = frame.samples[:, ::l]
    return SpectralFrame(out, meta={"source": frame.meta, "drop_uniform": l})


def _magnitude(frame: SpectralFrame, log_compress: bool) -> np.ndarray:
    n_k = frame.n_k
    depth = np.fft.ifft(frame.samples.astype(np.float64), axis=1)[:, : n_k // 2]
    mag = np.abs(depth).T
    if log_compress:
        mag = 20.0 * np.log10(mag + 1e-6)
    return mag


def _normalise(mag, lo, hi):
    if hi <= lo:
        return np.zeros_like(mag, dtype=np.float32)
    return np.clip((mag - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def reconstruct_reference(frame: SpectralFrame, log_compress: bool = False) -> OctImage:
    """Full-spectrum B-scan: per-A-line |IDFT|, positive depths, min-max scaled.

    The output is N_k/2 x W_lines with depth running down the rows.  An
    all-zero frame yields an all-zero image.
    """
    mag = _magnitude(frame, log_compress)
    lo, hi = float(mag.min()), float(mag.max())
    return OctImage(_normalise(mag, lo, hi), provenance="reference", intensity_range=(lo, hi),
                    extra={"log_compress": log_compress})


def skip_indices(n: int, m: float) -> np.ndarray:
    """Ascending unique floor(i*m) for i = 0, 1, ... while below n."""
    if m < 1:
        raise ValueError(f"spatial factor must be >= 1, got {m}")
    i = np.arange(int(math.ceil(n / m)) + 1)
    idx = np.floor(i * m).astype(np.int64)
    return np.unique(idx[idx < n])


def skip_spatial(image, m: float) -> OctImage:
    """Keep rows and columns at floor-indexed positions floor(i*m)."""
    px = pixels_of(image)
    rows = skip_indices(px.shape[0], m)
    cols = skip_indices(px.shape[1], m)
    if len(rows) < MIN_SKIP_SIZE or len(cols) < MIN_SKIP_SIZE:
        raise ValueError(f"skipping {px.shape} by m={m} gives {len(rows)}x{len(cols)}, "
                         f"below the {MIN_SKIP_SIZE}x{MIN_SKIP_SIZE} minimum")
    out = px[np.ix_(rows, cols)]
    if isinstance(image, OctImage):
        return OctImage(out, image.axial_pixel_pitch * m, image.lateral_pixel_pitch * m,
                        provenance=image.provenance, factors=image.factors,
                        intensity_range=image.intensity_range, extra=dict(image.extra))
    return OctImage(out)


def spectral_image(frame: SpectralFrame, l: float, mode: str = "center",
                   log_compress: bool = False) -> OctImage:
    """Spectrally degraded image on the full pixel grid (no spatial skipping).

    Scaled with the min-max map of the frame's own full-spectrum reference so
    intensities are comparable with it.
    """
    if mode == "center":
        reduced = truncate_spectrum_center(frame, l)
    elif mode == "uniform":
        reduced = drop_spectrum_uniform(frame, l)
    else:
        raise ValueError(f"mode must be 'center' or 'uniform', got {mode!r}")
    ref_mag = _magnitude(frame, log_compress)
    lo, hi = float(ref_mag.min()), float(ref_mag.max())
    mag = ref_mag if l == 1 else _magnitude(reduced, log_compress)
    return OctImage(_normalise(mag, lo, hi), provenance="degraded", factors=Factors(l, 1.0),
                    intensity_range=(lo, hi), extra={"mode": mode, "log_compress": log_compress})


def degrade(frame: SpectralFrame, f: Factors, mode: str = "center",
            log_compress: bool = False) -> OctImage:
    """Compressed acquisition at factors ``f``.

    Spectral reduction, then |IDFT| scaled like the reference, then spatial
    skipping.  ``extra["compression_ratio"]`` carries 1/(l*m).
    """
    img = spectral_image(frame, f.l, mode, log_compress)
    if f.m != 1:
        img = skip_spatial(img, f.m)
    img.provenance = "degraded"
    img.factors = f
    img.extra["mode"] = mode
    img.extra["compression_ratio"] = compression_ratio(f)
    return img
