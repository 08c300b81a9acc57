"""Data containers shared by every stage and their binary file formats.

Spectrum files (``.ocsp``)::

    b"OCSP" | u32 W_lines | u32 N_k | u32 reserved=0 | W_lines*N_k f32, row-major

Image files (``.ocim``)::

    b"OCIM" | u32 H | u32 W | u32 reserved=0 | H*W f32, row-major

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SPECTRUM_MAGIC = b"OCSP"
IMAGE_MAGIC = b"OCIM"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Raised when a binary container is malformed."""


@dataclass
class SpectralFrame:
    """Background-subtracted interferogram of one B-scan, W_lines x N_k."""

    samples: np.ndarray
    meta: Any = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be W_lines x N_k, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("spectral samples must be finite")

    @property
    def w_lines(self) -> int:
        return self.samples.shape[0]

    @property
    def n_k(self) -> int:
        return self.samples.shape[1]


@dataclass
class OctImage:
    """Intensity image with pixels in [0, 1]; rows are depth, columns are A-lines.

    ``provenance`` is ``"reference"``, ``"degraded"`` or ``"reconstructed"``;
    ``factors`` holds the (l, m) pair for the latter two.  ``intensity_range``
    is the (lo, hi) affine map that produced the pixels from raw magnitudes.
    """

    pixels: np.ndarray
    axial_pixel_pitch: float = 1.0
    lateral_pixel_pitch: float = 1.0
    provenance: str = "reference"
    factors: Any = None
    intensity_range: tuple | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"image must be a non-empty H x W array, got shape {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape


def pixels_of(img) -> np.ndarray:
    """Accept either an OctImage or a plain array."""
    return img.pixels if isinstance(img, OctImage) else np.asarray(img)


def _write(path, magic, array):
    array = np.asarray(array, dtype="<f4")
    rows, cols = array.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, rows, cols, 0))
        fh.write(np.ascontiguousarray(array).tobytes())


def _read(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    got, rows, cols, _reserved = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    n = rows * cols
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_spectrum(path, frame: SpectralFrame):
    _write(path, SPECTRUM_MAGIC, frame.samples)


def read_spectrum(path) -> SpectralFrame:
    return SpectralFrame(_read(path, SPECTRUM_MAGIC), meta={"path": str(path)})


def write_image(path, image):
    _write(path, IMAGE_MAGIC, pixels_of(image))


def read_image(path) -> OctImage:
    return OctImage(_read(path, IMAGE_MAGIC), extra={"path": str(path)})


def read_header(path):
    """Return (magic, rows, cols) without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    magic, rows, cols, _ = _HEADER.unpack(head)
    return magic, rows, cols
