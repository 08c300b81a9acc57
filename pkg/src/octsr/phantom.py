"""Synthetic layered-tissue interferograms with paired reference images.

Each A-line spectrum is a sum of cosines, one per reflector,

    s_i = G(i) * sum_j r_j * cos(2*pi * z_j * i / N_k + phi_j) + noise

with ``z_j`` in depth pixels (0 <= z < N_k/2) and ``G`` a Gaussian source
envelope.  Randomness comes from numpy's PCG64 generator; every A-line owns a
stream keyed by (seed, line index), so lines can be generated in any order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import reconstruct_reference
from .frames import OctImage, SpectralFrame

SPLITS = ("train", "val", "test")

# stream tags mixed into the seed sequence
_LINE_SCATTER = 0
_LINE_NOISE = 1
_LAYER_GEOMETRY = 2
_LINE_LAYER = 3


def _stream(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def default_layers():
    return [(0.12, 0.9, 4.0), (0.3, 0.5, 6.0), (0.5, 0.35, 8.0), (0.72, 0.25, 8.0)]


@dataclass
class PhantomConfig:
    """Tissue model.  Layers are (depth_fraction, reflectivity, roughness).

    ``depth_fraction`` is relative to the usable depth N_k/2; roughness is the
    RMS lateral undulation of the boundary in depth pixels.
    ``source_fwhm_fraction=None`` gives a flat source envelope.
    """

    n_k: int = 1024
    w_lines: int = 256
    layers: list = field(default_factory=default_layers)
    scatterer_density: float = 48.0
    scatterer_reflectivity: float = 0.15
    lateral_psf_lines: float = 1.0
    source_fwhm_fraction: float | None = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_k < 8 or self.n_k & (self.n_k - 1):
            raise ValueError(f"n_k must be a power of two >= 8, got {self.n_k}")
        if self.w_lines < 1:
            raise ValueError(f"w_lines must be positive, got {self.w_lines}")
        depths = [float(d) for d, _, _ in self.layers]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"layer depth fractions must be strictly increasing: {depths}")
        for d, r, rough in self.layers:
            if not 0 < d < 1:
                raise ValueError(f"layer depth_fraction {d} must lie in (0, 1) of the usable depth "
                                 "(reflectors beyond N_k/2 alias)")
            if not 0 < r <= 1:
                raise ValueError(f"layer reflectivity {r} must lie in (0, 1]")
            if rough < 0:
                raise ValueError(f"roughness must be >= 0, got {rough}")
        if self.scatterer_density < 0 or self.noise_sigma < 0 or self.lateral_psf_lines < 0:
            raise ValueError("scatterer_density, noise_sigma and lateral_psf_lines must be >= 0")
        if self.source_fwhm_fraction is not None and not 0 < self.source_fwhm_fraction <= 1:
            raise ValueError(f"source_fwhm_fraction must lie in (0, 1], got {self.source_fwhm_fraction}")

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [list(layer) for layer in self.layers]
        return d


def source_envelope(n_k, fwhm_fraction):
    if fwhm_fraction is None:
        return np.ones(n_k)
    i = np.arange(n_k)
    centre = (n_k - 1) / 2.0
    fwhm = fwhm_fraction * n_k
    return np.exp(-4.0 * np.log(2.0) * (i - centre) ** 2 / fwhm ** 2)


def _layer_profiles(cfg: PhantomConfig):
    """Depth (pixels) of every layer boundary at every A-line: n_layers x W."""
    half = cfg.n_k // 2
    x = np.arange(cfg.w_lines) / max(cfg.w_lines, 1)
    rng = _stream(cfg.seed, _LAYER_GEOMETRY)
    profiles = []
    for d, _r, rough in cfg.layers:
        freqs = rng.uniform(0.5, 3.0, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        amps = rng.uniform(0.5, 1.0, size=3)
        wave = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * x + phases[:, None])).sum(0)
        rms = np.sqrt(np.mean(wave ** 2)) if cfg.w_lines > 1 else 0.0
        wave = wave / rms if rms > 0 else np.zeros_like(wave)
        profiles.append(np.clip(d * half + rough * wave, 0, half - 1))
    return np.array(profiles).reshape(len(cfg.layers), cfg.w_lines)


def _scatterers(cfg: PhantomConfig, line):
    """Random point scatterers owned by one A-line: (depths, amplitudes, phases)."""
    rng = _stream(cfg.seed, _LINE_SCATTER, line)
    half = cfg.n_k // 2
    n = rng.poisson(cfg.scatterer_density)
    top = cfg.layers[0][0] if cfg.layers else 0.05
    depth = rng.uniform(top, 0.95, size=n) * half
    amp = cfg.scatterer_reflectivity * rng.exponential(1.0, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    return depth, amp, phase


def _cosines(depth, amp, phase, n_k):
    i = np.arange(n_k)
    if len(depth) == 0:
        return np.zeros(n_k)
    return amp @ np.cos(2 * np.pi * np.outer(depth, i) / n_k + phase[:, None])


def _scatter_spectrum(cfg, line, cache):
    if cache is not None and line in cache:
        return cache[line]
    spec = _cosines(*_scatterers(cfg, line), cfg.n_k)
    if cache is not None:
        cache[line] = spec
    return spec


def generate_line(cfg: PhantomConfig, line, profiles=None, envelope=None, noise=True, cache=None):
    """Spectrum of a single A-line (float64, before float32 storage).

    ``cache`` may be a dict shared between calls to reuse per-line scatterer
    spectra; results are identical with or without it.
    """
    n_k = cfg.n_k
    profiles = _layer_profiles(cfg) if profiles is None else profiles
    envelope = source_envelope(n_k, cfg.source_fwhm_fraction) if envelope is None else envelope

    layer_rng = _stream(cfg.seed, _LINE_LAYER, line)
    refl = np.array([r for _d, r, _rough in cfg.layers], dtype=float)
    layer_phase = layer_rng.uniform(0, 2 * np.pi, size=len(refl))
    signal = _cosines(profiles[:, line], refl, layer_phase, n_k)

    # scatterers of neighbouring lines leak in through the lateral beam profile
    sigma = cfg.lateral_psf_lines
    reach = int(np.ceil(3 * sigma))
    for src in range(max(0, line - reach), min(cfg.w_lines, line + reach + 1)):
        weight = 1.0 if sigma == 0 else np.exp(-0.5 * ((src - line) / sigma) ** 2)
        if sigma == 0 and src != line:
            continue
        signal = signal + weight * _scatter_spectrum(cfg, src, cache)

    signal = envelope * signal
    if noise and cfg.noise_sigma > 0:
        signal = signal + cfg.noise_sigma * _stream(cfg.seed, _LINE_NOISE, line).standard_normal(n_k)
    return signal


def generate_phantom(config: PhantomConfig | None = None):
    """Return (noisy SpectralFrame, reference OctImage of the noise-free frame).

    Samples are stored as float32.  Identical configs give bit-identical output.
    """
    cfg = PhantomConfig() if config is None else config
    cfg.validate()
    profiles = _layer_profiles(cfg)
    envelope = source_envelope(cfg.n_k, cfg.source_fwhm_fraction)
    clean = np.empty((cfg.w_lines, cfg.n_k), dtype=np.float32)
    noisy = np.empty_like(clean)
    cache = {}
    for line in range(cfg.w_lines):
        s = generate_line(cfg, line, profiles, envelope, noise=False, cache=cache)
        cache.pop(line - int(np.ceil(3 * cfg.lateral_psf_lines)), None)
        clean[line] = s
        if cfg.noise_sigma > 0:
            noise = cfg.noise_sigma * _stream(cfg.seed, _LINE_NOISE, line).standard_normal(cfg.n_k)
            noisy[line] = s + noise
        else:
            noisy[line] = clean[line]
    reference = reconstruct_reference(SpectralFrame(clean))
    reference.extra["phantom"] = cfg.to_dict()
    return SpectralFrame(noisy, meta=cfg), reference


# ---------------------------------------------------------------------------
# manifest


class ManifestError(ValueError):
    pass


def write_manifest(entries, path):
    """Write ``[(spectrum_path, split), ...]`` as a JSON array of {path, split}."""
    records = []
    seen = set()
    for spectrum_path, split in entries:
        spectrum_path = str(spectrum_path)
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}; expected one of {SPLITS}")
        if spectrum_path in seen:
            raise ManifestError(f"duplicate manifest entry: {spectrum_path}")
        target = Path(spectrum_path)
        if not target.is_absolute():
            target = Path(path).parent / target
        if not target.exists():
            raise ManifestError(f"missing spectrum file: {spectrum_path}")
        seen.add(spectrum_path)
        records.append({"path": spectrum_path, "split": split})
    Path(path).write_text(json.dumps(records, indent=2) + "\n")
    return Path(path)


def read_manifest(path):
    """Return the list of (path, split) pairs exactly as stored.

    Relative paths are relative to the manifest's directory; see
    :func:`resolve_entry`.
    """
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise ManifestError(f"{path}: manifest must be a JSON array")
    out = []
    for rec in records:
        if not isinstance(rec, dict) or set(rec) != {"path", "split"} or rec["split"] not in SPLITS:
            raise ManifestError(f"{path}: malformed entry {rec!r}")
        out.append((rec["path"], rec["split"]))
    return out


def resolve_entry(manifest_path, entry_path):
    p = Path(entry_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def reference_path(spectrum_path):
    """Reference images sit next to their spectrum with the ``.ocim`` suffix."""
    return Path(spectrum_path).with_suffix(".ocim")


__all__ = [
    "OctImage",
    "PhantomConfig",
    "SpectralFrame",
    "generate_line",
    "generate_phantom",
    "read_manifest",
    "reference_path",
    "resolve_entry",
    "source_envelope",
    "write_manifest",
]
