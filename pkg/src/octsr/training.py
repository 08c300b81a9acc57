"""Patch-based L1 training with Adam and per-batch factor sampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .acquisition import Factors, degrade, skip_spatial, spectral_image
from .frames import OctImage, read_image, read_spectrum
from .metrics import psnr, ssim
from .mssmn import MSSMN, save_model
from .phantom import read_manifest, reference_path, resolve_entry
from .acquisition import reconstruct_reference

log = logging.getLogger(__name__)


def default_factor_set():
    return [(l, m) for l in (2, 3, 4) for m in (2, 3, 4)]


@dataclass
class TrainConfig:
    patch_size: int = 48
    patches_per_batch: int = 16
    factor_set: list = field(default_factory=default_factor_set)
    lr0: float = 1e-4
    lr_half_every: int = 8
    epochs: int = 40
    flip_augment: bool = True
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps_per_epoch: int | None = None
    val_every: int = 1
    val_max_images: int | None = None
    mode: str = "center"

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not self.factor_set:
            raise ValueError("factor_set is empty")
        for l, m in self.factor_set:
            Factors(l, m)
            if float(m) != int(m):
                raise ValueError(f"training factors need integer m, got {m}")
            if self.patch_size % int(m):
                raise ValueError(f"patch_size {self.patch_size} is not divisible by m={m}")
        if self.patches_per_batch < 1 or self.lr_half_every < 1:
            raise ValueError("patches_per_batch and lr_half_every must be positive")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.lr_half_every))


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    frame: object
    reference: OctImage
    name: str = ""


class OctDataset:
    """Frames and references grouped by split, with cached spectral degradations."""

    def __init__(self, splits):
        self.splits = {k: list(v) for k, v in splits.items()}
        self._cache = {}

    @classmethod
    def from_manifest(cls, manifest_path):
        splits = {}
        for entry, split in read_manifest(manifest_path):
            spec_path = resolve_entry(manifest_path, entry)
            frame = read_spectrum(spec_path)
            ref_file = reference_path(spec_path)
            reference = read_image(ref_file) if ref_file.exists() else reconstruct_reference(frame)
            splits.setdefault(split, []).append(Sample(frame, reference, Path(entry).stem))
        return cls(splits)

    def split(self, name):
        return self.splits.get(name, [])

    def spectral(self, sample, l, mode="center"):
        """Spectrally degraded full-grid image, cached per (sample, l, mode)."""
        key = (id(sample), float(l), mode)
        if key not in self._cache:
            self._cache[key] = spectral_image(sample.frame, l, mode).pixels
        return self._cache[key]


def _grid_cells(shape, p):
    return (shape[0] // p) * (shape[1] // p), shape[1] // p


def sample_batch(dataset, f: Factors, cfg: TrainConfig, rng, index=None, split="train"):
    """Draw ``patches_per_batch`` disjoint HR crops from one image and their LR versions.

    Crops sit on a p x p grid, so they never overlap.  The LR patch is the
    matching crop of the spectrally degraded image, flipped like its HR
    partner and then skipped by m.  Returns float32 arrays
    (B x 1 x p/m x p/m, B x 1 x p x p).
    """
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"dataset has no {split!r} images")
    p, B = cfg.patch_size, cfg.patches_per_batch
    order = [index] if index is not None else []
    order += [int(i) for i in rng.permutation(len(samples)) if i != index]
    for idx in order:
        sample = samples[idx]
        n_cells, per_row = _grid_cells(sample.reference.shape, p)
        if n_cells >= B:
            break
        log.warning("skipping %s: %s too small for %d patches of %d", sample.name,
                    sample.reference.shape, B, p)
    else:
        raise ValueError(f"no {split!r} image holds {B} patches of {p}x{p}")

    ref = sample.reference.pixels
    degraded = dataset.spectral(sample, f.l, cfg.mode)
    cells = rng.choice(n_cells, size=B, replace=False)
    flips = rng.integers(0, 2, size=(B, 2)) if cfg.flip_augment else np.zeros((B, 2), dtype=int)
    m = int(f.m)
    hr = np.empty((B, 1, p, p), dtype=np.float32)
    lr = np.empty((B, 1, p // m, p // m), dtype=np.float32)
    for b, cell in enumerate(cells):
        r0, c0 = (cell // per_row) * p, (cell % per_row) * p
        h = ref[r0:r0 + p, c0:c0 + p]
        d = degraded[r0:r0 + p, c0:c0 + p]
        if flips[b, 0]:
            h, d = h[::-1], d[::-1]
        if flips[b, 1]:
            h, d = h[:, ::-1], d[:, ::-1]
        hr[b, 0] = h
        lr[b, 0] = skip_spatial(np.ascontiguousarray(d), m).pixels
    return lr, hr


# ---------------------------------------------------------------------------
# loss and optimiser


def l1_loss(pred, target):
    """Mean absolute difference as a scalar tensor."""
    pred, target = nx.as_tensor(pred), nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return nx.mean(nx.absolute(nx.sub(pred, target)))


def adam_step(params, step, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update; ``step`` counts from 1."""
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p in params:
        p.m = b1 * p.m + (1.0 - b1) * p.grad
        p.v = b2 * p.v + (1.0 - b2) * (p.grad * p.grad)
        p.data = p.data - lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)


# ---------------------------------------------------------------------------
# loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # (step, epoch, l, m, loss)
    epochs: list = field(default_factory=list)   # (epoch, l, m, val_psnr, val_ssim)
    best_epoch: int | None = None
    best_psnr: float = -math.inf
    best_state: dict | None = None

    def write_csv(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "l", "m", "loss"])
            w.writerows((s, e, l, m, repr(loss)) for s, e, l, m, loss in self.steps)
        with open(out_dir / "epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l", "m", "val_psnr", "val_ssim"])
            w.writerows((e, l, m, repr(p), repr(s)) for e, l, m, p, s in self.epochs)


def common_crop(a, b):
    """Crop two images to their shared top-left region.

    Non-integer skipping can leave a reconstruction a few pixels larger than
    the reference; both keep the same origin.
    """
    a, b = np.asarray(getattr(a, "pixels", a)), np.asarray(getattr(b, "pixels", b))
    H, W = min(a.shape[0], b.shape[0]), min(a.shape[1], b.shape[1])
    return a[:H, :W], b[:H, :W]


def score(rec, reference):
    rec, reference = common_crop(rec, reference)
    return psnr(rec, reference), ssim(rec, reference)


def evaluate_factor(model, samples, l, m, mode="center", lhat=None, mhat=None):
    """Mean (PSNR, SSIM) of clamped reconstructions of full B-scans.

    ``model`` may also be any callable ``(lr_image, lhat, mhat) -> image``.
    """
    lhat = l if lhat is None else lhat
    mhat = m if mhat is None else mhat
    run = model.reconstruct if isinstance(model, MSSMN) else model
    scores = [score(run(degrade(s.frame, Factors(l, m), mode), lhat, mhat), s.reference) for s in samples]
    return tuple(float(v) for v in np.mean(scores, axis=0))


def train(dataset, cfg: TrainConfig | None = None, model: MSSMN | None = None, out_dir=None):
    """Fit ``model`` (in place) and return it with the training log.

    ``dataset`` is an :class:`OctDataset` or a manifest path.  When
    ``out_dir`` is given, CSV logs and ``last.mssm`` / ``best.mssm`` are
    written there.
    """
    cfg = TrainConfig() if cfg is None else cfg
    cfg.validate()
    if not isinstance(dataset, OctDataset):
        dataset = OctDataset.from_manifest(dataset)
    model = MSSMN() if model is None else model
    train_set = dataset.split("train")
    val_set = dataset.split("val")
    if not train_set:
        raise ValueError("dataset has no training images")
    if cfg.val_max_images is not None:
        val_set = val_set[:cfg.val_max_images]
    rng = np.random.default_rng(cfg.seed)
    factors = [Factors(float(l), float(m)) for l, m in cfg.factor_set]
    tlog = TrainLog()
    params = model.parameters()
    step = 0
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        n_steps = cfg.steps_per_epoch or len(train_set)
        order = rng.permutation(len(train_set))
        for i in range(n_steps):
            f = factors[rng.integers(len(factors))]
            lr_b, hr_b = sample_batch(dataset, f, cfg, rng, index=int(order[i % len(order)]))
            model.zero_grad()
            loss = l1_loss(model.forward(nx.Tensor(lr_b), f.l, f.m), hr_b)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step}, factor ({f.l}, {f.m}), lr {lr}")
            nx.backward(loss)
            model.adam_step += 1
            adam_step(params, model.adam_step, lr, cfg.adam_betas, cfg.adam_eps)
            tlog.steps.append((step, epoch, f.l, f.m, value))
            step += 1
        if val_set and (epoch + 1) % cfg.val_every == 0:
            scores = []
            for f in factors:
                p, s = evaluate_factor(model, val_set, f.l, f.m, cfg.mode)
                tlog.epochs.append((epoch, f.l, f.m, p, s))
                scores.append(p)
            mean_psnr = float(np.mean(scores))
            log.info("epoch %d lr %.2e loss %.4f val psnr %.3f", epoch, lr,
                     np.mean([s[-1] for s in tlog.steps[-n_steps:]]), mean_psnr)
            if mean_psnr > tlog.best_psnr:
                tlog.best_psnr, tlog.best_epoch = mean_psnr, epoch
                tlog.best_state = model.state_dict()
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    save_model(model, Path(out_dir) / "best.mssm")
    if out_dir is not None:
        tlog.write_csv(out_dir)
        save_model(model, Path(out_dir) / "last.mssm")
    return model, tlog


def config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["factor_set"] = [list(f) for f in cfg.factor_set]
    d["adam_betas"] = list(cfg.adam_betas)
    return d


def model_gradient_check(model: MSSMN, size=6, lhat=2.0, mhat=2.0, eps=1e-4, max_coords=None, seed=0):
    """Finite-difference check of forward + L1 against every model parameter.

    The model is converted to float64 first.  Returns the max relative error.
    """
    model = model.astype(np.float64)
    rng = np.random.default_rng(seed)
    image = rng.random((1, 1, size, size))
    out_h, out_w = math.floor(mhat * size), math.floor(mhat * size)
    target = rng.random((1, 1, out_h, out_w))

    def f():
        return l1_loss(model.forward(nx.Tensor(image), lhat, mhat), target)

    return nx.finite_difference_check(f, model.parameters(), eps=eps, max_coords=max_coords, rng=rng)
