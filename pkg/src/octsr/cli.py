"""Command-line entry point: ``octsr <command> ...``.

Every command accepts ``--config FILE``, ``--seed N``, ``--threads N`` and a
``--section.key VALUE`` flag for each configuration key.  Failures print one
line, ``error: <kind>: <message>``, on stderr and exit with status 1 (status
2 for bad usage).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .acquisition import Factors, degrade
from .baseline import upsample_bicubic, upsample_nearest
from .frames import read_image, read_spectrum, write_image, write_spectrum
from .metrics import profile_distance, spatial_frequency_profile
from .mssmn import MSSMN, ExtractorConfig, MetaConfig, load_model
from .phantom import generate_phantom, reference_path, write_manifest
from .training import OctDataset, evaluate_factor, model_gradient_check, train

FACTOR_RANGE = (1.0, 4.5)
GRADCHECK_TOLERANCE = 1e-3
EVAL_COLUMNS = ["l", "m", "lhat", "mhat", "method", "psnr", "ssim"]

log = logging.getLogger("octsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


class _Override(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        namespace.overrides = getattr(namespace, "overrides", []) + [(self.dest, values)]


def _common(parser):
    parser.set_defaults(overrides=[])
    g = parser.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="YAML run configuration")
    g.add_argument("--seed", type=int, help="seed for every random source")
    g.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads (1 = serial, deterministic)")
    g.add_argument("--verbose", action="store_true")
    keys = parser.add_argument_group("config keys")
    for section in cfgmod.SECTIONS:
        for key in cfgmod.section_keys(section):
            keys.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", action=_Override,
                              metavar="VALUE", default=argparse.SUPPRESS, help=argparse.SUPPRESS)


def _factor_list(text):
    """``l,m`` or ``l,m,lhat,mhat``."""
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 2:
        return (parts[0], parts[1], parts[0], parts[1])
    if len(parts) == 4:
        return tuple(parts)
    raise argparse.ArgumentTypeError(f"expected l,m or l,m,lhat,mhat, got {text!r}")


def build_parser():
    p = _Parser(prog="octsr", description="Spectral-spatial OCT down-scaling and reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("phantom", help="generate phantom spectra, references and a manifest")
    c.add_argument("--out", type=Path, required=True, help="output directory")

    c = sub.add_parser("degrade", help="simulate a reduced acquisition of one spectrum")
    c.add_argument("spectrum", type=Path)
    c.add_argument("--l", type=float)
    c.add_argument("--m", type=float)
    c.add_argument("--mode", choices=("center", "uniform"))
    c.add_argument("--out", type=Path, required=True, help="output .ocim image")

    c = sub.add_parser("train", help="train a model on a manifest")
    c.add_argument("manifest", type=Path)
    c.add_argument("--out", type=Path, required=True, help="output directory")

    c = sub.add_parser("reconstruct", help="reconstruct one LR image")
    c.add_argument("checkpoint", type=Path)
    c.add_argument("image", type=Path)
    c.add_argument("--lhat", type=float, required=True)
    c.add_argument("--mhat", type=float, required=True)
    c.add_argument("--out", type=Path, required=True, help="output .ocim image")

    c = sub.add_parser("eval", help="score a model and the baselines against references")
    c.add_argument("checkpoint", type=Path)
    c.add_argument("manifest", type=Path)
    c.add_argument("--factors", type=_factor_list, nargs="+",
                   help="acquisition factors l,m (optionally l,m,lhat,mhat)")
    c.add_argument("--split", choices=("train", "val", "test"))
    c.add_argument("--mode", choices=("center", "uniform"))
    c.add_argument("--out", type=Path, required=True, help="output CSV")

    c = sub.add_parser("spectrum", help="axial spatial-frequency profiles and their distances")
    c.add_argument("images", type=Path, nargs="+")
    c.add_argument("--out", type=Path, required=True, help="output CSV of profiles")

    sub.add_parser("gradcheck", help="finite-difference check of a tiny model")

    for parser in sub.choices.values():
        _common(parser)
    return p


def _check_range(*factors):
    lo, hi = FACTOR_RANGE
    for f in factors:
        if not lo <= f <= hi:
            warnings.warn(f"factor {f} is outside the tested range [{lo}, {hi}]; proceeding")


def _echo(cfg, out_dir, name="config.yaml"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / name)


def _echo_beside(cfg, out_file):
    out_file = Path(out_file)
    _echo(cfg, out_file.parent, out_file.name + ".config.yaml")


def _model_from(cfg):
    return MSSMN(dataclasses.replace(cfg.extractor), dataclasses.replace(cfg.meta), seed=cfg.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args, cfg):
    out = Path(args.out)
    spectra = out / "spectra"
    spectra.mkdir(parents=True, exist_ok=True)
    base, _ = cfg.seeded()
    ds = cfg.dataset
    splits = ["train"] * ds.n_train + ["val"] * ds.n_val + ["test"] * ds.n_test
    entries = []
    for i, split in enumerate(splits):
        frame, reference = generate_phantom(dataclasses.replace(base, seed=base.seed + i))
        path = spectra / f"phantom_{i:03d}.ocsp"
        write_spectrum(path, frame)
        write_image(reference_path(path), reference)
        entries.append((str(path.relative_to(out)), split))
    manifest = write_manifest(entries, out / "manifest.json")
    _echo(cfg, out)
    print(f"wrote {len(entries)} phantoms and {manifest}")


def cmd_degrade(args, cfg):
    l = cfg.factors.l if args.l is None else args.l
    m = cfg.factors.m if args.m is None else args.m
    mode = args.mode or cfg.factors.mode
    _check_range(l, m)
    f = Factors(l, m)
    image = degrade(read_spectrum(args.spectrum), f, mode)
    write_image(args.out, image)
    _echo_beside(cfg, args.out)
    print(f"compression_ratio {f.compression_ratio:g} shape {image.shape[0]}x{image.shape[1]}")


def cmd_train(args, cfg):
    _, train_cfg = cfg.seeded()
    dataset = OctDataset.from_manifest(args.manifest)
    _echo(cfg, args.out)
    model, tlog = train(dataset, train_cfg, _model_from(cfg), args.out)
    losses = [s[-1] for s in tlog.steps] or [float("nan")]
    first, last = losses[0], losses[-1]
    print(f"steps {len(tlog.steps)} first_loss {first:.6f} last_loss {last:.6f} "
          f"best_epoch {tlog.best_epoch} best_val_psnr {tlog.best_psnr:.4f}")


def cmd_reconstruct(args, cfg):
    _check_range(args.lhat, args.mhat)
    model = load_model(args.checkpoint)
    image = read_image(args.image)
    rec = model.reconstruct(image, args.lhat, args.mhat)
    write_image(args.out, rec)
    _echo_beside(cfg, args.out)
    print(f"shape {rec.shape[0]}x{rec.shape[1]}")


def _baseline(fn):
    return lambda image, lhat, mhat: fn(image, mhat)


def cmd_eval(args, cfg):
    model = load_model(args.checkpoint)
    split = args.split or cfg.eval.split
    mode = args.mode or cfg.eval.mode
    factors = args.factors or [_factor_list(",".join(str(v) for v in f)) for f in cfg.eval.factors]
    samples = OctDataset.from_manifest(args.manifest).split(split)
    if not samples:
        raise ValueError(f"manifest has no {split!r} images")
    methods = {"mssmn": model, "bicubic": _baseline(upsample_bicubic), "nearest": _baseline(upsample_nearest)}
    rows = []
    for l, m, lhat, mhat in factors:
        _check_range(l, m, lhat, mhat)
        for name, method in methods.items():
            p, s = evaluate_factor(method, samples, l, m, mode, lhat, mhat)
            rows.append([l, m, lhat, mhat, name, p, s])
            print(f"l={l:g} m={m:g} lhat={lhat:g} mhat={mhat:g} {name:8s} psnr {p:.4f} ssim {s:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        w.writerows([f"{l:g}", f"{m:g}", f"{lh:g}", f"{mh:g}", name, repr(p), repr(s)]
                    for l, m, lh, mh, name, p, s in rows)
    _echo_beside(cfg, args.out)


def cmd_spectrum(args, cfg):
    profiles = [(str(path), spatial_frequency_profile(read_image(path))) for path in args.images]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "bin_index", "mean_log_magnitude"])
        for name, prof in profiles:
            w.writerows((name, i, repr(float(v))) for i, v in enumerate(prof.mean))
    dist_path = args.out.with_name(args.out.stem + "_distances.csv")
    with open(dist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_a", "image_b", "distance"])
        for i, (a, pa) in enumerate(profiles):
            for b, pb in profiles[i + 1:]:
                if len(pa) != len(pb):
                    log.warning("skipping %s vs %s: %d vs %d bins", a, b, len(pa), len(pb))
                    continue
                d = profile_distance(pa, pb)
                w.writerow([a, b, repr(d)])
                print(f"{a} {b} distance {d:.6f}")
    _echo_beside(cfg, args.out)


def cmd_gradcheck(args, cfg):
    g = cfg.gradcheck
    model = MSSMN(ExtractorConfig(g.fC, g.n_groups, g.n_blocks_per_group, g.attention_reduction, 3),
                  MetaConfig(g.hidden, g.hidden, output_init_gain=1.0), seed=cfg.seed, dtype=np.float64)
    err = model_gradient_check(model, g.size, g.lhat, g.mhat, g.eps, g.max_coords, seed=cfg.seed)
    ok = err <= GRADCHECK_TOLERANCE
    print(f"max_rel_error {err:.3e} {'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "phantom": cmd_phantom,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "spectrum": cmd_spectrum,
    "gradcheck": cmd_gradcheck,
}


def _one_line(exc):
    return " ".join(str(exc).split()) or exc.__class__.__name__


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, overrides=args.overrides, seed=args.seed)
        limit = nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=args.threads)
        with limit:
            status = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(f"error: {exc.__class__.__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
