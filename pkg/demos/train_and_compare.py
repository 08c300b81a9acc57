"""Train a desk-scale MSSMN on fresh phantoms and compare it with interpolation.

Defaults finish in a few minutes; ``--epochs 40 --phantoms 64`` reproduces
the full desk run used by the acceptance tests.

    python demos/train_and_compare.py [--epochs 3] [--phantoms 16] [--out run/]
"""

import argparse
import logging

import numpy as np

from octsr.acquisition import Factors, degrade
from octsr.baseline import upsample_bicubic, upsample_nearest
from octsr.metrics import profile_distance, spatial_frequency_profile
from octsr.mssmn import MSSMN
from octsr.phantom import PhantomConfig, generate_phantom
from octsr.training import OctDataset, Sample, TrainConfig, evaluate_factor, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--phantoms", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for logs and checkpoints")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    samples = [Sample(*generate_phantom(PhantomConfig(seed=args.seed + i)), f"p{i}") for i in range(args.phantoms)]
    n_test = max(2, args.phantoms // 5)
    ds = OctDataset({"train": samples[:-n_test - 1], "val": samples[-n_test - 1:-n_test], "test": samples[-n_test:]})
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    model, tlog = train(ds, cfg, MSSMN(seed=args.seed), args.out)
    losses = [s[-1] for s in tlog.steps]
    print(f"L1 first step {losses[0]:.4f}, last epoch mean {np.mean(losses[-len(ds.split('train')):]):.4f}")

    test = ds.split("test")
    print(f"{'l':>4} {'m':>4} {'MSSMN':>7} {'bicubic':>8} {'nearest':>8}")
    for l, m in [(2, 2), (4, 1), (1, 4), (2.5, 2.5), (3.5, 3.5)]:
        ours = evaluate_factor(model, test, l, m)[0]
        bic = evaluate_factor(lambda x, lh, mh: upsample_bicubic(x, mh), test, l, m)[0]
        near = evaluate_factor(lambda x, lh, mh: upsample_nearest(x, mh), test, l, m)[0]
        print(f"{l:4g} {m:4g} {ours:7.2f} {bic:8.2f} {near:8.2f}")

    ours, near = [], []
    for s in test:
        lr = degrade(s.frame, Factors(2, 2))
        ref = spatial_frequency_profile(s.reference)
        ours.append(profile_distance(spatial_frequency_profile(model.reconstruct(lr, 2, 2)), ref))
        near.append(profile_distance(spatial_frequency_profile(upsample_nearest(lr, 2)), ref))
    print(f"axial frequency profile distance at (2,2): MSSMN {np.mean(ours):.3f}, nearest {np.mean(near):.3f}")


if __name__ == "__main__":
    main()
