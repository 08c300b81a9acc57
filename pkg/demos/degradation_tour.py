"""Walk one synthetic B-scan through the acquisition model.

Prints the compression ratio and baseline PSNR/SSIM for a few (l, m)
settings, and shows how center truncation compares with uniform dropping.

    python demos/degradation_tour.py [--seed 0]
"""

import argparse

from octsr.acquisition import Factors, compression_ratio, degrade
from octsr.baseline import upsample_bicubic, upsample_nearest
from octsr.phantom import PhantomConfig, generate_phantom
from octsr.training import score


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    frame, reference = generate_phantom(PhantomConfig(seed=args.seed))
    print(f"reference B-scan {reference.shape[0]}x{reference.shape[1]} from {frame.n_k} spectral samples/A-line")
    print(f"{'l':>4} {'m':>4} {'mode':>8} {'ratio':>6} {'LR size':>9} {'nearest':>14} {'bicubic':>14}")
    for l, m, mode in [(1, 1, "center"), (2, 2, "center"), (4, 1, "center"), (4, 1, "uniform"),
                       (1, 4, "center"), (2.5, 2.5, "center")]:
        f = Factors(l, m)
        lr = degrade(frame, f, mode)
        near = score(upsample_nearest(lr, m), reference)
        bic = score(upsample_bicubic(lr, m), reference)
        print(f"{l:4g} {m:4g} {mode:>8} {compression_ratio(f):6.3f} {lr.shape[0]:4d}x{lr.shape[1]:<4d}"
              f" {near[0]:6.2f}/{near[1]:.3f} {bic[0]:6.2f}/{bic[1]:.3f}")


if __name__ == "__main__":
    main()
