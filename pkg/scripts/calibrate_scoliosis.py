"""Monte-Carlo calibration of the scoliosis label threshold.

Draws phantoms from the default sampling ranges and reports the lateral
deviation quantile that yields the target prevalence.

    python scripts/calibrate_scoliosis.py --n 20000 --prevalence 0.2
"""
import argparse

import numpy as np

from dxa3d.phantom import PhantomRanges, generate_phantom, max_lateral_deviation, sample_params


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--prevalence", type=float, default=0.2)
    ap.add_argument("--seed-base", type=int, default=1_000_000)
    args = ap.parse_args()

    ranges = PhantomRanges()
    dev = np.array([
        max_lateral_deviation(generate_phantom(sample_params(args.seed_base + i, ranges)).cx)
        for i in range(args.n)
    ])
    thr = float(np.quantile(dev, 1.0 - args.prevalence))
    print(f"n={args.n} threshold={thr:.4f} rate_at_threshold={(dev > thr).mean():.4f}")


if __name__ == "__main__":
    main()
