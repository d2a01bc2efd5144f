"""Held-out reconstruction error of the four compressors on per-task features.

    python3 scripts/compression_ablation.py --seeds 42 123 456
"""

import argparse
import time

import numpy as np

from lrd.experiments import compression_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 123, 456])
    p.add_argument("--steps", type=int, default=4000)
    args = p.parse_args()
    t0 = time.perf_counter()
    res = compression_ablation(tuple(args.seeds), steps=args.steps)
    for m in res.methods:
        vals = [e[m] for e in res.errors]
        print(f"{m:14s} {np.mean(vals):.5f} ± {np.std(vals):.5f}   per seed {np.round(vals, 5).tolist()}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
