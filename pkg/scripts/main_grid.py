"""Train the 5-variant x 3-seed grid and print seed-averaged metrics.

    python3 scripts/main_grid.py --cache runs/grid --jobs 2
"""

import argparse
import logging

import numpy as np

from lrd.experiments import GRID_VARIANTS, aggregate, main_grid


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--cache", default="runs/grid", help="directory for cached run records")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 123, 456])
    p.add_argument("--variants", nargs="+", default=list(GRID_VARIANTS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    recs = main_grid(tuple(args.seeds), args.variants, cache_dir=args.cache, jobs=args.jobs)
    print(f"{'variant':20s} {'final mAP':>16s} {'forgetting':>16s} {'BWT':>16s} {'loc drift':>16s}")
    for v, m in aggregate(recs).items():
        cells = "".join(f"{m[k][0]:9.3f} ± {m[k][1]:.3f}" for k in ("final_map", "forgetting", "bwt", "loc_drift"))
        print(f"{v:20s} {cells}")
    print("\ntask-0 mAP after each task (seed mean):")
    for v in args.variants:
        R = np.mean([np.asarray(r.R) for (vv, _), r in recs.items() if vv == v], axis=0)
        print(f"{v:20s} {np.round(R[:, 0], 3).tolist()}")


if __name__ == "__main__":
    main()
