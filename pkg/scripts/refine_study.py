"""Refine constructed intersecting pairs over a sweep of loss weights.

    python3 scripts/refine_study.py [--pairs 500] [--weights 1e-8,1e-7,1e-6,1e-5]

For every weight it prints the ray-cast and occupancy intersection totals
before and after refinement, their percentage decreases and the joint drift,
then the Pearson correlation of the two decrease series. Per-pair rows go to
results/refine_w<weight>.csv.
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch
from scipy.stats import pearsonr

from handocc.artifacts import write_text
from handocc.loss import POINT_SETS, LossConfig
from handocc.occupancy import default_capsule_field
from handocc.refine import RefineConfig, batch_refine, make_pairs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=500)
    ap.add_argument("--weights", default="1e-8,1e-7,1e-6,1e-5")
    ap.add_argument("--points", choices=POINT_SETS, default="dense")
    ap.add_argument("--both-hands", action="store_true")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--outdir", default="results")
    args = ap.parse_args()
    torch.set_num_threads(1)

    t0 = time.perf_counter()
    pairs = make_pairs(args.pairs, seed=args.seed)
    print(f"constructed {len(pairs)} intersecting pairs in {time.perf_counter() - t0:.0f}s")
    field = default_capsule_field()
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    occ, ray = [], []
    for w in (float(x) for x in args.weights.split(",")):
        t0 = time.perf_counter()
        cfg = RefineConfig(LossConfig(args.points, both_hands=args.both_hands, weight=w))
        rep = batch_refine(pairs, field, cfg)
        s = rep.summary
        write_text(outdir / f"refine_w{w:g}.csv", rep.to_csv())
        occ.append(s["occupancy_decrease_pct"])
        ray.append(s["raycast_decrease_pct"])
        print(
            f"w={w:g}: ray-cast {s['raycast_before']} -> {s['raycast_after']} ({s['raycast_decrease_pct']:.1f}%), "
            f"occupancy {s['occupancy_before']} -> {s['occupancy_after']} ({s['occupancy_decrease_pct']:.1f}%), "
            f"drift mean {s['mean_mpjpe_drift']:.2f} max {s['max_mpjpe_drift']:.2f} mm, {time.perf_counter() - t0:.0f}s"
        )
    if len(occ) > 1 and np.ptp(occ) > 0 and np.ptp(ray) > 0:
        print(f"Pearson r(occupancy, ray-cast decrease) = {pearsonr(occ, ray)[0]:.3f}")


if __name__ == "__main__":
    main()
