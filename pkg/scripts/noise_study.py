"""Rotation-noise study on near-contact pairs, with and without the intersection loss.

    python3 scripts/noise_study.py [--pairs 100] [--out results/noise_curves.csv]
"""

import argparse
import time
from pathlib import Path

import torch
from scipy.stats import spearmanr

from handocc.artifacts import write_text
from handocc.refine import RefineConfig, curves_csv, make_pairs, noise_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--sigma-deg", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=9)
    ap.add_argument("--out", default="results/noise_curves.csv")
    args = ap.parse_args()
    torch.set_num_threads(1)

    t0 = time.perf_counter()
    gt = make_pairs(args.pairs, seed=args.seed, depth_range=(-3.0, -0.5))
    probs = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    rows = noise_study(gt, probs, RefineConfig(seed=args.seed), sigma_deg=args.sigma_deg)
    text = curves_csv(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_text(args.out, text)
    print(text, end="")
    rho = spearmanr(probs, [r["isect_without"] for r in rows])[0]
    print(f"Spearman(noise, intersections without loss) = {rho:.3f}; {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
