"""Per-iteration cost of the refinement objective for each point set and hand mode.

    python3 scripts/cost_benchmark.py [--batch 256] [--repeats 5]
"""

import argparse

import torch

from handocc.loss import POINT_SETS, LossConfig
from handocc.occupancy import default_capsule_field
from handocc.refine import RefineConfig, make_pairs, time_iteration


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    torch.set_num_threads(1)

    pairs = make_pairs(args.batch, seed=args.seed)
    field = default_capsule_field()
    base = None
    print(f"{'points':8s} {'hands':6s} {'points/hand':>11s} {'ms/iter':>9s} {'relative':>9s}")
    for ps in POINT_SETS:
        for both in (False, True):
            cfg = RefineConfig(LossConfig(ps, both_hands=both))
            t = time_iteration(pairs, field, cfg, args.repeats)
            base = base or t
            print(f"{ps:8s} {'both' if both else 'single':6s} {cfg.loss_cfg.n_points():11d} {1e3 * t:9.1f} {t / base:9.2f}")


if __name__ == "__main__":
    main()
