"""Train the occupancy network on random poses and report held-out grid IoU.

    python3 scripts/train_occnet.py [--poses 250] [--epochs 20] [--out results/occnet.bin]

The last ``val_fraction`` of the poses are held out; they select the best
epoch on a coarse grid and are scored again at --grid (default 50).
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch

from handocc.artifacts import write_text
from handocc.kinematics import random_pose
from handocc.occnet import TrainConfig, grid_iou, history_csv, parameter_count, sample_training_set, save_params, train_occnet


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--poses", type=int, default=250)
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--grid", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/occnet.bin")
    args = ap.parse_args()
    torch.set_num_threads(1)

    rng = np.random.default_rng(args.seed)
    poses = [random_pose(rng, "right" if i % 2 else "left") for i in range(args.poses)]
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    t0 = time.perf_counter()
    data = sample_training_set(poses, cfg)
    print(f"sampled {len(data)} hands x {cfg.samples_per_hand} points in {time.perf_counter() - t0:.1f}s")
    model, history = train_occnet(data, cfg, log=print)
    n_val = len(data) - int(round(len(data) * (1 - cfg.val_fraction)))
    ious = grid_iou(model, data.skeletons[-n_val:], args.grid)
    print(f"{parameter_count(model)} parameters, {time.perf_counter() - t0:.0f}s total")
    print(f"held-out IoU at n={args.grid}: mean {ious.mean():.4f} min {ious.min():.4f} over {n_val} poses")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(model, out)
    write_text(out.with_suffix(".history.csv"), history_csv(history))


if __name__ == "__main__":
    main()
