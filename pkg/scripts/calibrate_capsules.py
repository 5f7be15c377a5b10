"""Fit per-bone capsule radii so the capsule field grid matches the plain rest mesh grid.

Coordinate-wise search: each sweep visits every bone and bisects on the IoU
slope over a bracket of radii, keeping the others fixed.

    python3 scripts/calibrate_capsules.py [--n 50] [--sweeps 4]
"""

import argparse

import numpy as np
import torch

from handocc.geometry import as_tensor
from handocc.kinematics import N_BONES, forward_kinematics, rest_pose
from handocc.mesh import generate_mesh
from handocc.occupancy import DEFAULT_CAPSULE_RADII, CapsuleField, grid_points, padded_bbox, ray_cast_points


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--sweeps", type=int, default=4)
    ap.add_argument("--beta", type=float, default=2.0)
    args = ap.parse_args()

    skel = forward_kinematics(rest_pose("right"))
    mesh = generate_mesh(skel, "plain")
    lo, hi = padded_bbox([mesh])
    P = grid_points(lo, hi, args.n)
    target = ray_cast_points(mesh, P).inside
    probe = CapsuleField(np.ones(N_BONES), args.beta)
    with torch.no_grad():
        D = probe.bone_distances(as_tensor(P), as_tensor(skel.joints))

    def score(r):
        with torch.no_grad():
            logit = torch.logsumexp(args.beta * (as_tensor(r) - D), -1)
        occ = (logit > 0).numpy()
        return np.count_nonzero(occ & target) / np.count_nonzero(occ | target)

    r = DEFAULT_CAPSULE_RADII.copy()
    best = score(r)
    print(f"start IoU {best:.4f}")
    for sweep in range(args.sweeps):
        for e in range(N_BONES):
            a, b = 1.0, 30.0
            for _ in range(25):
                m = 0.5 * (a + b)
                lo_r, hi_r = r.copy(), r.copy()
                lo_r[e], hi_r[e] = m - 0.05, m + 0.05
                if score(hi_r) > score(lo_r):
                    a = m
                else:
                    b = m
            cand = r.copy()
            cand[e] = round(0.5 * (a + b), 1)
            s = score(cand)
            if s >= best:
                r, best = cand, s
        print(f"sweep {sweep}: IoU {best:.4f}")
    print("radii:", ", ".join(f"{x:.1f}" for x in r))


if __name__ == "__main__":
    main()
