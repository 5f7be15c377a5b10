"""``handocc`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 contract violation, 4 numerical failure.
Every command that writes an output also writes ``<out>.manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .artifacts import write_json, write_text

EXIT_OK, EXIT_INPUT, EXIT_CONTRACT, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    """Bad flags or unreadable/invalid input files (exit 2)."""


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None


def _skeleton(d, where: str):
    from .kinematics import Skeleton

    try:
        return Skeleton.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{where}: {e}") from None


def _pose(d, where: str):
    from .kinematics import HandPose

    try:
        p = HandPose.from_dict(d)
        p.validate()
        return p
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{where}: invalid pose: {e}") from None


def _pair(d, where: str, seed: int):
    """Pair JSON is either {"right": Skeleton, "left": Skeleton} or a PairPose object."""
    from .refine import PairPose

    if not isinstance(d, dict):
        raise InputError(f"{where}: expected a JSON object")
    if "right" in d and "left" in d:
        right = _skeleton({"side": "right", **d["right"]}, f"{where} (right)")
        left = _skeleton({"side": "left", **d["left"]}, f"{where} (left)")
        if right.side != "right" or left.side != "left":
            raise InputError(f"{where}: side labels do not match the right/left keys")
        pair, _ = PairPose.from_skeletons(right, left, seed=seed)
        return pair, "skeletons"
    if "pose_R" in d and "pose_L" in d:
        try:
            return PairPose.from_dict(d), "poses"
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{where}: invalid pair: {e}") from None
    raise InputError(f"{where}: expected keys right/left or pose_R/pose_L")


def _field(spec: str):
    from .occupancy import default_capsule_field

    if spec == "capsule":
        return default_capsule_field()
    if spec.startswith("occnet:"):
        from .occnet import OccNetField, load_params

        try:
            return OccNetField(load_params(spec.split(":", 1)[1]))
        except (OSError, ValueError) as e:
            raise InputError(f"cannot load occupancy network: {e}") from None
    raise InputError(f"--field must be 'capsule' or 'occnet:PATH', got {spec!r}")


class _Run:
    """Collects manifest information for one command."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        self.started = time.time()
        self.outputs: list[str] = []

    def write_manifest(self, out_path, config: dict | None = None, inputs: list | None = None):
        config_snapshot = {k: v for k, v in vars(self.args).items() if k != "func"}
        if config:
            config_snapshot.update(config)
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "config": config_snapshot,
            "seed": self.args.seed,
            "inputs": inputs or [],
            "outputs": self.outputs,
            "tool_version": __version__,
            "started_utc": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_clock_s": round(time.time() - self.started, 3),
        }
        write_json(f"{out_path}.manifest.json", manifest)

    def output(self, path):
        self.outputs.append(str(path))


# ---------------------------------------------------------------- commands

def cmd_fit(args, run: _Run) -> int:
    from .kinematics import fit_pose

    target = _skeleton(_read_json(args.input), args.input)
    pose, residual = fit_pose(target, seed=args.seed)
    write_json(args.out, {**pose.to_dict(), "residual_mm": residual})
    run.output(args.out)
    run.write_manifest(args.out, inputs=[args.input])
    print(f"residual_mm={residual:.6f}")
    if not residual < 0.5:
        print(f"error: residual {residual:.3f} mm is not below 0.5 mm", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def cmd_mesh(args, run: _Run) -> int:
    from .kinematics import forward_kinematics
    from .mesh import MeshGenerationError, export_obj, generate_mesh, validate_watertight

    pose = _pose(_read_json(args.pose), args.pose)
    try:
        m = generate_mesh(forward_kinematics(pose), args.variant)
    except MeshGenerationError as e:
        raise InputError(str(e)) from None
    rep = validate_watertight(m)
    E = len(m.faces) * 3 // 2
    export_obj(m, args.out)
    run.output(args.out)
    run.write_manifest(args.out, inputs=[args.pose])
    print(f"V={len(m.vertices)} E={E} F={len(m.faces)}")
    print(f"watertight: {'true' if rep.ok else 'false'}")
    if not rep.ok:
        print(f"defects: {rep.defect_list[:5]}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def _loss_cfg(args):
    from .loss import LossConfig

    if args.weight is not None and args.weight < 0:
        raise InputError("--weight must be >= 0")
    return LossConfig(point_set=args.points, both_hands=args.both_hands, truncated=args.truncated, weight=args.weight)


def cmd_refine(args, run: _Run) -> int:
    from .refine import RefineConfig, RefinementDiverged, batch_refine

    raw = _read_json(args.pair)
    pair, kind = _pair(raw, args.pair, args.seed)
    field = _field(args.field)
    cfg = RefineConfig(loss_cfg=_loss_cfg(args), max_iters=args.max_iters, seed=args.seed)
    try:
        rep = batch_refine([pair], field, cfg, grid_n=args.grid)
    except RefinementDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    row = rep.rows[0]
    if not row["refined"]:
        # untouched pairs are written back byte for byte
        write_text(args.out, Path(args.pair).read_text())
        out = None
    elif kind == "skeletons":
        R, L = rep.refined[0].skeletons()
        out = {"right": R.to_dict(), "left": L.to_dict()}
    else:
        out = rep.refined[0].to_dict()
    if out is not None:
        write_json(args.out, out)
    run.output(args.out)
    if args.report:
        write_text(args.report, rep.to_csv())
        run.output(args.report)
    run.write_manifest(args.out, config={"refine": cfg.to_dict()}, inputs=[args.pair])
    print(
        f"points_per_hand={row['points_per_hand']} raycast {row['raycast_before']} -> {row['raycast_after']} "
        f"mpjpe_drift R={row['mpjpe_right']:.3f} L={row['mpjpe_left']:.3f} mm"
    )
    return EXIT_OK


def cmd_metrics(args, run: _Run) -> int:
    from .kinematics import mpjpe
    from .mesh import generate_mesh
    from .occupancy import iou, occupancy_grid, padded_bbox, pair_intersection_count
    from .refine import occupancy_intersection_count

    if args.grid < 2:
        raise InputError("--grid must be >= 2")
    pair, _ = _pair(_read_json(args.pair), args.pair, args.seed)
    field = _field(args.field)
    SR, SL = pair.skeletons()
    mR, mL = generate_mesh(SR, "plain"), generate_mesh(SL, "plain")
    per_hand = {}
    for name, s, m in (("right", SR, mR), ("left", SL, mL)):
        box = padded_bbox([m])
        per_hand[name] = iou(occupancy_grid(m, box, args.grid), occupancy_grid((field, s), box, args.grid))
    out = {
        "samples": args.grid ** 3,
        "raycast_count": pair_intersection_count(mR, mL, args.grid),
        "occupancy_count": occupancy_intersection_count(field, SR, SL, mR, mL, args.grid),
        "iou_per_hand": per_hand,
    }
    inputs = [args.pair]
    if args.reference:
        ref, _ = _pair(_read_json(args.reference), args.reference, args.seed)
        RR, RL = ref.skeletons()
        out["mpjpe"] = {"right": mpjpe(SR, RR), "left": mpjpe(SL, RL)}
        inputs.append(args.reference)
    write_json(args.out, out)
    run.output(args.out)
    run.write_manifest(args.out, inputs=inputs)
    print(json.dumps(out))
    return EXIT_OK


def _poses_list(d, where: str):
    from .kinematics import fit_poses

    items = d.get("poses") if isinstance(d, dict) else d
    if not isinstance(items, list):
        raise InputError(f"{where}: expected a list of poses")
    poses, skels = [], []
    for i, item in enumerate(items):
        if isinstance(item, dict) and "joints" in item:
            skels.append((i, _skeleton(item, f"{where}[{i}]")))
            poses.append(None)
        else:
            poses.append(_pose(item, f"{where}[{i}]"))
    if skels:
        for (i, _), (p, _) in zip(skels, fit_poses([s for _, s in skels])):
            poses[i] = p
    return poses


def cmd_train_occ(args, run: _Run) -> int:
    from .occnet import NumericalError, TrainConfig, history_csv, sample_training_set, save_params, train_occnet

    poses = _poses_list(_read_json(args.poses), args.poses)
    if len(poses) < 2:
        raise InputError("need >= 2 poses for validation split")
    cfg_raw = _read_json(args.config) if args.config else {}
    try:
        cfg = TrainConfig.from_dict({**cfg_raw, "seed": args.seed})
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid training config: {e}") from None
    data = sample_training_set(poses, cfg)
    try:
        model, history = train_occnet(data, cfg, log=lambda s: print(s, flush=True))
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_params(model, args.out)
    run.output(args.out)
    if args.history:
        write_text(args.history, history_csv(history))
        run.output(args.history)
    best = max(h.val_iou for h in history)
    run.write_manifest(args.out, config={"train": cfg.to_dict()}, inputs=[args.poses] + ([args.config] if args.config else []))
    print(f"best_val_iou={best:.4f}")
    return EXIT_OK


def _parse_probs(text: str) -> list[float]:
    try:
        probs = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--probs must be comma-separated numbers, got {text!r}") from None
    if not probs or any(not 0.0 <= p <= 1.0 for p in probs):
        raise InputError("--probs must list values in [0, 1]")
    return probs


def _pairs_list(d, where: str, seed: int):
    items = d.get("pairs") if isinstance(d, dict) else d
    if not isinstance(items, list) or not items:
        raise InputError(f"{where}: expected a non-empty list of pairs")
    return [_pair(item, f"{where}[{i}]", seed)[0] for i, item in enumerate(items)]


def cmd_study_noise(args, run: _Run) -> int:
    from .refine import RefineConfig, RefinementDiverged, curves_csv, noise_study

    probs = _parse_probs(args.probs)
    pairs = _pairs_list(_read_json(args.pairs), args.pairs, args.seed)
    field = _field(args.field)
    cfg = RefineConfig(loss_cfg=_loss_cfg(args), max_iters=args.max_iters, seed=args.seed)
    try:
        rows = noise_study(pairs, probs, cfg, field, grid_n=args.grid)
    except RefinementDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    write_text(args.out, curves_csv(rows))
    run.output(args.out)
    run.write_manifest(args.out, config={"refine": cfg.to_dict()}, inputs=[args.pairs])
    print(curves_csv(rows), end="")
    return EXIT_OK


def cmd_make_pairs(args, run: _Run) -> int:
    from .refine import make_pairs

    if args.n < 1:
        raise InputError("--n must be >= 1")
    lo, hi = (2.0, 8.0) if args.kind == "intersecting" else (-3.0, -0.5)
    pairs = make_pairs(args.n, seed=args.seed, depth_range=(lo, hi))
    write_json(args.out, [p.to_dict() for p in pairs])
    run.output(args.out)
    run.write_manifest(args.out)
    print(f"wrote {len(pairs)} {args.kind} pairs")
    return EXIT_OK


def cmd_make_poses(args, run: _Run) -> int:
    from .kinematics import random_pose

    if args.n < 1:
        raise InputError("--n must be >= 1")
    rng = np.random.default_rng(args.seed)
    poses = [random_pose(rng, "right" if i % 2 == 0 else "left").to_dict() for i in range(args.n)]
    write_json(args.out, poses)
    run.output(args.out)
    run.write_manifest(args.out)
    print(f"wrote {len(poses)} poses")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _add_loss_flags(p):
    p.add_argument("--field", default="capsule", help="'capsule' or 'occnet:PATH' (default capsule)")
    p.add_argument("--weight", type=float, default=None,
                   help="intersection weight w (default 1e-6, or 1e-8 with --points mesh)")
    p.add_argument("--points", choices=["sparse", "dense", "mesh"], default="dense",
                   help="tested point set: 21 joints, 121 densified points or mesh vertices")
    p.add_argument("--both-hands", action="store_true", help="add the mirrored-hands term")
    p.add_argument("--truncated", action="store_true", help="only penalize probabilities above 0.5")
    p.add_argument("--max-iters", type=int, default=200, help="optimizer iterations (default 200)")
    p.add_argument("--grid", type=int, default=50, help="ray-cast grid resolution per axis (default 50)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="handocc", description="Hand meshes, occupancy fields and intersection-aware pose refinement.")
    ap.add_argument("--seed", type=int, default=42, help="seed for all randomness (default 42)")
    ap.add_argument("--version", action="version", version=f"handocc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a pose to a 21-joint skeleton")
    p.add_argument("--input", required=True, help="skeleton JSON")
    p.add_argument("--out", required=True, help="pose JSON to write")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mesh", help="generate and export the envelope mesh of a pose")
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--variant", choices=["plain", "refined"], default="plain")
    p.add_argument("--out", required=True, help="OBJ file to write")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("refine", help="refine a hand pair against the intersection loss")
    p.add_argument("--pair", required=True, help="pair JSON (skeletons or poses)")
    _add_loss_flags(p)
    p.add_argument("--out", required=True, help="refined pair JSON")
    p.add_argument("--report", help="CSV row with before/after counts and drift")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("metrics", help="intersection counts and per-hand IoU of a pair")
    p.add_argument("--pair", required=True)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--field", default="capsule", help="'capsule' or 'occnet:PATH'")
    p.add_argument("--reference", help="reference pair for MPJPE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train-occ", help="train the occupancy network")
    p.add_argument("--poses", required=True, help="JSON list of poses or skeletons")
    p.add_argument("--config", help="training config JSON (TrainConfig fields)")
    p.add_argument("--out", required=True, help="OCN1 checkpoint to write")
    p.add_argument("--history", help="per-epoch CSV")
    p.set_defaults(func=cmd_train_occ)

    p = sub.add_parser("study-noise", help="rotation-noise study with and without the intersection loss")
    p.add_argument("--pairs", required=True, help="JSON list of ground-truth pairs")
    p.add_argument("--probs", default="0,0.2,0.4,0.6,0.8,1.0", help="comma-separated noise probabilities")
    _add_loss_flags(p)
    p.add_argument("--out", required=True, help="curves CSV")
    p.set_defaults(func=cmd_study_noise)

    p = sub.add_parser("make-pairs", help="generate random hand pairs")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--kind", choices=["intersecting", "contact"], default="intersecting",
                   help="interpenetrating pairs, or near-contact pairs with a small clearance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("make-poses", help="generate random valid poses")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_poses)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    run = _Run(args, argv)
    try:
        return args.func(args, run)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
