"""Two-hand pose refinement against the intersection loss, plus study harnesses."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .geometry import DTYPE, as_tensor, matrix_to_rotvec, rotvec_to_matrix
from .kinematics import HandPose, Skeleton, densify_array, fit_poses, fk_torch, forward_kinematics, mpjpe, random_pose
from .loss import LossConfig, loss_terms
from .mesh import generate_meshes
from .occupancy import (
    DEFAULT_CAPSULE_RADII,
    OccupancyField,
    default_capsule_field,
    grid_points,
    padded_bbox,
    pair_intersection_count,
    segment_distances,
)

# data term in m^2: mean squared joint displacement over both hands, mm^2 * 1e-6
_DATA_SCALE = 1e-6


class RefinementDiverged(RuntimeError):
    def __init__(self, msg: str, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class PairPose:
    pose_R: HandPose
    pose_L: HandPose
    relative_offset: np.ndarray | None = None

    def __post_init__(self):
        if self.pose_R.side != "right" or self.pose_L.side != "left":
            raise ValueError("PairPose expects a right and a left pose")
        self.pose_R.validate()
        self.pose_L.validate()
        if self.relative_offset is None:
            self.relative_offset = self.pose_L.global_translation - self.pose_R.global_translation
        self.relative_offset = np.asarray(self.relative_offset, dtype=np.float64).reshape(3)
        # left-wrist placement is owned by the offset
        self.pose_L = replace(self.pose_L, global_translation=self.pose_R.global_translation + self.relative_offset)

    def skeletons(self) -> tuple[Skeleton, Skeleton]:
        return forward_kinematics(self.pose_R), forward_kinematics(self.pose_L)

    def copy(self) -> "PairPose":
        return PairPose(self.pose_R.copy(), self.pose_L.copy(), self.relative_offset.copy())

    def to_dict(self) -> dict:
        return {
            "pose_R": self.pose_R.to_dict(),
            "pose_L": self.pose_L.to_dict(),
            "relative_offset": self.relative_offset.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairPose":
        return cls(HandPose.from_dict(d["pose_R"]), HandPose.from_dict(d["pose_L"]), d.get("relative_offset"))

    @classmethod
    def from_skeletons(cls, right: Skeleton, left: Skeleton, seed: int = 0) -> tuple["PairPose", float]:
        """Fit both hands by IK; returns the pair and the worse of the two residuals."""
        (pR, rR), (pL, rL) = fit_poses([right, left], seed=seed)
        return cls(pR, pL), max(rR, rL)


@dataclass
class RefineConfig:
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    data_weight: float = 1.0
    max_iters: int = 200
    step_size: float = 0.01  # radians
    translation_step: float = 0.5  # mm
    tol: float = 1e-9
    prefilter_margin: float = float(DEFAULT_CAPSULE_RADII.max()) + 5.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_cfg, dict):
            self.loss_cfg = LossConfig(**self.loss_cfg)
        if not self.data_weight > 0:
            raise ValueError("data_weight must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def bbox_prefilter(skel_R: Skeleton, skel_L: Skeleton, margin: float = 10.0) -> bool:
    """Closed-interval overlap of the joints' axis-aligned boxes, each padded by margin."""
    loR, hiR = skel_R.joints.min(0) - margin, skel_R.joints.max(0) + margin
    loL, hiL = skel_L.joints.min(0) - margin, skel_L.joints.max(0) + margin
    return bool(np.all(loR <= hiL) and np.all(loL <= hiR))


# ---------------------------------------------------------------- optimizer

_GROUPS = ("aR", "rR", "tR", "aL", "rL", "off")
_TRANSLATIONAL = {"tR", "off"}


def _pack(pairs: Sequence[PairPose]) -> tuple[dict, torch.Tensor, torch.Tensor]:
    th = {
        "aR": as_tensor(np.stack([p.pose_R.joint_angles for p in pairs])),
        "rR": as_tensor(np.stack([p.pose_R.global_rotation for p in pairs])),
        "tR": as_tensor(np.stack([p.pose_R.global_translation for p in pairs])),
        "aL": as_tensor(np.stack([p.pose_L.joint_angles for p in pairs])),
        "rL": as_tensor(np.stack([p.pose_L.global_rotation for p in pairs])),
        "off": as_tensor(np.stack([p.relative_offset for p in pairs])),
    }
    LR = as_tensor(np.stack([p.pose_R.bone_lengths for p in pairs]))
    LL = as_tensor(np.stack([p.pose_L.bone_lengths for p in pairs]))
    return th, LR, LL


def _joints(th: dict, LR: torch.Tensor, LL: torch.Tensor):
    JR = fk_torch(th["aR"], th["rR"], th["tR"], LR, left=False)
    JL = fk_torch(th["aL"], th["rL"], th["tR"] + th["off"], LL, left=True)
    return JR, JL


def _objective(th, LR, LL, J0R, J0L, field, cfg: RefineConfig, w: float, grad: bool = True):
    if grad:
        th = {k: v.detach().requires_grad_(True) for k, v in th.items()}
    with torch.set_grad_enabled(grad):
        JR, JL = _joints(th, LR, LL)
        data = ((JR - J0R) ** 2).sum((-1, -2)) + ((JL - J0L) ** 2).sum((-1, -2))
        data = cfg.data_weight * _DATA_SCALE * data / 42.0
        inter = loss_terms(JR, JL, field, cfg.loss_cfg)[0]
        f = data + w * inter
        g = None
        if grad:
            gs = torch.autograd.grad(f.sum(), [th[k] for k in _GROUPS])
            g = dict(zip(_GROUPS, gs))
    return f.detach(), data.detach(), inter.detach(), g


@dataclass
class RefineTrace:
    """Per accepted iteration: (iteration, data term, intersection term)."""

    rows: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _refine_batch(pairs: Sequence[PairPose], field_: OccupancyField, cfg: RefineConfig) -> tuple[list[PairPose], list[RefineTrace]]:
    B = len(pairs)
    traces = [RefineTrace() for _ in range(B)]
    w = cfg.loss_cfg.w
    if B == 0 or w == 0.0:
        return [p.copy() for p in pairs], traces
    th, LR, LL = _pack(pairs)
    with torch.no_grad():
        J0R, J0L = _joints(th, LR, LL)
    f, data, inter, g = _objective(th, LR, LL, J0R, J0L, field_, cfg, w)
    for b in range(B):
        traces[b].rows.append((0, float(data[b]), float(inter[b])))
    m = {k: torch.zeros_like(v) for k, v in th.items()}
    v = {k: torch.zeros_like(t) for k, t in th.items()}
    lr = torch.ones(B, dtype=DTYPE)
    active = torch.ones(B, dtype=torch.bool)
    b1, b2, eps = 0.9, 0.999, 1e-12
    for it in range(1, cfg.max_iters + 1):
        idx = active.nonzero().squeeze(-1)
        if len(idx) == 0:
            break
        trial = {}
        for k in _GROUPS:
            m[k][idx] = b1 * m[k][idx] + (1 - b1) * g[k][idx]
            v[k][idx] = b2 * v[k][idx] + (1 - b2) * g[k][idx] ** 2
            mh = m[k][idx] / (1 - b1 ** it)
            vh = v[k][idx] / (1 - b2 ** it)
            base = cfg.translation_step if k in _TRANSLATIONAL else cfg.step_size
            trial[k] = th[k][idx] - (lr[idx] * base)[:, None] * mh / (vh.sqrt() + eps)
        sub = lambda t: t[idx]  # noqa: E731
        ft, dt, it_, gt = _objective(trial, sub(LR), sub(LL), sub(J0R), sub(J0L), field_, cfg, w)
        if not torch.isfinite(ft).all():
            bad = int(idx[~torch.isfinite(ft)][0])
            raise RefinementDiverged(f"objective became non-finite at iteration {it} (pair {bad})", traces[bad])
        acc = ft <= f[idx]
        gain = f[idx] - ft
        ai = idx[acc]
        for k in _GROUPS:
            th[k][ai] = trial[k][acc]
            g[k][ai] = gt[k][acc]
        f[ai], data[ai], inter[ai] = ft[acc], dt[acc], it_[acc]
        lr[idx[~acc]] *= 0.5
        done = (acc & (gain <= cfg.tol * ft.abs())) | (lr[idx] < 1e-6)
        for j in ai.tolist():
            traces[j].rows.append((it, float(data[j]), float(inter[j])))
        for j in idx.tolist():
            traces[j].iterations = it
        for j in idx[done].tolist():
            traces[j].converged = True
        active[idx[done]] = False

    out = []
    for b, p in enumerate(pairs):
        pR = HandPose("right", th["rR"][b].numpy().copy(), th["tR"][b].numpy().copy(), th["aR"][b].numpy().copy(),
                      p.pose_R.bone_lengths)
        pL = HandPose("left", th["rL"][b].numpy().copy(), (th["tR"][b] + th["off"][b]).numpy(),
                      th["aL"][b].numpy().copy(), p.pose_L.bone_lengths)
        out.append(PairPose(pR, pL, th["off"][b].numpy().copy()))
    return out, traces


def refine_pair(init: PairPose, field_: OccupancyField, cfg: RefineConfig) -> tuple[PairPose, RefineTrace]:
    SR, SL = init.skeletons()
    if not bbox_prefilter(SR, SL, cfg.prefilter_margin):
        return init.copy(), RefineTrace(converged=True)
    out, traces = _refine_batch([init], field_, cfg)
    return out[0], traces[0]


# ---------------------------------------------------------------- batch evaluation

def occupancy_intersection_count(field_: OccupancyField, SR: Skeleton, SL: Skeleton, mR, mL, n: int = 50, pad: float = 5.0) -> int:
    """Grid points (same grid as the ray-cast count) where both hands' fields exceed 0.5."""
    lo, hi = padded_bbox([mR, mL], pad)
    P = grid_points(lo, hi, n)
    (loR, hiR), (loL, hiL) = mR.bbox, mL.bbox
    both = np.all((P >= np.maximum(loR, loL) - pad) & (P <= np.minimum(hiR, hiL) + pad), axis=1)
    cand = P[both]
    if len(cand) == 0:
        return 0
    inR = field_.eval(cand, SR) > 0.5
    cand = cand[inR]
    if len(cand) == 0:
        return 0
    return int(np.count_nonzero(field_.eval(cand, SL) > 0.5))


@dataclass
class PairCounts:
    raycast: int
    occupancy: int


def pair_counts(pairs: Sequence[PairPose], field_: OccupancyField, n: int = 50) -> list[PairCounts]:
    skels = [p.skeletons() for p in pairs]
    meshes = generate_meshes([s for pair in skels for s in pair], "plain")
    out = []
    for i, (SR, SL) in enumerate(skels):
        mR, mL = meshes[2 * i], meshes[2 * i + 1]
        out.append(PairCounts(pair_intersection_count(mR, mL, n), occupancy_intersection_count(field_, SR, SL, mR, mL, n)))
    return out


@dataclass
class RefineReport:
    rows: list[dict]
    refined: list[PairPose]
    traces: list[RefineTrace]

    @property
    def summary(self) -> dict:
        def tot(k):
            return int(sum(r[k] for r in self.rows))

        def pct(a, b):
            return 0.0 if a == 0 else 100.0 * (a - b) / a

        rb, ra, ob, oa = tot("raycast_before"), tot("raycast_after"), tot("occupancy_before"), tot("occupancy_after")
        drift = np.array([[r["mpjpe_right"], r["mpjpe_left"]] for r in self.rows]) if self.rows else np.zeros((0, 2))
        return {
            "n_pairs": len(self.rows),
            "n_refined": int(sum(r["refined"] for r in self.rows)),
            "raycast_before": rb,
            "raycast_after": ra,
            "raycast_decrease_pct": pct(rb, ra),
            "occupancy_before": ob,
            "occupancy_after": oa,
            "occupancy_decrease_pct": pct(ob, oa),
            "mean_mpjpe_drift": float(drift.mean()) if drift.size else 0.0,
            "max_mpjpe_drift": float(drift.max()) if drift.size else 0.0,
            "points_per_hand": self.rows[0]["points_per_hand"] if self.rows else 0,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["pair_id", "refined", "raycast_before", "raycast_after", "occupancy_before", "occupancy_after",
                "mpjpe_right", "mpjpe_left", "iterations", "points_per_hand"]
        w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "refined": int(r["refined"]), "mpjpe_right": f"{r['mpjpe_right']:.6f}",
                        "mpjpe_left": f"{r['mpjpe_left']:.6f}"})
        return buf.getvalue()


def batch_refine(
    pairs: Sequence[PairPose],
    field_: OccupancyField,
    cfg: RefineConfig,
    grid_n: int = 50,
    count: bool = True,
) -> RefineReport:
    """Prefilter, refine the surviving pairs jointly, and count intersections before and after."""
    if len(pairs) == 0:
        raise ValueError("batch_refine needs at least one pair")
    skels = [p.skeletons() for p in pairs]
    keep = [i for i, (SR, SL) in enumerate(skels) if bbox_prefilter(SR, SL, cfg.prefilter_margin)]
    refined = [p.copy() for p in pairs]
    traces = [RefineTrace(converged=True) for _ in pairs]
    if keep:
        out, tr = _refine_batch([pairs[i] for i in keep], field_, cfg)
        for j, i in enumerate(keep):
            refined[i], traces[i] = out[j], tr[j]
    before = pair_counts(pairs, field_, grid_n) if count else None
    after = pair_counts(refined, field_, grid_n) if count else None
    kept = set(keep)
    rows = []
    for i, (p, q) in enumerate(zip(pairs, refined)):
        (SR, SL), (QR, QL) = skels[i], q.skeletons()
        rows.append({
            "pair_id": i,
            "refined": i in kept and cfg.loss_cfg.w > 0,
            "raycast_before": before[i].raycast if count else 0,
            "raycast_after": after[i].raycast if count else 0,
            "occupancy_before": before[i].occupancy if count else 0,
            "occupancy_after": after[i].occupancy if count else 0,
            "mpjpe_right": mpjpe(SR, QR),
            "mpjpe_left": mpjpe(SL, QL),
            "iterations": traces[i].iterations,
            "points_per_hand": cfg.loss_cfg.n_points(),
        })
    return RefineReport(rows, refined, traces)


# ---------------------------------------------------------------- pair construction

def _max_depth(JR: torch.Tensor, JL: torch.Tensor, radii: torch.Tensor) -> torch.Tensor:
    """Deepest axis penetration (mm) of either hand's dense points into the other's capsules."""
    def depth(points, joints):
        d, _ = segment_distances(points, joints)
        return (radii - d).amax((-1, -2))

    return torch.maximum(depth(densify_array(JL, 5), JR), depth(densify_array(JR, 5), JL))


def make_pairs(
    n: int,
    seed: int = 0,
    depth_range: tuple[float, float] = (2.0, 8.0),
    max_rounds: int = 40,
) -> list[PairPose]:
    """Random right/left pairs slid together along a random direction.

    The separation is bisected until the capsule penetration depth hits a target
    drawn from depth_range; negative depths give a clearance gap instead.
    Intersecting pairs (positive range) must show ray-cast grid intersections
    and clearance pairs (negative range) must show none; others are redrawn.
    """
    rng = np.random.default_rng(seed)
    radii = as_tensor(DEFAULT_CAPSULE_RADII)
    if depth_range[0] <= 0 <= depth_range[1]:
        raise ValueError("depth_range must be entirely positive or entirely negative")
    intersecting = depth_range[0] > 0
    out: list[PairPose] = []
    for _ in range(max_rounds):
        need = n - len(out)
        if need <= 0:
            break
        m = need + need // 4 + 4
        pR = [random_pose(rng, "right", translation_sigma=0.0) for _ in range(m)]
        pL = [random_pose(rng, "left", translation_sigma=0.0) for _ in range(m)]
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        target = rng.uniform(*depth_range, size=m)
        th, LR, LL = _pack([PairPose(a, b) for a, b in zip(pR, pL)])
        with torch.no_grad():
            JR = fk_torch(th["aR"], th["rR"], th["tR"], LR)
            local_L = fk_torch(th["aL"], th["rL"], torch.zeros_like(th["tR"]), LL, left=True)
            lo = torch.zeros(m, dtype=DTYPE)
            hi = torch.full((m,), 400.0, dtype=DTYPE)
            U, T = as_tensor(u), as_tensor(target)
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                JL = local_L + (mid[:, None] * U)[:, None, :]
                deeper = _max_depth(JR, JL, radii) > T
                lo = torch.where(deeper, mid, lo)
                hi = torch.where(deeper, hi, mid)
            s = (0.5 * (lo + hi)).numpy()
        cand = [PairPose(pR[i], replace(pL[i], global_translation=s[i] * u[i])) for i in range(m)]
        counts = pair_counts(cand, default_capsule_field())
        cand = [c for c, k in zip(cand, counts) if (k.raycast > 0) == intersecting]
        out.extend(cand[:need])
    if len(out) < n:
        raise RuntimeError(f"could only construct {len(out)} of {n} pairs")
    return out


# ---------------------------------------------------------------- noise study

def _rotate_about_wrist(pose: HandPose, rotvec: np.ndarray) -> HandPose:
    R = rotvec_to_matrix(rotvec) @ rotvec_to_matrix(pose.global_rotation)
    return replace(pose, global_rotation=matrix_to_rotvec(R))


def perturb_pairs(pairs: Sequence[PairPose], prob: float, draws: np.ndarray, axes: np.ndarray, angles: np.ndarray) -> list[PairPose]:
    """Rotate each hand about its wrist when its uniform draw falls below prob."""
    out = []
    for i, p in enumerate(pairs):
        pR, pL = p.pose_R, p.pose_L
        if draws[i, 0] < prob:
            pR = _rotate_about_wrist(pR, axes[i, 0] * angles[i, 0])
        if draws[i, 1] < prob:
            pL = _rotate_about_wrist(pL, axes[i, 1] * angles[i, 1])
        out.append(PairPose(pR, pL, p.relative_offset.copy()))
    return out


def noise_study(
    gt_pairs: Sequence[PairPose],
    noise_probs: Sequence[float],
    cfg: RefineConfig,
    field_: OccupancyField | None = None,
    sigma_deg: float = 5.0,
    grid_n: int = 50,
) -> list[dict]:
    """Refine noised pairs with and without the intersection loss at each noise probability.

    The per-hand draws are shared across probabilities, so a hand perturbed at
    probability p is perturbed the same way at every larger p.
    """
    field_ = field_ or default_capsule_field()
    for p in noise_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"noise probability {p} outside [0, 1]")
    rng = np.random.default_rng(cfg.seed)
    n = len(gt_pairs)
    draws = rng.uniform(size=(n, 2))
    axes = rng.normal(size=(n, 2, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    angles = np.radians(rng.normal(0.0, sigma_deg, size=(n, 2, 1)))
    gt = [p.skeletons() for p in gt_pairs]
    no_loss = replace(cfg, loss_cfg=replace(cfg.loss_cfg, weight=0.0))

    def err(refined):
        return float(np.mean([(mpjpe(g[0], q.skeletons()[0]) + mpjpe(g[1], q.skeletons()[1])) / 2
                              for g, q in zip(gt, refined)]))

    rows = []
    for prob in noise_probs:
        noisy = perturb_pairs(gt_pairs, prob, draws, axes, angles)
        # without the loss the refiner returns its input, so the noisy pairs are the result
        without = batch_refine(noisy, field_, no_loss, grid_n, count=False).refined
        with_ = batch_refine(noisy, field_, cfg, grid_n, count=False).refined
        c_without = pair_counts(without, field_, grid_n)
        c_with = pair_counts(with_, field_, grid_n)
        rows.append({
            "noise_prob": float(prob),
            "mpjpe_with": err(with_),
            "mpjpe_without": err(without),
            "isect_with": sum(c.raycast for c in c_with),
            "isect_without": sum(c.raycast for c in c_without),
            "occ_isect_with": sum(c.occupancy for c in c_with),
            "occ_isect_without": sum(c.occupancy for c in c_without),
        })
    return rows


def curves_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["noise_prob", "mpjpe_with", "mpjpe_without", "isect_with", "isect_without", "occ_isect_with", "occ_isect_without"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in cols})
    return buf.getvalue()


def time_iteration(pairs: Sequence[PairPose], field_: OccupancyField, cfg: RefineConfig, repeats: int = 5) -> float:
    """Best-of-repeats wall-clock seconds of one objective-and-gradient evaluation for the batch."""
    th, LR, LL = _pack(pairs)
    with torch.no_grad():
        J0R, J0L = _joints(th, LR, LL)
    w = cfg.loss_cfg.w or 1.0
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        _objective(th, LR, LL, J0R, J0L, field_, cfg, w)
        best = min(best, time.perf_counter() - t0)
    return best
