"""21-joint hand skeleton: topology, forward kinematics, IK fitting and helpers.

Joint order is wrist, then thumb, index, middle, ring and pinky, each listed
root to tip. Every finger is a four-joint chain hanging off the wrist: a fixed
metacarpal bone followed by a two-DoF root joint (flexion, abduction) and two
one-DoF flexion joints.

Canonical rest pose (right hand): fingers along +y, palm normal +z, wrist at
the origin. A left hand is the mirror image through the yz-plane, applied in
the hand's local frame before the global rotation. All lengths are in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import DTYPE, as_tensor, matrix_to_rotvec, rodrigues, rot_x, rot_z

N_JOINTS = 21
N_BONES = 20
N_ANGLES = 20
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

JOINT_NAMES = ["wrist"] + [
    f"{f}_{j}"
    for f, names in zip(
        FINGERS,
        [("cmc", "mcp", "ip", "tip")] + [("mcp", "pip", "dip", "tip")] * 4,
    )
    for j in names
]


@dataclass(frozen=True)
class HandTopology:
    parent: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    finger_chains: tuple[tuple[int, int, int, int], ...]

    def bone_name(self, b: int) -> str:
        p, c = self.edges[b]
        return f"{JOINT_NAMES[p]}->{JOINT_NAMES[c]}"


def _make_topology() -> HandTopology:
    parent = [-1]
    chains = []
    for f in range(5):
        first = 1 + 4 * f
        chains.append(tuple(range(first, first + 4)))
        parent += [0, first, first + 1, first + 2]
    edges = tuple((parent[i], i) for i in range(1, N_JOINTS))
    return HandTopology(tuple(parent), edges, tuple(chains))


TOPOLOGY = _make_topology()
PARENTS = np.array(TOPOLOGY.parent)
EDGES = np.array(TOPOLOGY.edges)

# metacarpal directions in the palm plane, degrees from +y towards +x (right hand)
FINGER_SPLAY_DEG = np.array([50.0, 16.0, 3.0, -10.0, -23.0])

CANONICAL_BONE_LENGTHS = np.array(
    [
        35.0, 35.0, 30.0, 25.0,  # thumb
        68.0, 40.0, 24.0, 20.0,  # index
        65.0, 44.0, 28.0, 22.0,  # middle
        60.0, 41.0, 27.0, 21.0,  # ring
        55.0, 32.0, 20.0, 18.0,  # pinky
    ]
)


def _finger_frames() -> np.ndarray:
    """(5, 3, 3) rest frames; columns are flexion axis, bone direction, palm normal."""
    frames = []
    n = np.array([0.0, 0.0, 1.0])
    for deg in FINGER_SPLAY_DEG:
        a = np.deg2rad(deg)
        d = np.array([np.sin(a), np.cos(a), 0.0])
        frames.append(np.stack([np.cross(d, n), d, n], axis=1))
    return np.array(frames)


FINGER_FRAMES = _finger_frames()


class InvalidPoseError(ValueError):
    pass


@dataclass
class Skeleton:
    joints: np.ndarray
    side: str = "right"

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.joints.shape != (N_JOINTS, 3):
            raise ValueError(f"expected 21 joints with 3 coordinates, got shape {self.joints.shape}")

    def to_dict(self) -> dict:
        return {"side": self.side, "joints": self.joints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        joints = np.asarray(d["joints"], dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise ValueError("joints must be a list of [x, y, z] triples")
        if len(joints) != N_JOINTS:
            raise ValueError(f"expected 21 joints, got {len(joints)}")
        if not np.all(np.isfinite(joints)):
            raise ValueError("joint coordinates must be finite")
        return cls(joints, d.get("side", "right"))

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.joints[EDGES[:, 1]] - self.joints[EDGES[:, 0]], axis=1)


@dataclass
class HandPose:
    side: str = "right"
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_angles: np.ndarray = field(default_factory=lambda: np.zeros(N_ANGLES))
    bone_lengths: np.ndarray = field(default_factory=lambda: CANONICAL_BONE_LENGTHS.copy())

    def __post_init__(self):
        self.global_rotation = np.asarray(self.global_rotation, dtype=np.float64).reshape(3)
        self.global_translation = np.asarray(self.global_translation, dtype=np.float64).reshape(3)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64).reshape(N_ANGLES)
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64).reshape(N_BONES)

    def validate(self) -> None:
        if self.side not in ("left", "right"):
            raise InvalidPoseError(f"bad side {self.side!r}")
        for name in ("global_rotation", "global_translation", "joint_angles", "bone_lengths"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidPoseError(f"{name} contains non-finite values")
        bad = np.flatnonzero(self.bone_lengths <= 0)
        if len(bad):
            raise InvalidPoseError(
                f"bone lengths must be positive: {TOPOLOGY.bone_name(int(bad[0]))} = {self.bone_lengths[bad[0]]}"
            )

    def copy(self) -> "HandPose":
        return HandPose(
            self.side,
            self.global_rotation.copy(),
            self.global_translation.copy(),
            self.joint_angles.copy(),
            self.bone_lengths.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "global_rotation": self.global_rotation.tolist(),
            "global_translation": self.global_translation.tolist(),
            "joint_angles": self.joint_angles.tolist(),
            "bone_lengths": self.bone_lengths.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HandPose":
        return cls(
            d.get("side", "right"),
            d["global_rotation"],
            d["global_translation"],
            d["joint_angles"],
            d["bone_lengths"],
        )


@dataclass
class PointSet:
    points: np.ndarray
    provenance: str  # "sparse21" | "dense" | "mesh_surface"

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------- forward kinematics

_FRAMES_T = torch.as_tensor(FINGER_FRAMES, dtype=DTYPE)


def fk_local(angles: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Right-hand joints in the hand's local frame. (..., 20), (..., 20) -> (..., 21, 3)."""
    batch = angles.shape[:-1]
    joints = [torch.zeros(batch + (3,), dtype=angles.dtype)]
    for f in range(5):
        F = _FRAMES_T[f].expand(batch + (3, 3))
        a = angles[..., 4 * f: 4 * f + 4]
        L = lengths[..., 4 * f: 4 * f + 4]
        p = L[..., 0:1] * F[..., :, 1]
        joints.append(p)
        G = F @ rot_z(a[..., 1]) @ rot_x(a[..., 0])
        for s in (1, 2, 3):
            p = p + L[..., s: s + 1] * G[..., :, 1]
            joints.append(p)
            if s < 3:
                G = G @ rot_x(a[..., s + 1])
    return torch.stack(joints, -2)


def fk_torch(
    angles: torch.Tensor,
    rotvec: torch.Tensor,
    trans: torch.Tensor,
    lengths: torch.Tensor,
    left: bool | torch.Tensor = False,
) -> torch.Tensor:
    """Batched differentiable forward kinematics -> (..., 21, 3)."""
    local = fk_local(angles, lengths)
    if isinstance(left, torch.Tensor):
        sign = torch.where(left, -1.0, 1.0).to(local.dtype)[..., None, None]
        local = torch.cat([local[..., :1] * sign, local[..., 1:]], -1)
    elif left:
        local = local * torch.tensor([-1.0, 1.0, 1.0], dtype=local.dtype)
    R = rodrigues(rotvec)
    return local @ R.transpose(-1, -2) + trans[..., None, :]


def forward_kinematics(pose: HandPose) -> Skeleton:
    pose.validate()
    J = fk_torch(
        as_tensor(pose.joint_angles),
        as_tensor(pose.global_rotation),
        as_tensor(pose.global_translation),
        as_tensor(pose.bone_lengths),
        left=pose.side == "left",
    )
    return Skeleton(J.numpy(), pose.side)


def forward_kinematics_batch(poses: Sequence[HandPose]) -> np.ndarray:
    for p in poses:
        p.validate()
    J = fk_torch(
        as_tensor(np.stack([p.joint_angles for p in poses])),
        as_tensor(np.stack([p.global_rotation for p in poses])),
        as_tensor(np.stack([p.global_translation for p in poses])),
        as_tensor(np.stack([p.bone_lengths for p in poses])),
        left=torch.tensor([p.side == "left" for p in poses]),
    )
    return J.numpy()


# ---------------------------------------------------------------- poses

def rest_pose(side: str = "right") -> HandPose:
    return HandPose(side=side)


def random_pose(
    rng: np.random.Generator,
    side: str = "right",
    translation_sigma: float = 50.0,
    length_jitter: float = 0.05,
    rotate: bool = True,
) -> HandPose:
    """A random anatomically plausible pose.

    Ranges are conservative so the generated envelope mesh never self-intersects.
    """
    angles = np.zeros((5, 4))
    angles[:, 0] = rng.uniform(-0.2, 1.2, 5)
    angles[:, 1] = rng.uniform(-0.08, 0.08, 5)
    angles[:, 2:] = rng.uniform(0.0, 1.2, (5, 2))
    lengths = CANONICAL_BONE_LENGTHS * rng.uniform(1 - length_jitter, 1 + length_jitter, N_BONES)
    if rotate:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        angle = 2 * np.arccos(np.clip(abs(q[0]), -1, 1))
        axis = q[1:] / max(np.linalg.norm(q[1:]), 1e-12)
        rotvec = axis * angle
    else:
        rotvec = np.zeros(3)
    return HandPose(side, rotvec, rng.normal(0.0, translation_sigma, 3), angles.ravel(), lengths)


# ---------------------------------------------------------------- simple ops

def flip_x(s: Skeleton) -> Skeleton:
    joints = s.joints.copy()
    joints[:, 0] *= -1.0
    return Skeleton(joints, "left" if s.side == "right" else "right")


def flip_pose(pose: HandPose) -> HandPose:
    """Pose whose FK equals flip_x of the input's FK."""
    rv = pose.global_rotation.copy()
    rv[1:] *= -1.0
    t = pose.global_translation.copy()
    t[0] *= -1.0
    return HandPose(
        "left" if pose.side == "right" else "right", rv, t, pose.joint_angles.copy(), pose.bone_lengths.copy()
    )


def densify_array(joints, k: int):
    """(…, 21, 3) -> (…, 21 + 20k, 3); works for numpy arrays and torch tensors."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return joints
    a = joints[..., EDGES[:, 0], :]
    b = joints[..., EDGES[:, 1], :]
    fr = np.arange(1, k + 1) / (k + 1)
    if isinstance(joints, torch.Tensor):
        fr = torch.as_tensor(fr, dtype=joints.dtype)
        extra = a[..., :, None, :] + fr[:, None] * (b - a)[..., :, None, :]
        return torch.cat([joints, extra.reshape(joints.shape[:-2] + (-1, 3))], -2)
    extra = a[..., :, None, :] + fr[:, None] * (b - a)[..., :, None, :]
    return np.concatenate([joints, extra.reshape(joints.shape[:-2] + (-1, 3))], -2)


def densify(s: Skeleton, k: int = 5) -> PointSet:
    return PointSet(densify_array(s.joints, k), "sparse21" if k == 0 else "dense")


def mpjpe(a: Skeleton | np.ndarray, b: Skeleton | np.ndarray) -> float:
    A = a.joints if isinstance(a, Skeleton) else np.asarray(a)
    B = b.joints if isinstance(b, Skeleton) else np.asarray(b)
    if A.shape != B.shape:
        raise ValueError(f"joint count mismatch: {A.shape} vs {B.shape}")
    return float(np.linalg.norm(A - B, axis=-1).mean())


# ---------------------------------------------------------------- inverse kinematics

def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R minimising sum |R src_i - dst_i|^2 (both centred by the caller)."""
    H = src.T @ dst
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def _safe_unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.array([0.0, 1.0, 0.0])


def initial_fit(target: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form estimate (angles, rotvec, trans, lengths) for a right-hand target."""
    lengths = np.maximum(np.linalg.norm(target[EDGES[:, 1]] - target[EDGES[:, 0]], axis=1), 1e-6)
    trans = target[0].copy()
    roots = [c[0] for c in TOPOLOGY.finger_chains]
    src = np.array([lengths[4 * f] * FINGER_FRAMES[f][:, 1] for f in range(5)])
    dst = target[roots] - trans
    R = _kabsch(src, dst)
    local = (target - trans) @ R
    angles = np.zeros((5, 4))
    for f, chain in enumerate(TOPOLOGY.finger_chains):
        F = FINGER_FRAMES[f]
        v = F.T @ _safe_unit(local[chain[1]] - local[chain[0]])
        flex = np.arcsin(np.clip(v[2], -1.0, 1.0))
        abd = np.arctan2(-v[0], v[1])
        angles[f, 0], angles[f, 1] = flex, abd
        G = F @ rot_z(torch.tensor(abd)).numpy() @ rot_x(torch.tensor(flex)).numpy()
        for s in (1, 2):
            w = G.T @ _safe_unit(local[chain[s + 1]] - local[chain[s]])
            phi = np.arctan2(w[2], w[1])
            angles[f, s + 1] = phi
            G = G @ rot_x(torch.tensor(phi)).numpy()
    return angles.ravel(), matrix_to_rotvec(R), trans, lengths


def _polish(params: list[torch.Tensor], target: torch.Tensor, iters: int, lrs: Sequence[float]):
    """Adam on the joint-position error; returns the best parameters seen per item."""
    params = [p.clone().requires_grad_(True) for p in params]
    opt = torch.optim.Adam([{"params": [p], "lr": lr} for p, lr in zip(params, lrs)])
    best = [p.detach().clone() for p in params]
    best_err = torch.full(target.shape[:1], np.inf, dtype=DTYPE)
    for _ in range(iters + 1):
        J = fk_torch(params[0], params[1], params[2], params[3].clamp_min(1e-6))
        err = ((J - target) ** 2).sum(-1).mean(-1)
        with torch.no_grad():
            better = err < best_err
            best_err = torch.where(better, err, best_err)
            for b, p in zip(best, params):
                b[better] = p[better]
        if best_err.max() < 1e-12:
            break
        opt.zero_grad()
        err.sum().backward()
        opt.step()
    best[3] = best[3].clamp_min(1e-6)
    return best


def fit_poses(
    targets: Sequence[Skeleton],
    inits: Sequence[HandPose | None] | None = None,
    seed: int = 0,
    iters: int = 300,
    restarts: int = 3,
    restart_threshold: float = 1.0,
) -> list[tuple[HandPose, float]]:
    """Batched IK. Each target gets its own pose and MPJPE residual (mm).

    Unless an init pose is given, bone lengths and global placement start from
    their closed-form estimates and the finger angles from the analytic chain
    decomposition; Adam then polishes everything jointly. Items whose residual
    stays above ``restart_threshold`` are restarted from perturbed rest angles.
    """
    rng = np.random.default_rng(seed)
    n = len(targets)
    inits = list(inits) if inits is not None else [None] * n
    right_targets = np.stack([flip_x(t).joints if t.side == "left" else t.joints for t in targets])
    start = []
    for t, init in zip(right_targets, inits):
        if init is None:
            start.append(initial_fit(t))
        else:
            p = flip_pose(init) if init.side == "left" else init
            start.append((p.joint_angles, p.global_rotation, p.global_translation, p.bone_lengths))
    params = [as_tensor(np.stack([s[i] for s in start])) for i in range(4)]
    target_t = as_tensor(right_targets)
    lrs = (0.01, 0.01, 0.1, 0.1)
    params = _polish(params, target_t, iters, lrs)

    def residuals(ps):
        with torch.no_grad():
            J = fk_torch(*ps)
        return torch.linalg.norm(J - target_t, dim=-1).mean(-1).numpy()

    res = residuals(params)
    for _ in range(restarts):
        bad = np.flatnonzero(res > restart_threshold)
        if len(bad) == 0:
            break
        trial = [p[bad].clone() for p in params]
        trial[0] = as_tensor(rng.normal(0.0, 0.1, (len(bad), N_ANGLES)))
        trial = _polish(trial, target_t[bad], iters, lrs)
        with torch.no_grad():
            J = fk_torch(*trial)
        r_new = torch.linalg.norm(J - target_t[bad], dim=-1).mean(-1).numpy()
        improved = r_new < res[bad]
        for p, tp in zip(params, trial):
            p[bad[improved]] = tp[improved]
        res[bad[improved]] = r_new[improved]

    out = []
    for i, t in enumerate(targets):
        pose = HandPose("right", *(params[j][i].numpy() for j in (1, 2, 0, 3)))
        if t.side == "left":
            pose = flip_pose(pose)
        out.append((pose, float(res[i])))
    return out


def fit_pose(target: Skeleton, init: HandPose | None = None, seed: int = 0, **kw) -> tuple[HandPose, float]:
    if not np.all(np.isfinite(target.joints)):
        raise ValueError("target joints must be finite")
    return fit_poses([target], [init], seed=seed, **kw)[0]


# ---------------------------------------------------------------- JSON

def load_skeleton(path) -> Skeleton:
    with open(path) as fh:
        return Skeleton.from_dict(json.load(fh))


def load_pose(path) -> HandPose:
    with open(path) as fh:
        return HandPose.from_dict(json.load(fh))
