"""Desk-scale learned occupancy network conditioned on the 21-joint skeleton.

The encoder is a shared per-joint MLP with residual blocks followed by a
log-sum-exp pool (a smooth max, so the network stays C1 in the joints).
The decoder maps per-point features to a logit, modulated by the skeleton code
through feature-wise affine (FiLM) layers.
"""

from __future__ import annotations

import copy
import csv
import io
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .artifacts import write_bytes
from .geometry import DTYPE, as_tensor, random_rotations, rotvec_to_matrix
from .kinematics import EDGES, N_JOINTS, HandPose, Skeleton, flip_x, forward_kinematics
from .mesh import generate_meshes
from .occupancy import OccupancyField, grid_points, padded_bbox, ray_cast_points, segment_distances

MAGIC = b"OCN1"
FORMAT_VERSION = 1
N_POINT_FEATURES = 3 + 2 * len(EDGES)


class NumericalError(RuntimeError):
    pass


def normalize_inputs(points: torch.Tensor, joints: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Centre at the wrist and divide by the mean bone length of the conditioning skeleton."""
    wrist = joints[..., :1, :]
    bones = joints[..., EDGES[:, 1], :] - joints[..., EDGES[:, 0], :]
    scale = torch.sqrt((bones * bones).sum(-1) + 1e-12).mean(-1)[..., None, None]
    return (points - wrist) / scale, (joints - wrist) / scale


class _Residual(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.l1 = nn.Linear(width, width)
        self.l2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.l2(nn.functional.silu(self.l1(nn.functional.silu(x))))


class _FiLMResidual(nn.Module):
    def __init__(self, width: int, feat: int):
        super().__init__()
        self.film = nn.Linear(feat, 2 * width)
        self.l1 = nn.Linear(width, width)
        self.l2 = nn.Linear(width, width)

    def forward(self, h, f):
        gamma, beta = self.film(f).unsqueeze(-2).chunk(2, dim=-1)
        y = nn.functional.silu(h * (1.0 + gamma) + beta)
        return h + self.l2(nn.functional.silu(self.l1(y)))


@dataclass(frozen=True)
class OccNetDims:
    enc_hidden: int = 96
    enc_blocks: int = 2
    feat: int = 64
    dec_hidden: int = 96
    dec_blocks: int = 3


class OccNet(nn.Module):
    def __init__(self, dims: OccNetDims = OccNetDims()):
        super().__init__()
        self.dims = dims
        self.enc_in = nn.Linear(3 + N_JOINTS, dims.enc_hidden)
        self.enc_blocks = nn.ModuleList(_Residual(dims.enc_hidden) for _ in range(dims.enc_blocks))
        self.enc_out = nn.Linear(dims.enc_hidden, dims.feat)
        self.dec_in = nn.Linear(N_POINT_FEATURES, dims.dec_hidden)
        self.dec_blocks = nn.ModuleList(_FiLMResidual(dims.dec_hidden, dims.feat) for _ in range(dims.dec_blocks))
        self.dec_out = nn.Linear(dims.dec_hidden, 1)
        nn.init.zeros_(self.dec_out.weight)
        nn.init.zeros_(self.dec_out.bias)

    def encode(self, joints_n: torch.Tensor) -> torch.Tensor:
        """(..., 21, 3) normalised joints -> (..., feat)."""
        onehot = torch.eye(N_JOINTS, dtype=joints_n.dtype).expand(*joints_n.shape[:-1], N_JOINTS)
        h = self.enc_in(torch.cat([joints_n, onehot], -1))
        for blk in self.enc_blocks:
            h = blk(h)
        return self.enc_out(torch.logsumexp(h, dim=-2))

    def decode(self, points_n: torch.Tensor, joints_n: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        d, u = segment_distances(points_n, joints_n)
        # smooth squash of the position along each bone; a hard clamp would put kinks at the joints
        h = self.dec_in(torch.cat([points_n, d, torch.tanh(2.0 * u - 1.0)], -1))
        for blk in self.dec_blocks:
            h = blk(h, f)
        return self.dec_out(nn.functional.silu(h)).squeeze(-1)

    def forward(self, points: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        """Logits for (..., P, 3) points under (..., 21, 3) right-hand joints (mm)."""
        pn, jn = normalize_inputs(points, joints)
        return self.decode(pn, jn, self.encode(jn))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class OccNetField(OccupancyField):
    """OccupancyField backed by an :class:`OccNet`; evaluated in float64."""

    def __init__(self, model: OccNet):
        self.model = copy.deepcopy(model).to(DTYPE).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def prob_torch(self, points, joints):
        return torch.sigmoid(self.model(points, joints))

    def encode_skeleton(self, s: Skeleton) -> np.ndarray:
        J = as_tensor((flip_x(s) if s.side == "left" else s).joints)
        with torch.no_grad():
            return self.model.encode(normalize_inputs(J[:1], J)[1]).numpy()

    def to_dict(self) -> dict:
        return {"kind": "occnet", "dims": asdict(self.model.dims)}


def encode_skeleton(s: Skeleton, model: OccNet) -> np.ndarray:
    return OccNetField(model).encode_skeleton(s)


def occnet_eval(p, cond: Skeleton, model: OccNet):
    out = OccNetField(model).eval(np.asarray(p, float), cond)
    return float(out) if np.ndim(out) == 0 else out


def occnet_grad(p, cond: Skeleton, model: OccNet) -> tuple[np.ndarray, np.ndarray]:
    return OccNetField(model).grad(p, cond)


# ---------------------------------------------------------------- serialization

def save_params(model: OccNet, path) -> None:
    d = model.dims
    buf = io.BytesIO()
    buf.write(MAGIC)
    state = model.state_dict()
    buf.write(struct.pack("<7I", FORMAT_VERSION, d.enc_hidden, d.enc_blocks, d.feat, d.dec_hidden, d.dec_blocks, len(state)))
    for name, t in state.items():
        key = name.encode()
        buf.write(struct.pack("<I", len(key)) + key)
        buf.write(struct.pack("<I", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    write_bytes(path, buf.getvalue())


def load_params(path) -> OccNet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an OCN1 checkpoint")
    version, eh, eb, feat, dh, db, n = struct.unpack_from("<7I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    model = OccNet(OccNetDims(eh, eb, feat, dh, db))
    off = 4 + 28
    state = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off: off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- data and training

@dataclass
class TrainConfig:
    samples_per_hand: int = 8192
    rotation_augmentation_deg: float = 180.0
    point_noise_sigma: float = 3.0
    bbox_pad: float = 10.0
    epochs: int = 20
    poses_per_batch: int = 8
    points_per_pose: int = 2048
    learning_rate: float = 2e-3
    lr_decay: float = 0.88
    val_fraction: float = 0.2
    val_grid: int = 24
    seed: int = 0
    dims: OccNetDims = field(default_factory=OccNetDims)

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = OccNetDims(**self.dims)
        if self.samples_per_hand < 1:
            raise ValueError("samples_per_hand must be >= 1")
        if self.point_noise_sigma < 0:
            raise ValueError("point_noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledSampleSet:
    pose_ids: np.ndarray  # (P,)
    skeletons: np.ndarray  # (P, 21, 3) right-hand joints after augmentation
    points: np.ndarray  # (P, M, 3)
    labels: np.ndarray  # (P, M) bool

    def __len__(self):
        return len(self.pose_ids)

    def subset(self, idx) -> "LabeledSampleSet":
        idx = np.asarray(idx)
        return LabeledSampleSet(self.pose_ids[idx], self.skeletons[idx], self.points[idx], self.labels[idx])


def sample_training_set(poses: Sequence[HandPose], cfg: TrainConfig, seed: int | None = None) -> LabeledSampleSet:
    """Half uniform samples in the padded mesh bbox, half jittered mesh vertices, ray-cast labels.

    Left hands are mirrored to right hands first; each skeleton/mesh pair is
    rotated about its wrist by one shared random rotation.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    skels = []
    for pose in poses:
        s = forward_kinematics(pose)
        skels.append(flip_x(s) if s.side == "left" else s)
    rots = rotvec_to_matrix(random_rotations(rng, len(skels), math.radians(cfg.rotation_augmentation_deg)))
    aug = []
    for s, R in zip(skels, rots):
        w = s.joints[0]
        aug.append(Skeleton((s.joints - w) @ R.T + w, "right"))
    meshes = generate_meshes(aug, "plain")
    M = cfg.samples_per_hand
    n_uniform = M - M // 2
    pts = np.empty((len(aug), M, 3))
    labels = np.empty((len(aug), M), dtype=bool)
    for i, m in enumerate(meshes):
        lo, hi = padded_bbox([m], cfg.bbox_pad)
        uni = rng.uniform(lo, hi, size=(n_uniform, 3))
        vid = rng.integers(0, len(m.vertices), size=M - n_uniform)
        near = m.vertices[vid] + rng.normal(0.0, cfg.point_noise_sigma, size=(M - n_uniform, 3))
        pts[i] = np.concatenate([uni, near])
        labels[i] = ray_cast_points(m, pts[i], seed=int(rng.integers(2**31))).inside
    return LabeledSampleSet(np.arange(len(aug)), np.stack([s.joints for s in aug]), pts, labels)


def _grid_masks(skeletons: np.ndarray, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for m in generate_meshes([Skeleton(j, "right") for j in skeletons], "plain"):
        P = grid_points(*padded_bbox([m]), n)
        out.append((P, ray_cast_points(m, P).inside))
    return out


def grid_iou(model: OccNet, skeletons: np.ndarray, n: int = 50, targets=None) -> np.ndarray:
    """Per-pose IoU of the network's thresholded grid against the ray-cast mesh grid."""
    targets = targets if targets is not None else _grid_masks(skeletons, n)
    out = np.empty(len(skeletons))
    model.eval()
    with torch.no_grad():
        for i, (P, truth) in enumerate(targets):
            J = torch.as_tensor(skeletons[i], dtype=torch.float32)
            logits = torch.cat([model(torch.as_tensor(P[s: s + 32768], dtype=torch.float32), J)
                                for s in range(0, len(P), 32768)])
            pred = (logits > 0).numpy()
            union = np.count_nonzero(pred | truth)
            out[i] = 1.0 if union == 0 else np.count_nonzero(pred & truth) / union
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    seconds: float


def train_occnet(data: LabeledSampleSet, cfg: TrainConfig, log=None) -> tuple[OccNet, list[EpochRecord]]:
    """Mini-batch Adam on binary cross-entropy; returns the best-validation-IoU weights."""
    if len(data) < 2 or len(np.unique(data.pose_ids)) < 2:
        raise ValueError("need >= 2 poses for validation split")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_val = min(len(data) - 1, max(1, int(round(len(data) * cfg.val_fraction))))
    train, val = data.subset(np.arange(len(data) - n_val)), data.subset(np.arange(len(data) - n_val, len(data)))
    val_targets = _grid_masks(val.skeletons, cfg.val_grid)

    model = OccNet(cfg.dims)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay)
    X = torch.as_tensor(train.points, dtype=torch.float32)
    Y = torch.as_tensor(train.labels, dtype=torch.float32)
    Jt = torch.as_tensor(train.skeletons, dtype=torch.float32)
    M = X.shape[1]
    ppp = min(cfg.points_per_pose, M)
    chunks = max(1, M // ppp)

    history: list[EpochRecord] = []
    best_iou, best_state = -1.0, copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        items = [(p, c) for p in range(len(train)) for c in range(chunks)]
        order = rng.permutation(len(items))
        perms = [torch.as_tensor(rng.permutation(M)) for _ in range(len(train))]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.poses_per_batch)):
            sel = [items[k] for k in order[start: start + cfg.poses_per_batch]]
            pidx = torch.as_tensor([p for p, _ in sel])
            cols = torch.stack([perms[p][c * ppp:(c + 1) * ppp] for p, c in sel])
            pts = torch.gather(X[pidx], 1, cols[..., None].expand(-1, -1, 3))
            lab = torch.gather(Y[pidx], 1, cols)
            logits = model(pts, Jt[pidx])
            loss = nn.functional.binary_cross_entropy_with_logits(logits, lab)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b} (poses {pidx.tolist()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * lab.numel()
            count += lab.numel()
        sched.step()
        val_iou = float(grid_iou(model, val.skeletons, cfg.val_grid, val_targets).mean())
        rec = EpochRecord(epoch, total / count, val_iou, time.perf_counter() - t0)
        history.append(rec)
        if log:
            log(f"epoch {epoch}: loss {rec.train_loss:.4f} val IoU {val_iou:.4f} ({rec.seconds:.1f}s)")
        if val_iou > best_iou:
            best_iou, best_state = val_iou, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_iou", "seconds"])
    for r in history:
        w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_iou:.6f}", f"{r.seconds:.2f}"])
    return buf.getvalue()
