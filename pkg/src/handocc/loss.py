"""Hand-to-hand intersection loss.

For a right hand X_R and a left hand X_L the loss is

    sum_i  O(x_L,i | X_R)^2  +  alpha * O(flip(x_R,i) | flip(X_L))^2

where O is an occupancy field conditioned on a right hand, the x are the
tested points of a hand (joints, densified joints or envelope vertices) and
flip negates x. The truncated kernel only keeps probabilities above 0.5.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geometry import DTYPE, as_tensor
from .kinematics import Skeleton, densify_array, random_pose, forward_kinematics
from .mesh import default_offsets, mesh_vertices_torch
from .occupancy import OccupancyField

POINT_SETS = ("sparse", "dense", "mesh")
_FLIP = torch.tensor([-1.0, 1.0, 1.0], dtype=DTYPE)


@dataclass(frozen=True)
class LossConfig:
    point_set: str = "dense"
    k: int = 5
    both_hands: bool = False
    truncated: bool = False
    weight: float | None = None  # None selects the per-point-set default
    mesh_variant: str = "plain"

    def __post_init__(self):
        if self.point_set not in POINT_SETS:
            raise ValueError(f"point_set must be one of {POINT_SETS}, got {self.point_set!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.weight is not None and not self.weight >= 0:
            raise ValueError("weight must be >= 0")
        if self.mesh_variant not in ("plain", "refined"):
            raise ValueError(f"unknown mesh variant {self.mesh_variant!r}")

    @property
    def alpha(self) -> float:
        return 1.0 if self.both_hands else 0.0

    @property
    def w(self) -> float:
        if self.weight is not None:
            return float(self.weight)
        return 1e-8 if self.point_set == "mesh" else 1e-6

    def n_points(self) -> int:
        if self.point_set == "sparse":
            return 21
        if self.point_set == "dense":
            return 21 + 20 * self.k
        return default_offsets(self.mesh_variant).vertex_count

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "LossConfig":
        return cls(**json.loads(text))


@dataclass
class LossResult:
    value: float
    probs_left: np.ndarray  # left-hand points under the right-hand field
    probs_flipped: np.ndarray | None  # flipped right-hand points under the flipped left-hand field
    grad_left: np.ndarray  # (21, 3)
    grad_right: np.ndarray  # (21, 3)


def hand_points(J: torch.Tensor, cfg: LossConfig, left: bool) -> torch.Tensor:
    """Tested points (..., M, 3) for joints (..., 21, 3), differentiable in J."""
    if cfg.point_set == "sparse":
        return J
    if cfg.point_set == "dense":
        return densify_array(J, cfg.k)
    return mesh_vertices_torch(J, default_offsets(cfg.mesh_variant), left=left)


def truncate_kernel(p):
    """p if p > 0.5 else 0; works on numpy arrays and tensors."""
    if isinstance(p, torch.Tensor):
        return torch.where(p > 0.5, p, torch.zeros_like(p))
    p = np.asarray(p, dtype=float)
    return np.where(p > 0.5, p, 0.0)


def _kernel(p: torch.Tensor, truncated: bool) -> torch.Tensor:
    return (truncate_kernel(p) if truncated else p) ** 2


def loss_terms(JR: torch.Tensor, JL: torch.Tensor, field: OccupancyField, cfg: LossConfig):
    """Batched loss for right/left joints (..., 21, 3).

    Returns the per-pair value (...) and the probabilities of both terms.
    """
    pL = field.prob_torch(hand_points(JL, cfg, left=True), JR)
    value = _kernel(pL, cfg.truncated).sum(-1)
    pF = None
    if cfg.both_hands:
        # flipped right hand is geometrically a left hand, flipped left hand a right one
        pF = field.prob_torch(hand_points(JR * _FLIP, cfg, left=True), JL * _FLIP)
        value = value + cfg.alpha * _kernel(pF, cfg.truncated).sum(-1)
    return value, pL, pF


def _check_sides(skel_R: Skeleton, skel_L: Skeleton) -> None:
    if skel_R.side != "right" or skel_L.side != "left":
        raise ValueError(f"expected (right, left) skeletons, got ({skel_R.side}, {skel_L.side})")


def intersection_loss(skel_R: Skeleton, skel_L: Skeleton, field: OccupancyField, cfg: LossConfig) -> LossResult:
    """Unweighted loss value with gradients w.r.t. both hands' joints."""
    _check_sides(skel_R, skel_L)
    JR = as_tensor(skel_R.joints).clone().requires_grad_(True)
    JL = as_tensor(skel_L.joints).clone().requires_grad_(True)
    value, pL, pF = loss_terms(JR, JL, field, cfg)
    gR, gL = torch.autograd.grad(value, (JR, JL), allow_unused=True)
    gR = torch.zeros_like(JR) if gR is None else gR
    gL = torch.zeros_like(JL) if gL is None else gL
    return LossResult(
        float(value.detach()),
        pL.detach().numpy(),
        None if pF is None else pF.detach().numpy(),
        gL.numpy(),
        gR.numpy(),
    )


def random_contact_pair(rng: np.random.Generator, jitter: float = 5.0) -> tuple[Skeleton, Skeleton]:
    """A right/left pair placed so a random point of each hand nearly coincides."""
    SR = forward_kinematics(random_pose(rng, "right"))
    SL = forward_kinematics(random_pose(rng, "left"))
    dR = densify_array(SR.joints, 5)
    dL = densify_array(SL.joints, 5)
    shift = dR[rng.integers(len(dR))] - dL[rng.integers(len(dL))] + rng.normal(0.0, jitter, 3)
    return SR, Skeleton(SL.joints + shift, "left")


@dataclass
class GradcheckReport:
    max_rel_err: float
    n_configs: int
    n_below_resolution: int  # configs whose gradient is smaller than the finite-difference resolution


# round-off in a central difference is about eps * |f| / h; the relative error is
# measured against at least this many times that, so that gradients the difference
# cannot resolve are compared at 1e-4 of the resolution instead of against themselves
_RESOLUTION_FACTOR = 1e4


def loss_gradcheck_report(
    cfg: LossConfig,
    field: OccupancyField,
    seed: int = 0,
    n_configs: int = 1,
    h: float = 1e-4,
) -> GradcheckReport:
    """Compare autograd with central differences over random contact pairs.

    The error for one configuration is |g_analytic - g_fd|_inf / max(|g_analytic|_inf, |g_fd|_inf, r),
    where r = 1e4 * eps * max|f| / h is the finite-difference resolution floor.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    below = 0
    eps = float(np.finfo(np.float64).eps)
    eye = torch.eye(126, dtype=DTYPE).reshape(126, 2, 21, 3) * h
    for _ in range(n_configs):
        SR, SL = random_contact_pair(rng)
        res = intersection_loss(SR, SL, field, cfg)
        ga = np.concatenate([res.grad_right.ravel(), res.grad_left.ravel()])
        X = torch.stack([as_tensor(SR.joints), as_tensor(SL.joints)])
        with torch.no_grad():
            plus = X + eye
            minus = X - eye
            fp = loss_terms(plus[:, 0], plus[:, 1], field, cfg)[0]
            fm = loss_terms(minus[:, 0], minus[:, 1], field, cfg)[0]
        gfd = ((fp - fm) / (2 * h)).numpy()
        fmax = max(abs(res.value), float(fp.abs().max()), float(fm.abs().max()))
        resolution = _RESOLUTION_FACTOR * eps * fmax / h
        scale = max(np.abs(ga).max(), np.abs(gfd).max())
        if scale < resolution:
            below += 1
        scale = max(scale, resolution)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(ga - gfd).max() / scale))
    return GradcheckReport(worst, n_configs, below)


def loss_gradcheck(
    cfg: LossConfig,
    field: OccupancyField,
    seed: int = 0,
    n_configs: int = 1,
    h: float = 1e-4,
) -> float:
    """Worst relative gradient error; see :func:`loss_gradcheck_report`."""
    return loss_gradcheck_report(cfg, field, seed, n_configs, h).max_rel_err
