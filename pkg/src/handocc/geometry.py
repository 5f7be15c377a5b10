"""Small batched rotation and vector helpers shared by the torch code paths."""

from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64

def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def safe_norm(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return torch.sqrt((v * v).sum(-1) + eps * eps)


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / safe_norm(v, eps)[..., None]


def skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([o, -z, y], -1), torch.stack([z, o, -x], -1), torch.stack([-y, x, o], -1)],
        -2,
    )


def rodrigues(rotvec: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses Taylor expansions near zero so the map and its gradient stay finite.
    """
    theta2 = (rotvec * rotvec).sum(-1)
    small = theta2 < 1e-12
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    K = skew(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rot_x(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    o, i = torch.zeros_like(angle), torch.ones_like(angle)
    return torch.stack(
        [torch.stack([i, o, o], -1), torch.stack([o, c, -s], -1), torch.stack([o, s, c], -1)], -2
    )


def rot_z(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    o, i = torch.zeros_like(angle), torch.ones_like(angle)
    return torch.stack(
        [torch.stack([c, -s, o], -1), torch.stack([s, c, o], -1), torch.stack([o, o, i], -1)], -2
    )


def transport(v: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rotate v by the minimal rotation taking unit vector a onto unit vector b.

    Undefined for a == -b; callers keep consecutive bones well below a half turn.
    """
    k = torch.cross(a, b, dim=-1)
    c = (a * b).sum(-1, keepdim=True)
    return v * c + torch.cross(k, v, dim=-1) + k * (k * v).sum(-1, keepdim=True) / (1.0 + c)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` for a single numpy rotation matrix."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(R).as_rotvec()


def random_rotations(rng: np.random.Generator, n: int, max_angle: float = np.pi) -> np.ndarray:
    """n rotation vectors with uniform random axis and angle uniform in [-max_angle, max_angle]."""
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(-max_angle, max_angle, size=(n, 1))
    return axis * angle


def rotvec_to_matrix(rv: np.ndarray) -> np.ndarray:
    return rodrigues(as_tensor(rv)).numpy()
