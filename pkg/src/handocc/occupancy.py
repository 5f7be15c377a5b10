"""Inside/outside oracles, the analytic capsule occupancy field, grids and IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from numba import njit

from .geometry import DTYPE, as_tensor
from .kinematics import EDGES, N_BONES, Skeleton
from .mesh import HandMesh, validate_watertight


class NotWatertightError(ValueError):
    pass


# ---------------------------------------------------------------- ray casting

# generic first direction; later attempts draw fresh random directions
_FIRST_DIRECTION = np.array([0.5377, 0.8173, 0.2047]) / np.linalg.norm([0.5377, 0.8173, 0.2047])


@njit(cache=True)
def _cast(V, F, P, d, bary_tol, t_tol):
    """Crossing parity of rays P + t*d, t > 0. Returns (parity, degenerate) per point.

    Triangles are binned on the plane orthogonal to d so each point only tests
    the triangles whose projection can contain it.
    """
    # orthonormal basis (a, b, d)
    if abs(d[0]) < 0.9:
        h = np.array([1.0, 0.0, 0.0])
    else:
        h = np.array([0.0, 1.0, 0.0])
    a = np.cross(d, h)
    a /= np.sqrt((a * a).sum())
    b = np.cross(d, a)
    nv = V.shape[0]
    pv = np.empty((nv, 3))
    for i in range(nv):
        pv[i, 0] = V[i, 0] * a[0] + V[i, 1] * a[1] + V[i, 2] * a[2]
        pv[i, 1] = V[i, 0] * b[0] + V[i, 1] * b[1] + V[i, 2] * b[2]
        pv[i, 2] = V[i, 0] * d[0] + V[i, 1] * d[1] + V[i, 2] * d[2]
    x0, x1 = pv[:, 0].min(), pv[:, 0].max()
    y0, y1 = pv[:, 1].min(), pv[:, 1].max()
    nf = F.shape[0]
    G = max(1, int(np.sqrt(nf)))
    sx = (x1 - x0) / G + 1e-12
    sy = (y1 - y0) / G + 1e-12
    lo = np.empty((nf, 2), np.int64)
    hi = np.empty((nf, 2), np.int64)
    counts = np.zeros(G * G + 1, np.int64)
    for f in range(nf):
        mnx = min(pv[F[f, 0], 0], pv[F[f, 1], 0], pv[F[f, 2], 0])
        mxx = max(pv[F[f, 0], 0], pv[F[f, 1], 0], pv[F[f, 2], 0])
        mny = min(pv[F[f, 0], 1], pv[F[f, 1], 1], pv[F[f, 2], 1])
        mxy = max(pv[F[f, 0], 1], pv[F[f, 1], 1], pv[F[f, 2], 1])
        lo[f, 0] = min(G - 1, max(0, int((mnx - x0) / sx)))
        hi[f, 0] = min(G - 1, max(0, int((mxx - x0) / sx)))
        lo[f, 1] = min(G - 1, max(0, int((mny - y0) / sy)))
        hi[f, 1] = min(G - 1, max(0, int((mxy - y0) / sy)))
        for i in range(lo[f, 0], hi[f, 0] + 1):
            for j in range(lo[f, 1], hi[f, 1] + 1):
                counts[i * G + j + 1] += 1
    for i in range(G * G):
        counts[i + 1] += counts[i]
    fill = counts[:-1].copy()
    items = np.empty(counts[-1], np.int64)
    for f in range(nf):
        for i in range(lo[f, 0], hi[f, 0] + 1):
            for j in range(lo[f, 1], hi[f, 1] + 1):
                items[fill[i * G + j]] = f
                fill[i * G + j] += 1

    npnt = P.shape[0]
    parity = np.zeros(npnt, np.int8)
    degenerate = np.zeros(npnt, np.bool_)
    for p in range(npnt):
        px = P[p, 0] * a[0] + P[p, 1] * a[1] + P[p, 2] * a[2]
        py = P[p, 0] * b[0] + P[p, 1] * b[1] + P[p, 2] * b[2]
        pz = P[p, 0] * d[0] + P[p, 1] * d[1] + P[p, 2] * d[2]
        if px < x0 or px > x1 or py < y0 or py > y1:
            continue
        bi = min(G - 1, max(0, int((px - x0) / sx)))
        bj = min(G - 1, max(0, int((py - y0) / sy)))
        cell = bi * G + bj
        c = 0
        for q in range(counts[cell], counts[cell + 1]):
            f = items[q]
            i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
            ax_, ay_ = pv[i0, 0] - px, pv[i0, 1] - py
            bx_, by_ = pv[i1, 0] - px, pv[i1, 1] - py
            cx_, cy_ = pv[i2, 0] - px, pv[i2, 1] - py
            w0 = bx_ * cy_ - by_ * cx_
            w1 = cx_ * ay_ - cy_ * ax_
            w2 = ax_ * by_ - ay_ * bx_
            area = w0 + w1 + w2
            scale = abs(w0) + abs(w1) + abs(w2)
            if scale == 0.0:
                continue
            if not ((w0 >= -bary_tol * scale and w1 >= -bary_tol * scale and w2 >= -bary_tol * scale)
                    or (w0 <= bary_tol * scale and w1 <= bary_tol * scale and w2 <= bary_tol * scale)):
                continue
            if abs(area) <= bary_tol * scale:
                # triangle seen edge-on along the ray
                degenerate[p] = True
                continue
            l0, l1, l2 = w0 / area, w1 / area, w2 / area
            zh = l0 * pv[i0, 2] + l1 * pv[i1, 2] + l2 * pv[i2, 2]
            if abs(zh - pz) <= t_tol:
                degenerate[p] = True
                continue
            if zh < pz:
                continue
            if l0 <= bary_tol or l1 <= bary_tol or l2 <= bary_tol:
                degenerate[p] = True
                continue
            c += 1
        parity[p] = c & 1
    return parity, degenerate


@dataclass
class RayCastResult:
    inside: np.ndarray
    indeterminate: int = 0


def _require_watertight(m: HandMesh) -> None:
    rep = validate_watertight(m)
    if not (rep.is_closed and rep.is_oriented):
        raise NotWatertightError(f"mesh is not watertight: {rep.defect_list[:3]}")


def ray_cast_points(
    m: HandMesh,
    points: np.ndarray,
    seed: int = 0,
    max_attempts: int = 8,
    direction: np.ndarray | None = None,
    check: bool = True,
) -> RayCastResult:
    """Parity test for many points. Degenerate hits are re-cast with random directions."""
    if check:
        _require_watertight(m)
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    inside = np.zeros(len(P), dtype=bool)
    lo, hi = m.bbox
    cand = np.flatnonzero(np.all((P >= lo) & (P <= hi), axis=1))
    if len(cand) == 0:
        return RayCastResult(inside, 0)
    V = np.ascontiguousarray(m.vertices)
    F = np.ascontiguousarray(m.faces)
    rng = np.random.default_rng(seed)
    d = _FIRST_DIRECTION if direction is None else np.asarray(direction, float) / np.linalg.norm(direction)
    pending = cand
    for _ in range(max_attempts):
        par, deg = _cast(V, F, P[pending], d, 1e-10, 1e-9)
        ok = ~deg
        inside[pending[ok]] = par[ok] == 1
        pending = pending[deg]
        if len(pending) == 0:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
    return RayCastResult(inside, int(len(pending)))


def ray_cast_inside(m: HandMesh, p, seed: int = 0) -> bool:
    return bool(ray_cast_points(m, np.asarray(p, float)[None], seed=seed).inside[0])


@njit(cache=True)
def _winding(V, F, P):
    out = np.zeros(P.shape[0])
    for p in range(P.shape[0]):
        qx, qy, qz = P[p, 0], P[p, 1], P[p, 2]
        acc = 0.0
        for f in range(F.shape[0]):
            i, j, k = F[f, 0], F[f, 1], F[f, 2]
            ax, ay, az = V[i, 0] - qx, V[i, 1] - qy, V[i, 2] - qz
            bx, by, bz = V[j, 0] - qx, V[j, 1] - qy, V[j, 2] - qz
            cx, cy, cz = V[k, 0] - qx, V[k, 1] - qy, V[k, 2] - qz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            num = ax * (by * cz - bz * cy) + ay * (bz * cx - bx * cz) + az * (bx * cy - by * cx)
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
            acc += 2.0 * np.arctan2(num, den)
        out[p] = acc / (4.0 * np.pi)
    return out


def winding_number(m: HandMesh, points: np.ndarray) -> np.ndarray:
    """Generalised winding number from summed signed solid angles."""
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _winding(np.ascontiguousarray(m.vertices), np.ascontiguousarray(m.faces), P)


@njit(cache=True)
def _closest_sq(p, a, b, c):
    # closest point on triangle by Voronoi region (Ericson, Real-Time Collision Detection)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        q = a
    else:
        bp = p - b
        d3 = ab @ bp
        d4 = ac @ bp
        cp = p - c
        d5 = ab @ cp
        d6 = ac @ cp
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            q = b
        elif d6 >= 0.0 and d5 <= d6:
            q = c
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            q = a + ab * (d1 / (d1 - d3))
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            q = a + ac * (d2 / (d2 - d6))
        elif va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
            q = b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
        else:
            s = 1.0 / (va + vb + vc)
            q = a + ab * (vb * s) + ac * (vc * s)
    d = p - q
    return d @ d


@njit(cache=True)
def _surface_distance(V, F, P):
    out = np.empty(P.shape[0])
    for p in range(P.shape[0]):
        best = np.inf
        for f in range(F.shape[0]):
            d = _closest_sq(P[p], V[F[f, 0]], V[F[f, 1]], V[F[f, 2]])
            if d < best:
                best = d
        out[p] = np.sqrt(best)
    return out


def point_triangle_distance(m: HandMesh, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the mesh surface."""
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _surface_distance(np.ascontiguousarray(m.vertices), np.ascontiguousarray(m.faces), P)


# ---------------------------------------------------------------- occupancy fields

def segment_distances(points: torch.Tensor, joints: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Distance (..., P, 20) from each point to each bone segment, and the unclamped
    projection parameter along the bone (0 at the parent joint, 1 at the child)."""
    # expanded dot products avoid (..., P, 20, 3) temporaries; centring on the
    # skeleton keeps the cancellation in |p - a|^2 at the 1e-12 mm^2 level
    c = joints.mean(-2, keepdim=True)
    q = points - c
    a = joints[..., EDGES[:, 0], :] - c
    ab = joints[..., EDGES[:, 1], :] - joints[..., EDGES[:, 0], :]
    ab2 = (ab * ab).sum(-1)[..., None, :]
    ap_ab = q @ ab.transpose(-1, -2) - (a * ab).sum(-1)[..., None, :]
    ap2 = (q * q).sum(-1, keepdim=True) - 2.0 * (q @ a.transpose(-1, -2)) + (a * a).sum(-1)[..., None, :]
    u = ap_ab / ab2
    t = u.clamp(0.0, 1.0)
    d2 = (ap2 - t * (2.0 * ap_ab - t * ab2)).clamp_min(0.0)
    return torch.sqrt(d2 + 1e-12), u


class OccupancyField:
    """Map (points, conditioning skeleton) -> probability of being inside the hand.

    Subclasses implement :meth:`prob_torch`, which must be differentiable in
    both arguments and broadcast over leading batch dimensions.
    """

    def prob_torch(self, points: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _frame(self, points: torch.Tensor, cond: Skeleton) -> tuple[torch.Tensor, torch.Tensor]:
        # fields are conditioned on right hands; left hands are evaluated mirrored
        J = as_tensor(cond.joints)
        if cond.side == "left":
            flip = torch.tensor([-1.0, 1.0, 1.0], dtype=DTYPE)
            return points * flip, J * flip
        return points, J

    def eval(self, points, cond: Skeleton) -> np.ndarray:
        P = as_tensor(points)
        shape = P.shape[:-1]
        P, J = self._frame(P.reshape(-1, 3), cond)
        with torch.no_grad():
            out = torch.cat([self.prob_torch(P[s: s + 32768], J) for s in range(0, max(len(P), 1), 32768)])
        return out.numpy().reshape(shape)

    def grad(self, point, cond: Skeleton) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of the probability w.r.t. the query point (3,) and the joints (21, 3)."""
        p = as_tensor(point).reshape(1, 3).clone().requires_grad_(True)
        J = as_tensor(cond.joints).clone().requires_grad_(True)
        q = p
        K = J
        if cond.side == "left":
            flip = torch.tensor([-1.0, 1.0, 1.0], dtype=DTYPE)
            q, K = p * flip, J * flip
        prob = self.prob_torch(q, K).sum()
        gp, gJ = torch.autograd.grad(prob, (p, J), allow_unused=True)
        gp = torch.zeros_like(p) if gp is None else gp
        gJ = torch.zeros_like(J) if gJ is None else gJ
        return gp.numpy().reshape(3), gJ.numpy()


@dataclass
class CapsuleField(OccupancyField):
    """Logistic of the smooth-min signed distance to the 20 bone capsules.

    p(x) = sigmoid(logsumexp_e(beta * (r_e - d_e(x)))), i.e. sigmoid(beta*(r - d))
    of the nearest capsule when one bone dominates.
    """

    radii: np.ndarray
    beta: float = 2.0

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(N_BONES)
        if not np.all(self.radii > 0) or not self.beta > 0:
            raise ValueError("radii and beta must be positive")
        self._r = torch.as_tensor(self.radii, dtype=DTYPE)

    def bone_distances(self, points: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        """(..., P, 3), (..., 21, 3) -> (..., P, 20) distances to bone segments."""
        return segment_distances(points, joints)[0]

    def logit_torch(self, points: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        d = self.bone_distances(points, joints)
        return torch.logsumexp(self.beta * (self._r.to(d.dtype) - d), dim=-1)

    def prob_torch(self, points, joints):
        return torch.sigmoid(self.logit_torch(points, joints))

    def to_dict(self) -> dict:
        return {"kind": "capsule", "radii": self.radii.tolist(), "beta": self.beta}


# radii (mm) fitted by scripts/calibrate_capsules.py against the plain rest mesh
DEFAULT_CAPSULE_RADII = np.array(
    [
        7.2, 6.7, 6.0, 5.3,
        10.1, 5.0, 4.6, 2.3,
        9.9, 5.4, 4.8, 3.2,
        9.8, 4.9, 4.3, 3.9,
        10.2, 4.1, 3.8, 3.0,
    ]
)


def default_capsule_field() -> CapsuleField:
    return CapsuleField(DEFAULT_CAPSULE_RADII.copy(), 2.0)


def capsule_eval(p, cond: Skeleton, field: CapsuleField) -> float | np.ndarray:
    out = field.eval(np.asarray(p, float), cond)
    return float(out) if np.ndim(out) == 0 else out


def capsule_grad(p, cond: Skeleton, field: CapsuleField) -> tuple[np.ndarray, np.ndarray]:
    return field.grad(p, cond)


# ---------------------------------------------------------------- grids

@dataclass
class OccupancyGrid:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    n: int
    mask: np.ndarray  # bool, or probabilities in [0, 1]

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, float)
        self.bbox_max = np.asarray(self.bbox_max, float)
        self.mask = np.asarray(self.mask).reshape(-1)
        if self.n < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.mask.size != self.n ** 3:
            raise ValueError("mask length must equal n**3")

    @property
    def occupied(self) -> np.ndarray:
        return self.mask if self.mask.dtype == bool else self.mask > 0.5

    def points(self) -> np.ndarray:
        return grid_points(self.bbox_min, self.bbox_max, self.n)

    def to_json(self) -> str:
        occ = self.occupied.astype(np.int8)
        change = np.flatnonzero(np.diff(occ)) + 1
        bounds = np.concatenate([[0], change, [occ.size]])
        runs = np.diff(bounds).tolist()
        if occ[0]:
            runs = [0] + runs
        header = {
            "format": "occupancy-grid-rle/1",
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "n": self.n,
            "order": "x-major (i, j, k) -> i*n*n + j*n + k",
            "first_value": 0,
        }
        return json.dumps({**header, "runs": runs})

    @classmethod
    def from_json(cls, text: str) -> "OccupancyGrid":
        d = json.loads(text)
        vals = np.repeat(np.arange(len(d["runs"])) % 2 == 1, d["runs"])
        return cls(d["bbox_min"], d["bbox_max"], d["n"], vals)

    def write_csv(self, path, probs: np.ndarray | None = None) -> None:
        P = self.points()
        vals = self.mask.astype(float) if probs is None else np.asarray(probs, float).reshape(-1)
        with open(path, "w") as fh:
            fh.write("x,y,z,prob\n")
            for (x, y, z), v in zip(P, vals):
                fh.write(f"{x:.6f},{y:.6f},{z:.6f},{v:.6g}\n")


def grid_points(lo, hi, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("grid resolution must be >= 2")
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)


def padded_bbox(meshes: Sequence[HandMesh], pad: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    lo = np.min([m.vertices.min(0) for m in meshes], axis=0) - pad
    hi = np.max([m.vertices.max(0) for m in meshes], axis=0) + pad
    return lo, hi


def occupancy_grid(source, bbox=None, n: int = 50, seed: int = 0) -> OccupancyGrid:
    """Sample n**3 uniform points; mesh sources give a boolean mask, field sources probabilities."""
    if n < 2:
        raise ValueError("grid resolution must be >= 2")
    if isinstance(source, HandMesh):
        lo, hi = bbox if bbox is not None else padded_bbox([source])
        P = grid_points(lo, hi, n)
        return OccupancyGrid(lo, hi, n, ray_cast_points(source, P, seed=seed).inside)
    field, skel = source
    if bbox is None:
        raise ValueError("a bbox is required for field sources")
    lo, hi = bbox
    P = grid_points(lo, hi, n)
    probs = field.eval(P, skel)
    return OccupancyGrid(lo, hi, n, probs)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.n != b.n or not (np.allclose(a.bbox_min, b.bbox_min) and np.allclose(a.bbox_max, b.bbox_max)):
        raise ValueError("grids must share bbox and resolution")
    A, B = a.occupied, b.occupied
    union = np.count_nonzero(A | B)
    if union == 0:
        return 1.0
    return np.count_nonzero(A & B) / union


def pair_intersection_count(mR: HandMesh, mL: HandMesh, n: int = 50, pad: float = 5.0, seed: int = 0) -> int:
    """Number of shared-grid points inside both meshes."""
    lo, hi = padded_bbox([mR, mL], pad)
    P = grid_points(lo, hi, n)
    (loR, hiR), (loL, hiL) = mR.bbox, mL.bbox
    both = np.all((P >= np.maximum(loR, loL)) & (P <= np.minimum(hiR, hiL)), axis=1)
    cand = P[both]
    if len(cand) == 0:
        return 0
    inR = ray_cast_points(mR, cand, seed=seed).inside
    cand = cand[inR]
    if len(cand) == 0:
        return 0
    return int(np.count_nonzero(ray_cast_points(mL, cand, seed=seed).inside))
