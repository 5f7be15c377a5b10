"""Watertight hand envelope mesh draped over a 21-joint skeleton.

Layout (right hand; a left hand is generated mirrored):

* palm: ``palm_rings`` loops of ``4k - 6`` vertices swept from the wrist to the
  knuckle line. Each loop is a dorsal chain (pinky -> index side) followed by
  a palmar chain running back. The wrist end is closed by a two-vertex ridge.
* fingers: the top palm loop is partitioned into four k-gons, one per finger,
  with adjacent fingers sharing the web edge between them. Each finger is a
  tube of k-vertex rings ending in an apex vertex.
* thumb: a k-gon hole is cut into the index-side wall of the palm and a tube
  of the same construction is attached to it.

Ring frames follow each finger chain by parallel transport of the palm normal,
so generation is rigid-equivariant and continuous in the joints. Everything is
written in torch so gradients flow from vertices back to joints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .artifacts import write_text
from .geometry import DTYPE, as_tensor, normalize, transport
from .kinematics import EDGES, TOPOLOGY, PointSet, Skeleton

PLAIN_VERTEX_COUNT = 307
REFINED_VERTEX_COUNT = 699


class MeshGenerationError(ValueError):
    pass


class ObjParseError(ValueError):
    pass


# Finger stations are (bone, fraction, radius_mm). bone 1..3 is the phalanx
# from chain joint ``bone`` to ``bone + 1``; fraction 0 puts the ring on the
# joint itself using the bisecting frame. The first ring sits well along the
# proximal bone so the palm-to-tube transition does not fold under strong flexion.
_PLAIN_FINGER = [(1, 0.4, 1.0), (1, 0.75, 0.97), (2, 0.0, 0.92), (2, 0.5, 0.88), (3, 0.0, 0.84), (3, 0.6, 0.78)]
_PLAIN_THUMB = [
    (1, 0.35, 1.0), (1, 0.6, 0.97), (1, 0.85, 0.93), (2, 0.3, 0.9),
    (2, 0.7, 0.87), (3, 0.0, 0.84), (3, 0.4, 0.8), (3, 0.75, 0.75),
]
_REFINED_FINGER = [
    (1, 0.4, 1.0), (1, 0.6, 0.98), (1, 0.8, 0.96), (2, 0.0, 0.92),
    (2, 0.5, 0.88), (3, 0.0, 0.84), (3, 0.45, 0.8), (3, 0.8, 0.74),
]
_REFINED_THUMB = [
    (1, 0.35, 1.0), (1, 0.55, 0.98), (1, 0.75, 0.95), (2, 0.0, 0.92), (2, 0.35, 0.9),
    (2, 0.7, 0.87), (3, 0.0, 0.84), (3, 0.3, 0.81), (3, 0.6, 0.77), (3, 0.85, 0.72),
]
# base radius per finger (thumb, index, middle, ring, pinky); deliberately thin
_BASE_RADIUS = (7.5, 5.8, 6.0, 5.6, 5.0)


@dataclass
class OffsetTable:
    """Pre-determined envelope offsets for one mesh variant (mm)."""

    variant: str
    ring_size: int
    palm_rings: int
    thumb_socket_start: int
    finger_stations: list = field(default_factory=list)  # 5 lists of (bone, fraction, radius)
    top_half_thickness: float = 9.0
    knuckle_bulge: float = 0.15
    wrist_half_thickness: float = 8.5
    wrist_half_width: float = 22.0
    end_extension: float = 0.5
    wrist_cap_bulge: float = 3.0
    tip_extension: float = 0.5

    def __post_init__(self):
        self.finger_stations = [[tuple(s) for s in f] for f in self.finger_stations]
        k = self.ring_size
        if k < 4 or k % 2:
            raise ValueError("ring_size must be even and >= 4")
        if len(self.finger_stations) != 5:
            raise ValueError("need stations for 5 fingers")
        if not 1 <= self.thumb_socket_start or self.thumb_socket_start + k // 2 > self.palm_rings:
            raise ValueError("thumb socket does not fit in the palm rings")
        for f in self.finger_stations:
            if not f:
                raise ValueError("every finger needs at least one ring")
            for b, u, r in f:
                if b not in (1, 2, 3) or not 0.0 <= u < 1.0 or not (np.isfinite(r) and r > 0):
                    raise ValueError(f"bad station {(b, u, r)}")

    @property
    def palm_ring_size(self) -> int:
        return 4 * self.ring_size - 6

    @property
    def vertex_count(self) -> int:
        k = self.ring_size
        return self.palm_rings * self.palm_ring_size + 2 + sum(k * len(f) + 1 for f in self.finger_stations)

    def ring_angles(self) -> np.ndarray:
        k = self.ring_size
        return -np.pi + (np.arange(k) + 0.5) * 2 * np.pi / k

    def offsets(self, finger: int) -> np.ndarray:
        """Local-frame ring displacement vectors (stations, k, 3); x flexion axis, y bone, z palm side."""
        th = self.ring_angles()
        r = np.array([s[2] for s in self.finger_stations[finger]])[:, None]
        return np.stack([r * np.cos(th), np.zeros_like(r * th), r * np.sin(th)], -1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OffsetTable":
        return cls(**json.loads(text))


def default_offsets(variant: str = "plain") -> OffsetTable:
    if variant == "plain":
        k, rings, socket, finger, thumb = 6, 6, 1, _PLAIN_FINGER, _PLAIN_THUMB
    elif variant == "refined":
        k, rings, socket, finger, thumb = 10, 8, 1, _REFINED_FINGER, _REFINED_THUMB
    else:
        raise ValueError(f"unknown variant {variant!r}")
    stations = []
    for f, base in enumerate(_BASE_RADIUS):
        src = thumb if f == 0 else finger
        stations.append([(b, u, round(base * s, 4)) for b, u, s in src])
    return OffsetTable(variant, k, rings, socket, stations)


@dataclass
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray
    variant: str = "plain"
    source_skeleton: Skeleton | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# ---------------------------------------------------------------- topology

@dataclass(frozen=True)
class _Layout:
    faces: np.ndarray
    finger_ring_start: tuple[int, ...]  # first vertex of each finger's tube rings
    apex: tuple[int, ...]
    cap: tuple[int, int]
    n_vertices: int


def _strip(a: Sequence[int], b: Sequence[int], skip=()) -> list:
    n = len(a)
    out = []
    for i in range(n):
        if i in skip:
            continue
        j = (i + 1) % n
        out.append((a[i], b[j], a[j]))
        out.append((a[i], b[i], b[j]))
    return out


def _layout_key(t: OffsetTable) -> tuple:
    return (t.ring_size, t.palm_rings, t.thumb_socket_start, tuple(len(f) for f in t.finger_stations))


@lru_cache(maxsize=None)
def _layout(key: tuple) -> _Layout:
    k, n_r, r0, counts = key
    R = 4 * k - 6
    half = k // 2
    ring = lambda r: [r * R + i for i in range(R)]  # noqa: E731
    d_end, p_end = 2 * k - 4, 2 * k - 3
    r_top = r0 + half - 1

    faces = []
    for r in range(n_r - 1):
        skip = {d_end} if r0 <= r < r_top else set()
        faces += _strip(ring(r), ring(r + 1), skip)

    A, B = n_r * R, n_r * R + 1
    m_d, m_p = k - 2, 3 * k - 5
    bottom = ring(0)
    for i in range(m_d, m_p):
        faces.append((bottom[i], bottom[i + 1], A))
    for i in list(range(m_p, R)) + list(range(0, m_d)):
        faces.append((bottom[i], bottom[(i + 1) % R], B))
    faces.append((A, bottom[m_p], B))
    faces.append((B, bottom[m_d], A))

    top = ring(n_r - 1)
    bases = []
    thumb_base = [r * R + d_end for r in range(r_top, r0 - 1, -1)] + [r * R + p_end for r in range(r0, r_top + 1)]
    bases.append(thumb_base)
    for f in (1, 2, 3, 4):  # index..pinky; pinky sits at the start of the dorsal chain
        q = 4 - f
        cs = list(range(q * (half - 1), (q + 1) * (half - 1) + 1))
        palmar = [top[p_end + (2 * k - 4 - c)] for c in reversed(cs)]
        bases.append([top[c] for c in cs] + palmar)

    nxt = A + 2
    starts, apexes = [], []
    for f in range(5):
        starts.append(nxt)
        rings = [bases[f]]
        for _ in range(counts[f]):
            rings.append(list(range(nxt, nxt + k)))
            nxt += k
        for a, b in zip(rings[:-1], rings[1:]):
            faces += _strip(a, b)
        apex = nxt
        nxt += 1
        last = rings[-1]
        for i in range(k):
            faces.append((last[(i + 1) % k], last[i], apex))
        apexes.append(apex)
    return _Layout(np.array(faces, dtype=np.int64), tuple(starts), tuple(apexes), (A, B), nxt)


def mesh_faces(table: OffsetTable) -> np.ndarray:
    return _layout(_layout_key(table)).faces


# ---------------------------------------------------------------- geometry

def _check_bones(J: torch.Tensor) -> None:
    L = torch.linalg.norm(J[..., EDGES[:, 1], :] - J[..., EDGES[:, 0], :], dim=-1)
    if not torch.isfinite(J).all():
        raise MeshGenerationError("skeleton contains non-finite coordinates")
    bad = (L <= 1e-9).nonzero()
    if len(bad):
        b = int(bad[0, -1])
        raise MeshGenerationError(f"zero-length bone {TOPOLOGY.bone_name(b)}")


def _ring(center, e_x, e_z, radius: float, cos_t, sin_t):
    return center[..., None, :] + radius * (cos_t[:, None] * e_x[..., None, :] + sin_t[:, None] * e_z[..., None, :])


def _vertices_right(J: torch.Tensor, t: OffsetTable) -> torch.Tensor:
    k = t.ring_size
    half = k // 2
    lay = _layout(_layout_key(t))
    chains = TOPOLOGY.finger_chains
    w = J[..., 0, :]
    K = [J[..., chains[f][0], :] for f in (1, 2, 3, 4)]  # index, middle, ring, pinky knuckles
    n = normalize(torch.cross(K[0] - w, K[3] - w, dim=-1))

    # knuckle line webs, pinky side first
    e = t.end_extension
    webs = [K[3] + e * (K[3] - K[2]), 0.5 * (K[3] + K[2]), 0.5 * (K[2] + K[1]), 0.5 * (K[1] + K[0]), K[0] + e * (K[0] - K[1])]
    s = torch.linspace(0.0, 1.0, half, dtype=J.dtype)
    chain_pts, chain_h = [], []
    for q in range(4):
        seg = webs[q][..., None, :] + s[:, None] * (webs[q + 1] - webs[q])[..., None, :]
        h = t.top_half_thickness * (1.0 + t.knuckle_bulge * torch.sin(np.pi * s))
        if q > 0:
            seg, h = seg[..., 1:, :], h[1:]
        chain_pts.append(seg)
        chain_h.append(h)
    top_base = torch.cat(chain_pts, -2)  # (..., 2k-3, 3)
    top_h = torch.cat(chain_h)

    lateral = webs[4] - webs[0]
    lateral = normalize(lateral - (lateral * n).sum(-1, keepdim=True) * n)
    up = K[1] - w
    up = normalize(up - (up * n).sum(-1, keepdim=True) * n)
    nc = 2 * k - 3
    sc = torch.linspace(0.0, 1.0, nc, dtype=J.dtype)
    wrist_base = w[..., None, :] + ((2 * sc - 1) * t.wrist_half_width)[:, None] * lateral[..., None, :]
    wrist_h = t.wrist_half_thickness * (0.6 + 0.4 * torch.sin(np.pi * sc))

    def loop(base, h):
        dors = base - h[:, None] * n[..., None, :]
        palm = base + h[:, None] * n[..., None, :]
        return torch.cat([dors, palm.flip(-2)], -2)

    bottom = loop(wrist_base, wrist_h)
    top = loop(top_base, top_h)
    tr = torch.linspace(0.0, 1.0, t.palm_rings, dtype=J.dtype)
    palm = bottom[..., None, :, :] + tr[:, None, None] * (top - bottom)[..., None, :, :]
    verts = [palm.reshape(J.shape[:-2] + (-1, 3))]

    cap_shift = -t.wrist_cap_bulge * up
    A = w + 0.5 * t.wrist_half_width * lateral + cap_shift
    B = w - 0.5 * t.wrist_half_width * lateral + cap_shift
    verts.append(torch.stack([A, B], -2))

    th = torch.as_tensor(t.ring_angles(), dtype=J.dtype)
    cos_t, sin_t = torch.cos(th), torch.sin(th)
    for f in range(5):
        jc = [w] + [J[..., c, :] for c in chains[f]]
        d = [normalize(jc[i + 1] - jc[i]) for i in range(4)]
        ref = [normalize(n - (n * d[0]).sum(-1, keepdim=True) * d[0])]
        for i in (1, 2, 3):
            r = transport(ref[-1], d[i - 1], d[i])
            ref.append(normalize(r - (r * d[i]).sum(-1, keepdim=True) * d[i]))
        rings = []
        for b, u, radius in t.finger_stations[f]:
            if u == 0.0:
                dirn = normalize(d[b - 1] + d[b])
                rz = transport(ref[b - 1], d[b - 1], dirn)
                rz = normalize(rz - (rz * dirn).sum(-1, keepdim=True) * dirn)
                center = jc[b]
            else:
                dirn, rz = d[b], ref[b]
                center = jc[b] + u * (jc[b + 1] - jc[b])
            ex = torch.cross(dirn, rz, dim=-1)
            rings.append(_ring(center, ex, rz, radius, cos_t, sin_t))
        tip_r = t.finger_stations[f][-1][2]
        apex = jc[4] + t.tip_extension * tip_r * d[3]
        verts.append(torch.cat(rings + [apex[..., None, :]], -2))
    V = torch.cat(verts, -2)
    assert V.shape[-2] == lay.n_vertices == t.vertex_count
    return V


_FLIP = torch.tensor([-1.0, 1.0, 1.0], dtype=DTYPE)


def mesh_vertices_torch(J: torch.Tensor, table: OffsetTable, left: bool = False) -> torch.Tensor:
    """Differentiable vertices (..., V, 3) for joints (..., 21, 3)."""
    _check_bones(J)
    if left:
        return _vertices_right(J * _FLIP, table) * _FLIP
    return _vertices_right(J, table)


def _table(variant: str, offsets: OffsetTable | None) -> OffsetTable:
    t = offsets if offsets is not None else default_offsets(variant)
    if t.variant != variant:
        raise ValueError(f"offset table is for {t.variant!r}, not {variant!r}")
    return t


def generate_mesh(s: Skeleton, variant: str = "plain", offsets: OffsetTable | None = None) -> HandMesh:
    t = _table(variant, offsets)
    V = mesh_vertices_torch(as_tensor(s.joints), t, left=s.side == "left")
    F = mesh_faces(t)
    if s.side == "left":
        F = F[:, [0, 2, 1]]
    return HandMesh(V.numpy(), F.copy(), variant, s)


def generate_meshes(skeletons: Sequence[Skeleton], variant: str = "plain", offsets: OffsetTable | None = None) -> list[HandMesh]:
    """Batched generation; skeletons may mix sides."""
    t = _table(variant, offsets)
    F = mesh_faces(t)
    out: list[HandMesh | None] = [None] * len(skeletons)
    for side in ("right", "left"):
        idx = [i for i, s in enumerate(skeletons) if s.side == side]
        if not idx:
            continue
        J = as_tensor(np.stack([skeletons[i].joints for i in idx]))
        V = mesh_vertices_torch(J, t, left=side == "left").numpy()
        Fs = F if side == "right" else F[:, [0, 2, 1]]
        for j, i in enumerate(idx):
            out[i] = HandMesh(V[j], Fs.copy(), variant, skeletons[i])
    return out


def mesh_surface_pointset(m: HandMesh) -> PointSet:
    return PointSet(m.vertices, "mesh_surface")


# ---------------------------------------------------------------- validation

@dataclass
class WatertightReport:
    is_closed: bool
    is_oriented: bool
    euler_char: int
    defect_list: list

    @property
    def ok(self) -> bool:
        return not self.defect_list


_EXPECTED_V = {"plain": PLAIN_VERTEX_COUNT, "refined": REFINED_VERTEX_COUNT}


def validate_watertight(m: HandMesh) -> WatertightReport:
    """Exact combinatorial closed-manifold, orientation and genus checks."""
    F = np.asarray(m.faces)
    V = len(m.vertices)
    defects: list = []
    if F.size == 0:
        return WatertightReport(False, False, V, [("empty", None)])
    for fi in np.flatnonzero((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
        defects.append(("degenerate_face", int(fi)))
    if F.min() < 0 or F.max() >= V:
        defects.append(("index_out_of_range", int(F.max())))
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    keys, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    for e in keys[counts == 1]:
        defects.append(("boundary_edge", (int(e[0]), int(e[1]))))
    for e in keys[counts > 2]:
        defects.append(("nonmanifold_edge", (int(e[0]), int(e[1]))))
    is_closed = bool(np.all(counts == 2))

    # an edge shared by two faces must be traversed in opposite directions
    forward = directed[:, 0] < directed[:, 1]
    fwd_count = np.bincount(inverse, weights=forward, minlength=len(keys))
    bad_orient = (counts == 2) & (fwd_count != 1)
    for e in keys[bad_orient]:
        defects.append(("inconsistent_winding", (int(e[0]), int(e[1]))))
    is_oriented = not bool(bad_orient.any()) and not bool((counts > 2).any())

    used = np.zeros(V, dtype=bool)
    used[F.ravel()[(F.ravel() >= 0) & (F.ravel() < V)]] = True
    for vi in np.flatnonzero(~used):
        defects.append(("unreferenced_vertex", int(vi)))
    chi = int(V - len(keys) + len(F))
    if chi != 2:
        defects.append(("euler_characteristic", chi))
    expected = _EXPECTED_V.get(m.variant)
    if expected is not None and V != expected:
        defects.append(("vertex_count", V))
    return WatertightReport(is_closed, is_oriented, chi, defects)


# ---------------------------------------------------------------- OBJ

def export_obj(m: HandMesh, path) -> None:
    lines = [f"# hand mesh variant={m.variant} V={len(m.vertices)} F={len(m.faces)}"]
    lines += [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in m.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.faces]
    path = Path(path)
    write_text(path, "\n".join(lines) + "\n")


def import_obj(path) -> HandMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise ObjParseError(f"line {lineno}: vertex needs 3 coordinates")
                    verts.append([float(x) for x in rest[:3]])
                elif tag == "f":
                    if len(rest) != 3:
                        raise ObjParseError(f"line {lineno}: only triangular faces are supported, got {len(rest)} vertices")
                    idx = [int(tok.split("/")[0]) for tok in rest]
                    if any(i == 0 for i in idx):
                        raise ObjParseError(f"line {lineno}: OBJ indices are 1-based")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError as exc:
                if isinstance(exc, ObjParseError):
                    raise
                raise ObjParseError(f"line {lineno}: {exc}") from None
    if not verts or not faces:
        raise ObjParseError(f"{path}: no vertices or faces found")
    F = np.array(faces, dtype=np.int64)
    if F.max() >= len(verts) or F.min() < 0:
        raise ObjParseError(f"{path}: face index out of range")
    V = np.array(verts)
    variant = {PLAIN_VERTEX_COUNT: "plain", REFINED_VERTEX_COUNT: "refined"}.get(len(V), "custom")
    return HandMesh(V, F, variant, None)
