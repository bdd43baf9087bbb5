"""Parametric head geometry.

A head is a template mesh plus a linear expression basis and a weighted jaw
hinge. Posing order: expression offsets, then the jaw rotation (per-vertex
angle scaled by the jaw weight), then the global rigid transform. Closest
point queries run through an exact BVH; a mask rasterizer projects the posed
head into a camera for face-region metrics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import Camera, gen_rays, pixel_grid
from .errors import LoadError, MeshError, ParameterError

MODEL_MAGIC = b"RNRF"
MODEL_VERSION = 1
_MIN_TRI_AREA = 1e-12


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class HeadParams:
    """Expression coefficients plus head pose (rotation, translation, jaw)."""

    beta_exp: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle, radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta_exp", np.asarray(self.beta_exp, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "jaw", float(self.jaw))
        if not (np.isfinite(self.beta_exp).all() and np.isfinite(self.rotation).all()
                and np.isfinite(self.translation).all() and np.isfinite(self.jaw)):
            raise ParameterError("head parameters must be finite")
        if not 0.0 <= self.jaw <= np.pi / 2:
            raise ParameterError(f"jaw angle {self.jaw} outside [0, pi/2]")

    @classmethod
    def zeros(cls, num_exp: int) -> "HeadParams":
        return cls(beta_exp=np.zeros(num_exp))

    @property
    def pose7(self) -> np.ndarray:
        """Pose as the 7-vector (axis-angle, translation, jaw)."""
        return np.concatenate([self.rotation, self.translation, [self.jaw]])

    def is_identity(self) -> bool:
        return (not self.beta_exp.any()) and (not self.rotation.any()) \
            and (not self.translation.any()) and self.jaw == 0.0

    def to_dict(self) -> dict:
        return {
            "beta_exp": self.beta_exp.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "jaw": self.jaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadParams":
        return cls(
            beta_exp=np.asarray(d["beta_exp"], dtype=np.float64),
            rotation=np.asarray(d.get("rotation", (0, 0, 0)), dtype=np.float64),
            translation=np.asarray(d.get("translation", (0, 0, 0)), dtype=np.float64),
            jaw=float(d.get("jaw", 0.0)),
        )


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int32))

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {self.triangles.shape}")
        if self.num_triangles == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min(initial=0) < 0 or self.triangles.max(initial=-1) >= self.num_vertices:
            raise MeshError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise MeshError("mesh vertices must be finite")
        areas = triangle_areas(self.vertices, self.triangles)
        bad = np.nonzero(areas <= _MIN_TRI_AREA)[0]
        if bad.size:
            raise MeshError(f"degenerate triangle(s) with area <= {_MIN_TRI_AREA}: ids {bad[:8].tolist()}")

    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    tri = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass(frozen=True)
class BlendshapeModel:
    template: TriMesh
    exp_basis: np.ndarray  # (E, V, 3)
    jaw_pivot: np.ndarray  # (3,)
    jaw_axis: np.ndarray  # unit (3,)
    jaw_weights: np.ndarray  # (V,) in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "exp_basis", np.ascontiguousarray(self.exp_basis, dtype=np.float64))
        object.__setattr__(self, "jaw_pivot", np.asarray(self.jaw_pivot, dtype=np.float64).reshape(3))
        object.__setattr__(self, "jaw_axis", np.asarray(self.jaw_axis, dtype=np.float64).reshape(3))
        object.__setattr__(self, "jaw_weights", np.asarray(self.jaw_weights, dtype=np.float64).reshape(-1))
        if self.exp_basis.ndim != 3 or self.exp_basis.shape[1:] != (self.template.num_vertices, 3):
            raise ParameterError(f"exp_basis must be (E, {self.template.num_vertices}, 3), got {self.exp_basis.shape}")
        if abs(np.linalg.norm(self.jaw_axis) - 1.0) > 1e-9:
            raise ParameterError("jaw_axis must have unit norm")
        if self.jaw_weights.shape[0] != self.template.num_vertices:
            raise ParameterError("jaw_weights must have one entry per vertex")
        if self.jaw_weights.min() < 0.0 or self.jaw_weights.max() > 1.0:
            raise ParameterError("jaw_weights must lie in [0, 1]")

    @property
    def num_exp(self) -> int:
        return self.exp_basis.shape[0]


@dataclass(frozen=True)
class ClosestPointResult:
    point: np.ndarray
    distance: float
    triangle_id: int
    barycentrics: np.ndarray


# ---------------------------------------------------------------------------
# posing


def axis_angle_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation; the vector's norm is the angle."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta == 0.0:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def pose_mesh(model: BlendshapeModel, params: HeadParams) -> TriMesh:
    """Apply expression offsets, jaw hinge, and the global rigid transform."""
    if params.beta_exp.shape[0] != model.num_exp:
        raise ParameterError(
            f"expression dimension mismatch: params carry {params.beta_exp.shape[0]}, model expects {model.num_exp}"
        )
    v = model.template.vertices
    if params.beta_exp.any():
        v = v + np.einsum("e,evk->vk", params.beta_exp, model.exp_basis)
    else:
        v = v.copy()
    if params.jaw != 0.0:
        v = _rotate_about_pivot(v, model.jaw_pivot, model.jaw_axis, params.jaw * model.jaw_weights)
    if params.rotation.any():
        v = v @ axis_angle_matrix(params.rotation).T
    if params.translation.any():
        v = v + params.translation
    return TriMesh(vertices=v, triangles=model.template.triangles)


def _rotate_about_pivot(v, pivot, axis, angles):
    p = v - pivot
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    cross = np.cross(np.broadcast_to(axis, p.shape), p)
    dot = (p @ axis)[:, None]
    out = pivot + (p * c + cross * s + axis * dot * (1.0 - c))
    still = angles == 0.0
    out[still] = v[still]  # avoid pivot round-trip residue on unweighted vertices
    return out


# ---------------------------------------------------------------------------
# BVH accel + closest point


class MeshAccel:
    """Bounding-volume hierarchy over a triangle mesh for exact closest-point
    queries. Immutable once built; queries are thread-safe."""

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        mesh.validate()
        self.mesh = mesh
        corners = mesh.corners()
        self.tri_verts = np.ascontiguousarray(corners.reshape(-1), dtype=np.float64)
        n_tri = mesh.num_triangles
        tri_min = corners.min(axis=1)
        tri_max = corners.max(axis=1)
        centroids = corners.mean(axis=1)

        boxes, left, right, start, count, order = _build_bvh(tri_min, tri_max, centroids, leaf_size)
        self.boxes = boxes
        self.node_left = left
        self.node_right = right
        self.node_start = start
        self.node_count = count
        self.tri_order = order
        self.num_nodes = boxes.shape[0]
        self.num_leaves = int((count > 0).sum())
        self.num_triangles = n_tri

    def query_batch(self, points: np.ndarray):
        """Closest surface points for (N, 3) queries.

        Returns (points_on_mesh (N,3), distances (N,), triangle_ids (N,),
        barycentrics (N,3)).
        """
        q = np.ascontiguousarray(points, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ParameterError(f"queries must be (N, 3), got {q.shape}")
        if not np.isfinite(q).all():
            raise ParameterError("closest-point query contains non-finite coordinates")
        n = q.shape[0]
        out_point = np.empty((n, 3))
        out_bary = np.empty((n, 3))
        out_tri = np.empty(n, dtype=np.int64)
        out_dist = np.empty(n)
        _kernels.bvh_query_batch(
            self.boxes, self.node_left, self.node_right, self.node_start,
            self.node_count, self.tri_order, self.tri_verts,
            q, out_point, out_bary, out_tri, out_dist,
        )
        return out_point, out_dist, out_tri, out_bary


def build_accel(mesh: TriMesh, leaf_size: int = 4) -> MeshAccel:
    return MeshAccel(mesh, leaf_size=leaf_size)


def closest_point(accel: MeshAccel, x: np.ndarray) -> ClosestPointResult:
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    pts, dists, tris, bary = accel.query_batch(x)
    return ClosestPointResult(
        point=pts[0], distance=float(dists[0]), triangle_id=int(tris[0]), barycentrics=bary[0]
    )


def _build_bvh(tri_min, tri_max, centroids, leaf_size):
    """Median-split BVH in preorder layout: boxes (N,6) as [min|max],
    child indices for internal nodes, tri_order range for leaves."""
    n = tri_min.shape[0]
    order = np.arange(n, dtype=np.int64)
    boxes, left, right, start, count = [], [], [], [], []

    def build(lo, hi):
        node = len(boxes)
        idx = order[lo:hi]
        boxes.append(np.concatenate([tri_min[idx].min(axis=0), tri_max[idx].max(axis=0)]))
        left.append(-1)
        right.append(-1)
        if hi - lo <= leaf_size:
            start.append(lo)
            count.append(hi - lo)
        else:
            start.append(0)
            count.append(0)
            cent = centroids[idx]
            axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
            mid = (hi - lo) // 2
            order[lo:hi] = idx[np.argsort(cent[:, axis], kind="stable")]
            left[node] = build(lo, lo + mid)
            right[node] = build(lo + mid, hi)
        return node

    build(0, n)
    return (
        np.ascontiguousarray(np.stack(boxes), dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(start, dtype=np.int64),
        np.asarray(count, dtype=np.int64),
        order,
    )


class StackedAccels:
    """Several accels packed into shared flat arrays so one kernel call can
    answer queries routed to different meshes (one mesh per training frame)."""

    def __init__(self, accels):
        if not accels:
            raise ParameterError("need at least one accel to stack")
        self.accels = list(accels)
        node_off, tri_id_off = [], []
        n_nodes = 0
        n_tris = 0
        parts_order = []
        for a in self.accels:
            node_off.append(n_nodes)
            tri_id_off.append(n_tris)
            parts_order.append(a.tri_order + n_tris)
            n_nodes += a.num_nodes
            n_tris += a.num_triangles
        self.boxes = np.concatenate([a.boxes for a in self.accels])
        self.node_left = np.concatenate(
            [np.where(a.node_left >= 0, a.node_left + off, -1) for a, off in zip(self.accels, node_off)]
        )
        self.node_right = np.concatenate(
            [np.where(a.node_right >= 0, a.node_right + off, -1) for a, off in zip(self.accels, node_off)]
        )
        self.node_start = np.concatenate(
            [a.node_start + toff for a, toff in zip(self.accels, tri_id_off)]
        )
        self.node_count = np.concatenate([a.node_count for a in self.accels])
        self.tri_order = np.concatenate(parts_order)
        self.tri_verts = np.concatenate([a.tri_verts for a in self.accels])
        self.node_offset = np.asarray(node_off, dtype=np.int64)
        self.tri_id_offset = np.asarray(tri_id_off, dtype=np.int64)

    def query_batch(self, points: np.ndarray, accel_ids: np.ndarray):
        q = np.ascontiguousarray(points, dtype=np.float64)
        ids = np.ascontiguousarray(accel_ids, dtype=np.int64)
        n = q.shape[0]
        out_point = np.empty((n, 3))
        out_bary = np.empty((n, 3))
        out_tri = np.empty(n, dtype=np.int64)
        out_dist = np.empty(n)
        _kernels.bvh_query_stacked(
            self.boxes, self.node_left, self.node_right, self.node_start,
            self.node_count, self.tri_order, self.tri_verts,
            self.node_offset, self.tri_id_offset,
            ids, q, out_point, out_bary, out_tri, out_dist,
        )
        return out_point, out_dist, out_tri, out_bary


# ---------------------------------------------------------------------------
# face-region mask


def face_mask(mesh: TriMesh, camera: Camera, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) image: True where the mesh covers the pixel."""
    if width <= 0 or height <= 0:
        raise ParameterError("mask dimensions must be positive")
    coords = pixel_grid(width, height)
    origins, dirs = gen_rays(camera, coords)
    tri_verts = np.ascontiguousarray(mesh.corners().reshape(-1), dtype=np.float64)
    hits = np.empty(coords.shape[0], dtype=np.bool_)
    _kernels.rays_hit_mesh(origins, dirs, tri_verts, 1e-9, hits)
    return hits.reshape(height, width)


# ---------------------------------------------------------------------------
# file formats


def save_model(model: BlendshapeModel, path):
    """Versioned binary container; see README for the exact layout."""
    t = model.template
    e, vv, tt = model.num_exp, t.num_vertices, t.num_triangles
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<III", MODEL_VERSION, e, vv))
        f.write(struct.pack("<I", tt))
        f.write(t.vertices.astype("<f4").tobytes())
        f.write(model.exp_basis.astype("<f4").tobytes())
        f.write(model.jaw_pivot.astype("<f4").tobytes())
        f.write(model.jaw_axis.astype("<f4").tobytes())
        f.write(model.jaw_weights.astype("<f4").tobytes())
        f.write(t.triangles.astype("<u4").tobytes())


def load_model(path) -> BlendshapeModel:
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != MODEL_MAGIC:
                raise LoadError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
            version, e, vv = struct.unpack("<III", f.read(12))
            if version != MODEL_VERSION:
                raise LoadError(f"{path}: unsupported model version {version}")
            (tt,) = struct.unpack("<I", f.read(4))
            template_v = _read_f32(f, vv * 3, path).reshape(vv, 3)
            basis = _read_f32(f, e * vv * 3, path).reshape(e, vv, 3)
            pivot = _read_f32(f, 3, path)
            axis = _read_f32(f, 3, path)
            weights = _read_f32(f, vv, path)
            tris = np.frombuffer(f.read(tt * 3 * 4), dtype="<u4")
            if tris.size != tt * 3:
                raise LoadError(f"{path}: truncated triangle table")
    except OSError as exc:
        raise LoadError(f"cannot read model file {path}: {exc}") from exc
    axis = axis.astype(np.float64)
    norm = np.linalg.norm(axis)
    if norm > 0:
        axis = axis / norm  # re-unitize after f32 quantization
    mesh = TriMesh(vertices=template_v, triangles=tris.astype(np.int32).reshape(tt, 3))
    mesh.validate()
    return BlendshapeModel(
        template=mesh,
        exp_basis=basis,
        jaw_pivot=pivot,
        jaw_axis=axis,
        jaw_weights=np.clip(weights, 0.0, 1.0),
    )


def _read_f32(f, n, path):
    data = np.frombuffer(f.read(n * 4), dtype="<f4")
    if data.size != n:
        raise LoadError(f"{path}: truncated float block (wanted {n} values, got {data.size})")
    return data.astype(np.float64)


def load_obj(path) -> TriMesh:
    """Minimal OBJ import: v and triangular f records only."""
    verts, tris = [], []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise LoadError(f"{path}:{lineno}: vertex needs 3 coordinates")
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif parts[0] == "f":
                    if len(parts) != 4:
                        raise LoadError(f"{path}:{lineno}: only triangular faces are supported")
                    tris.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    except OSError as exc:
        raise LoadError(f"cannot read OBJ {path}: {exc}") from exc
    except ValueError as exc:
        raise LoadError(f"cannot parse OBJ {path}: {exc}") from exc
    if not tris:
        raise LoadError(f"{path}: no faces found")
    mesh = TriMesh(vertices=np.asarray(verts), triangles=np.asarray(tris, dtype=np.int32))
    mesh.validate()
    return mesh


def save_obj(mesh: TriMesh, path):
    with open(path, "w", encoding="utf-8") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
