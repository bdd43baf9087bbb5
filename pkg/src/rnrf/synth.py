"""Procedural portrait scenes with an analytic ground-truth renderer.

The generated head is a blendshape rig over a deformed icosphere (sinusoidal
expression offsets along the radial direction plus a weighted jaw hinge), in
front of a striped ground plane and inside an emissive gradient dome. Frames
are rendered by direct ray-triangle / ray-sphere intersection with Lambertian
shading under one fixed directional light: no neural machinery anywhere, so
renders serve as an independent oracle for the learned pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .camera import Camera, gen_rays, pixel_grid, orbit_camera
from .errors import ParameterError
from .headmodel import BlendshapeModel, HeadParams, TriMesh, pose_mesh

_RAY_EPS = 1e-9


# ---------------------------------------------------------------------------
# geometry primitives


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        cache = {}
        new_verts = verts.tolist()

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(new_verts)
                new_verts.append(m.tolist())
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(new_verts)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
        faces = np.asarray(new_faces)
    return TriMesh(vertices=verts * radius, triangles=faces)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.triangles]
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(normals, mesh.triangles[:, k], face_n)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lens, 1e-30)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def make_head_model(num_exp: int = 10, subdivisions: int = 2, seed: int = 0) -> BlendshapeModel:
    """Blendshape rig on a squashed icosphere, bounding radius exactly 1.

    The face (jaw side) points toward -z; expression basis vectors are smooth
    sinusoidal offsets along the radial direction."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    sphere = icosphere(subdivisions)
    v = sphere.vertices * np.array([0.88, 1.0, 0.94])
    v /= np.linalg.norm(v, axis=1).max()
    radial = sphere.vertices  # unit directions

    basis = np.zeros((num_exp, v.shape[0], 3))
    for k in range(num_exp):
        freq = rng.uniform(1.2, 3.5)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.11)
        profile = np.sin(freq * (v @ direction) + phase)
        basis[k] = amp * profile[:, None] * radial

    # jaw region: lower-front vertices, hinged on an axis through the "ears"
    w = _smoothstep((-v[:, 1] - 0.02) / 0.38) * _smoothstep((-v[:, 2] - 0.05) / 0.30)
    return BlendshapeModel(
        template=TriMesh(vertices=v, triangles=sphere.triangles),
        exp_basis=basis,
        jaw_pivot=np.array([0.0, -0.05, 0.30]),
        jaw_axis=np.array([-1.0, 0.0, 0.0]),
        jaw_weights=np.clip(w, 0.0, 1.0),
    )


def head_albedo(canonical_vertices: np.ndarray) -> np.ndarray:
    """Smooth per-vertex albedo tied to the canonical surface."""
    v = canonical_vertices
    base = np.array([0.78, 0.60, 0.49])
    tint = np.stack(
        [
            0.10 * np.sin(2.2 * v[:, 0] + 0.7),
            0.08 * np.sin(1.9 * v[:, 1] + 2.1),
            0.07 * np.sin(2.6 * v[:, 2] + 4.0),
        ],
        axis=1,
    )
    return np.clip(base + tint, 0.05, 0.95)


# ---------------------------------------------------------------------------
# oracle scene description


@dataclass
class LambertMesh:
    mesh: TriMesh
    vertex_albedo: Optional[np.ndarray] = None  # (V, 3), barycentric-interpolated
    albedo_fn: Optional[Callable] = None  # evaluated at hit points instead
    smooth: bool = True  # interpolate vertex normals


@dataclass
class LambertSphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class EmissiveSphere:
    """Inward-facing dome with a vertical color gradient."""

    center: np.ndarray
    radius: float
    horizon: np.ndarray
    zenith: np.ndarray
    azimuth_tint: float = 0.0

    def emission(self, dirs: np.ndarray) -> np.ndarray:
        h = np.clip((dirs[:, 1] + 1.0) / 2.0, 0.0, 1.0)[:, None]
        col = (1.0 - h) * self.horizon + h * self.zenith
        if self.azimuth_tint:
            az = np.arctan2(dirs[:, 0], -dirs[:, 2])
            col = col + self.azimuth_tint * np.stack(
                [np.sin(az), np.sin(az + 2.0), np.sin(az + 4.0)], axis=1
            )
        return np.clip(col, 0.0, 1.0)


@dataclass
class OracleScene:
    meshes: list
    spheres: list = field(default_factory=list)
    light_dir: np.ndarray = field(default_factory=lambda: np.array([-0.38, 0.88, -0.28]))
    ambient: float = 0.35

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir /= np.linalg.norm(self.light_dir)


def ground_plane(y: float = -1.55, half: float = 9.0) -> TriMesh:
    v = np.array([[-half, y, -half], [half, y, -half], [half, y, half], [-half, y, half]])
    f = np.array([[0, 2, 1], [0, 3, 2]], dtype=np.int32)
    return TriMesh(vertices=v, triangles=f)


def plane_albedo(points: np.ndarray) -> np.ndarray:
    s = 0.5 * (1.0 + np.sin(0.75 * points[:, 0]) * np.sin(0.75 * points[:, 2]))
    c1 = np.array([0.25, 0.33, 0.42])
    c2 = np.array([0.55, 0.47, 0.35])
    return (1.0 - s)[:, None] * c1 + s[:, None] * c2


# ---------------------------------------------------------------------------
# analytic renderer


def _intersect_mesh(origins, dirs, mesh: TriMesh, t_best, chunk=512):
    """Nearest-hit Moller-Trumbore; updates t_best and returns hit info."""
    tri = mesh.vertices[mesh.triangles]
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    n_rays = origins.shape[0]
    hit_tri = np.full(n_rays, -1, dtype=np.int64)
    hit_uv = np.zeros((n_rays, 2))
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        o = origins[lo:hi, None, :]
        d = dirs[lo:hi, None, :]
        p = np.cross(d, e2[None, :, :])
        det = (e1[None] * p).sum(-1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - a[None]
        u = (s * p).sum(-1) * inv
        q = np.cross(s, e1[None, :, :])
        v = (d * q).sum(-1) * inv
        t = (e2[None] * q).sum(-1) * inv
        ok &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _RAY_EPS)
        t = np.where(ok, t, np.inf)
        best_tri = np.argmin(t, axis=1)
        rows = np.arange(hi - lo)
        best_t = t[rows, best_tri]
        closer = best_t < t_best[lo:hi]
        t_best[lo:hi] = np.where(closer, best_t, t_best[lo:hi])
        hit_tri[lo:hi] = np.where(closer, best_tri, -1)
        hit_uv[lo:hi, 0] = np.where(closer, u[rows, best_tri], 0.0)
        hit_uv[lo:hi, 1] = np.where(closer, v[rows, best_tri], 0.0)
    return hit_tri, hit_uv


def _intersect_sphere(origins, dirs, center, radius, t_best):
    oc = origins - center
    b = (oc * dirs).sum(1)
    c = (oc * oc).sum(1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _RAY_EPS, t0, np.where(t1 > _RAY_EPS, t1, np.inf))
    t = np.where(ok, t, np.inf)
    closer = t < t_best
    t_best[:] = np.where(closer, t, t_best)
    return closer


def render_oracle(scene: OracleScene, camera: Camera, width: int, height: int,
                  supersample: int = 1) -> np.ndarray:
    """(H, W, 3) float image in [0, 1]."""
    if supersample < 1:
        raise ParameterError("supersample factor must be >= 1")
    w, h = width * supersample, height * supersample
    coords = pixel_grid(w, h)
    if supersample > 1:
        # sample the fine grid so that the average sits at each coarse center
        coords = (coords - (supersample - 1) / 2.0) / supersample
    origins, dirs = gen_rays(camera, coords)
    n = coords.shape[0]
    img = np.zeros((n, 3))
    t_best = np.full(n, np.inf)
    records = []  # (kind, object, per-ray data) resolved after the depth race

    for m in scene.meshes:
        hit_tri, hit_uv = _intersect_mesh(origins, dirs, m.mesh, t_best)
        records.append(("mesh", m, hit_tri, hit_uv, t_best.copy()))
    for s in scene.spheres:
        closer = _intersect_sphere(origins, dirs, s.center, s.radius, t_best)
        records.append(("sphere", s, closer, None, t_best.copy()))

    # resolve: an object owns a ray iff its recorded depth survived to the end
    for kind, obj, a1, a2, t_snapshot in records:
        owns = np.isfinite(t_best) & (t_snapshot == t_best)
        if kind == "mesh":
            owns &= a1 >= 0
            if not owns.any():
                continue
            idx = np.nonzero(owns)[0]
            tri_ids = a1[idx]
            uv = a2[idx]
            tris = obj.mesh.triangles[tri_ids]
            bary = np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)
            pts = np.einsum("nc,ncr->nr", bary, obj.mesh.vertices[tris])
            if obj.smooth:
                vn = vertex_normals(obj.mesh)
                normals = np.einsum("nc,ncr->nr", bary, vn[tris])
                normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            else:
                tv = obj.mesh.vertices[tris]
                normals = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
                normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            if obj.albedo_fn is not None:
                albedo = obj.albedo_fn(pts)
            else:
                albedo = np.einsum("nc,ncr->nr", bary, obj.vertex_albedo[tris])
            lam = np.abs(normals @ scene.light_dir)
            shade = scene.ambient + (1.0 - scene.ambient) * lam
            img[idx] = np.clip(albedo * shade[:, None], 0.0, 1.0)
        else:
            owns &= a1
            if not owns.any():
                continue
            idx = np.nonzero(owns)[0]
            pts = origins[idx] + t_best[idx, None] * dirs[idx]
            if isinstance(obj, EmissiveSphere):
                rel = pts - obj.center
                rel /= np.linalg.norm(rel, axis=1, keepdims=True)
                img[idx] = obj.emission(rel)
            else:
                normals = (pts - obj.center) / obj.radius
                lam = np.abs(normals @ scene.light_dir)
                shade = scene.ambient + (1.0 - scene.ambient) * lam
                img[idx] = np.clip(obj.albedo * shade[:, None], 0.0, 1.0)

    img = img.reshape(h, w, 3)
    if supersample > 1:
        img = img.reshape(height, supersample, width, supersample, 3).mean(axis=(1, 3))
    return img


# ---------------------------------------------------------------------------
# frame trajectories


@dataclass(frozen=True)
class SynthSpec:
    n_frames: int = 150
    width: int = 64
    height: int = 64
    num_exp: int = 10
    seed: int = 7
    subdivisions: int = 2
    orbit_radius: float = 3.2
    supersample: int = 2
    exp_amplitude: float = 0.55
    focal: float = 70.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ParameterError("need at least two frames")
        if self.width < 8 or self.height < 8:
            raise ParameterError("resolution too small")


def make_camera(spec: SynthSpec, azimuth_deg, elevation_deg) -> Camera:
    return orbit_camera(
        azimuth_deg, elevation_deg, spec.orbit_radius,
        fx=spec.focal * spec.width / 64.0, fy=spec.focal * spec.height / 64.0,
        cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
        near=0.8, far=9.0,
    )


def frame_trajectory(spec: SynthSpec, rng: np.random.Generator):
    """Cameras and head parameters for every frame: first half orbits a still
    head, second half holds the camera at head level while the head moves."""
    periods = rng.uniform(18, 45, size=spec.num_exp)
    phases = rng.uniform(0, 2 * np.pi, size=spec.num_exp)
    half = spec.n_frames // 2
    frames = []
    for i in range(spec.n_frames):
        if i < half:
            frac = i / max(half - 1, 1)
            cam = make_camera(spec, -50.0 + 100.0 * frac, 8.0 + 7.0 * np.sin(2 * np.pi * i / 36.0))
            params = HeadParams.zeros(spec.num_exp)
        else:
            j = i - half
            cam = make_camera(spec, 0.0, 8.0)
            beta = spec.exp_amplitude * np.sin(2 * np.pi * j / periods + phases)
            rot = np.array(
                [
                    0.20 * np.sin(2 * np.pi * j / 57.0 + 0.9),
                    0.45 * np.sin(2 * np.pi * j / 40.0),
                    0.08 * np.sin(2 * np.pi * j / 23.0 + 2.2),
                ]
            )
            trans = np.array(
                [
                    0.05 * np.sin(2 * np.pi * j / 31.0),
                    0.04 * np.sin(2 * np.pi * j / 43.0 + 1.0),
                    0.05 * np.sin(2 * np.pi * j / 37.0 + 2.0),
                ]
            )
            jaw = 0.22 * (1.0 + np.sin(2 * np.pi * j / 22.0 - np.pi / 2))
            params = HeadParams(beta_exp=beta, rotation=rot, translation=trans, jaw=jaw)
        frames.append((cam, params))
    return frames


def build_scene(model: BlendshapeModel, params: HeadParams) -> OracleScene:
    posed = pose_mesh(model, params)
    plane = ground_plane()
    head = LambertMesh(mesh=posed, vertex_albedo=head_albedo(model.template.vertices))
    ground = LambertMesh(mesh=plane, albedo_fn=plane_albedo, smooth=False)
    dome = EmissiveSphere(
        center=np.zeros(3), radius=5.0,
        horizon=np.array([0.36, 0.32, 0.38]), zenith=np.array([0.09, 0.12, 0.22]),
        azimuth_tint=0.05,
    )
    return OracleScene(meshes=[head, ground], spheres=[dome])


def render_frame(model: BlendshapeModel, params: HeadParams, camera: Camera,
                 spec: SynthSpec) -> np.ndarray:
    scene = build_scene(model, params)
    return render_oracle(scene, camera, spec.width, spec.height, supersample=spec.supersample)
