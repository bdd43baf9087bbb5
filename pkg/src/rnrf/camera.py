"""Pinhole cameras and ray generation.

Convention: camera x points right, y points down, z points forward (so a
pixel's camera-space ray is ((u - cx)/fx, (v - cy)/fy, 1)). ``rotation`` and
``origin`` give the world-from-camera rigid transform. Integer pixel
coordinates address pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("camera focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError(f"camera needs 0 < near < far, got near={self.near} far={self.far}")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def scaled(self, s: float) -> "Camera":
        """The same view in a scene rescaled by s about the world origin."""
        return replace(self, origin=self.origin * s, near=self.near * s, far=self.far * s)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.reshape(-1).tolist(),
            "origin": self.origin.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            origin=np.asarray(d["origin"], dtype=np.float64),
            near=float(d["near"]), far=float(d["far"]),
        )


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) pixel-center coordinates in row-major order."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


def gen_rays(camera: Camera, coords: np.ndarray):
    """Rays through the given pixel coordinates.

    coords is (N, 2) with columns (u, v). Returns (origins, directions) with
    unit directions; every origin is the camera center.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ParameterError(f"pixel coords must be (N, 2), got {coords.shape}")
    d_cam = np.empty((coords.shape[0], 3))
    d_cam[:, 0] = (coords[:, 0] - camera.cx) / camera.fx
    d_cam[:, 1] = (coords[:, 1] - camera.cy) / camera.fy
    d_cam[:, 2] = 1.0
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    return origins, d_world


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ParameterError("look-at target coincides with the eye position")
    z = fwd / n
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ParameterError("look-at direction is parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    target=(0.0, 0.0, 0.0),
    fx: float = 70.0,
    fy: float = 70.0,
    cx: float = 31.5,
    cy: float = 31.5,
    near: float = 0.1,
    far: float = 12.0,
) -> Camera:
    """Camera on a sphere around target; azimuth 0 looks along -z toward it."""
    if radius <= 0:
        raise ParameterError("orbit radius must be positive")
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(np.clip(elevation_deg, -85.0, 85.0))
    target = np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array(
        [np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)]
    )
    rot = look_at_rotation(eye, target)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot, origin=eye, near=near, far=far)
