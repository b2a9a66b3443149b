"""Spherical-harmonics Lambertian shading, rigid pose and perspective camera.

Conventions: X_cam = R X + t with R = Rz(roll) Ry(yaw) Rx(pitch); points in
front of the camera have Z > 0; image v grows downward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# real SH normalization constants, bands 0-2
_C0 = 0.5 * np.sqrt(1.0 / np.pi)
_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_C2 = 0.5 * np.sqrt(15.0 / np.pi)
_C20 = 0.25 * np.sqrt(5.0 / np.pi)
_C22 = 0.25 * np.sqrt(15.0 / np.pi)

Z_EPS = 1e-3  # mm; vertices at or behind this depth are excluded
DEFAULT_FOCAL = 1015.0


def sh_basis(normals, check: bool = True) -> np.ndarray:
    """Real SH basis values, ordered Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.

    Accepts a single 3-vector or an (..., 3) array of unit normals.
    """
    n = np.asarray(normals, dtype=np.float64)
    if check:
        norms = np.linalg.norm(n, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("sh_basis expects unit normals")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2 * x * y,
        _C2 * y * z,
        _C20 * (3.0 * z * z - 1.0),
        _C2 * x * z,
        _C22 * (x * x - y * y),
    ], axis=-1)


def sh_basis_jacobian(normals) -> np.ndarray:
    """d sh_basis / d normal, shape (..., 9, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    c1 = np.full_like(x, _C1)
    rows = [
        (zero, zero, zero),
        (zero, c1, zero),
        (zero, zero, c1),
        (c1, zero, zero),
        (_C2 * y, _C2 * x, zero),
        (zero, _C2 * z, _C2 * y),
        (zero, zero, 6.0 * _C20 * z),
        (_C2 * z, zero, _C2 * x),
        (2.0 * _C22 * x, -2.0 * _C22 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


@dataclass(frozen=True)
class SHLighting:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64).ravel()
        if g.size != 9 or not np.all(np.isfinite(g)):
            raise ValueError("SH lighting needs exactly 9 finite coefficients")
        object.__setattr__(self, "gamma", g)


def irradiance(normals, gamma) -> np.ndarray:
    return sh_basis(normals, check=False) @ np.asarray(gamma, dtype=np.float64)


def shade_vertex(albedo, normals, gamma):
    """Lambertian SH shading. Returns (clamped color, unclamped color)."""
    if isinstance(gamma, SHLighting):
        gamma = gamma.gamma
    albedo = np.asarray(albedo, dtype=np.float64)
    irr = irradiance(normals, gamma)
    raw = albedo * np.asarray(irr)[..., None]
    return np.clip(raw, 0.0, 1.0), raw


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 224, height: int = 224, focal: float | None = None) -> "Camera":
        if focal is None:
            focal = DEFAULT_FOCAL * width / 224.0
        return cls(float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def to_json(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def rotation_matrix(angles) -> np.ndarray:
    pitch, yaw, roll = angles
    return _rz(roll) @ _ry(yaw) @ _rx(pitch)


def rotation_derivatives(angles) -> np.ndarray:
    """(3, 3, 3) stack of dR/dpitch, dR/dyaw, dR/droll."""
    pitch, yaw, roll = angles
    return np.stack([
        _rz(roll) @ _ry(yaw) @ _drx(pitch),
        _rz(roll) @ _dry(yaw) @ _rx(pitch),
        _drz(roll) @ _ry(yaw) @ _rx(pitch),
    ])


@dataclass(frozen=True)
class Pose:
    angles: np.ndarray       # pitch, yaw, roll (rad)
    translation: np.ndarray  # mm

    @classmethod
    def from_vector(cls, p) -> "Pose":
        p = np.asarray(p, dtype=np.float64)
        return cls(p[:3].copy(), p[3:6].copy())

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.angles)


def pose_transform(positions, pose) -> np.ndarray:
    if not isinstance(pose, Pose):
        pose = Pose.from_vector(pose)
    return np.asarray(positions, dtype=np.float64) @ pose.rotation.T + pose.translation


def project_perspective(cam_points, cam: Camera):
    """Pixel coordinates (N, 2), depths (N,), and a behind-camera flag (N,)."""
    P = np.asarray(cam_points, dtype=np.float64)
    Z = P[:, 2]
    behind = Z <= Z_EPS
    # behind-camera points still get (mirrored) coordinates; callers use the flag
    Zs = np.where(np.abs(Z) < 1e-12, 1e-12, Z)
    uv = np.empty((P.shape[0], 2))
    uv[:, 0] = cam.focal * P[:, 0] / Zs + cam.cx
    uv[:, 1] = cam.cy - cam.focal * P[:, 1] / Zs
    return uv, Z.copy(), behind


def project_backward(cam_points, cam: Camera, grad_uv, grad_depth=None) -> np.ndarray:
    """Vector-Jacobian product of the projection w.r.t. camera-space points."""
    X, Y, Z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
    Zs = np.where(Z <= Z_EPS, 1.0, Z)
    f = cam.focal
    gu = grad_uv[:, 0]
    gv = grad_uv[:, 1]
    g = np.zeros_like(cam_points)
    g[:, 0] = gu * f / Zs
    g[:, 1] = -gv * f / Zs
    g[:, 2] = -gu * f * X / Zs ** 2 + gv * f * Y / Zs ** 2
    if grad_depth is not None:
        g[:, 2] += grad_depth
    g[Z <= Z_EPS] = 0.0
    return g
