"""Core geometric types and pinhole camera math.

Conventions used throughout the package:
  - world frame: right-handed, +z up, units in meters
  - camera frame: x right, y down, z forward (optical axis)
  - pixel mapping: u = f*x/z + cx, v = f*y/z + cy
  - pose maps world to camera: x_cam = R @ x_world + t
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-9
RAY_EPS = 1e-7  # minimum ray parameter; avoids re-hitting the origin surface


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    return v


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.t)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def transform(self, X) -> np.ndarray:
        """Apply pose to world points, shape (3,) or (N, 3)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return self.R @ X + self.t
        return X @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: x -> self(other(x))."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics, pixels."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus world-to-camera pose."""

    f: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose

    def __post_init__(self):
        Intrinsics(self.f, self.cx, self.cy, self.width, self.height)

    @staticmethod
    def from_intrinsics(intr: Intrinsics, pose: Pose) -> "Camera":
        return Camera(intr.f, intr.cx, intr.cy, intr.width, intr.height, pose)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.f, self.cx, self.cy, self.width, self.height)

    def center(self) -> np.ndarray:
        return self.pose.center()

    def optical_axis(self) -> np.ndarray:
        """Viewing direction (+z of the camera frame) in world coordinates."""
        return self.pose.R.T @ np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction."""

    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        origin = _as_vec3(self.origin)
        d = _as_vec3(self.dir)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dir", d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.dir


@dataclass(frozen=True)
class Triangle:
    """Mesh triangle carrying its semantic payload."""

    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    label: int
    polygon_id: str
    walkable: bool

    def __post_init__(self):
        v0, v1, v2 = _as_vec3(self.v0), _as_vec3(self.v1), _as_vec3(self.v2)
        area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0))
        if area <= 1e-12:
            raise ValueError("degenerate triangle")
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)

    def normal(self) -> np.ndarray:
        n = np.cross(self.v1 - self.v0, self.v2 - self.v0)
        return n / np.linalg.norm(n)

    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v1 - self.v0, self.v2 - self.v0)))


@dataclass(frozen=True)
class Hit:
    """Ray-mesh intersection record."""

    t: float
    point: np.ndarray = field(repr=False)
    tri_index: int
    label: int
    normal: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError("hit parameter must be positive")
        object.__setattr__(self, "point", _as_vec3(self.point))
        object.__setattr__(self, "normal", _as_vec3(self.normal))


def project(camera: Camera, X) -> tuple[float, float] | None:
    """Project a world point; returns (u, v) or None when behind the camera."""
    xc = camera.pose.transform(_as_vec3(X))
    if xc[2] <= 0:
        return None
    u = camera.f * xc[0] / xc[2] + camera.cx
    v = camera.f * xc[1] / xc[2] + camera.cy
    return (float(u), float(v))


def project_many(camera: Camera, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points.

    Returns (uv, in_front) where uv is (N, 2) with NaN for points at or
    behind the camera plane and in_front is a boolean mask.
    """
    Xc = camera.pose.transform(np.asarray(X, dtype=np.float64))
    z = Xc[:, 2]
    ok = z > 0
    uv = np.full((Xc.shape[0], 2), np.nan)
    uv[ok, 0] = camera.f * Xc[ok, 0] / z[ok] + camera.cx
    uv[ok, 1] = camera.f * Xc[ok, 1] / z[ok] + camera.cy
    return uv, ok


def cast_ray(camera: Camera, pixel) -> Ray:
    """World-frame viewing ray through a (possibly fractional) pixel."""
    u, v = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(u - camera.cx) / camera.f, (v - camera.cy) / camera.f, 1.0])
    d_world = camera.pose.R.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(camera.center(), d_world)


def pixel_rays(camera: Camera) -> np.ndarray:
    """Unit world-frame directions through every integer pixel, shape (H, W, 3)."""
    us = np.arange(camera.width, dtype=np.float64)
    vs = np.arange(camera.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    d = np.stack(
        [(uu - camera.cx) / camera.f, (vv - camera.cy) / camera.f, np.ones_like(uu)],
        axis=-1,
    )
    d = d @ camera.pose.R  # rows are R^T @ d
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d


def intersect_triangle(ray: Ray, tri: Triangle, tri_index: int = 0) -> Hit | None:
    """Moller-Trumbore ray/triangle test; hits require t > RAY_EPS."""
    e1 = tri.v1 - tri.v0
    e2 = tri.v2 - tri.v0
    p = np.cross(ray.dir, e2)
    det = float(e1 @ p)
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    tvec = ray.origin - tri.v0
    u = float(tvec @ p) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(tvec, e1)
    v = float(ray.dir @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ q) * inv
    if t <= RAY_EPS:
        return None
    return Hit(t, ray.point_at(t), tri_index, tri.label, tri.normal())


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    w = _as_vec3(w)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K  # first-order term is exact enough at this scale
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    v = _as_vec3(v)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    c = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
