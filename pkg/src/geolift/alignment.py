"""Point-cloud registration: closed-form 2D similarity, then rigid ICP.

The global stage recovers scale/rotation/translation in the map plane
from user-picked correspondences; the refinement stage is point-to-point
ICP against the lifted mesh with a closed-form SVD update per iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gismap import LabeledMesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Similarity2D:
    """p -> s * R(theta) @ p + t"""

    s: float
    theta: float
    t: np.ndarray

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return self.s * (p @ self.rotation().T) + self.t


@dataclass(frozen=True)
class RigidTransform3D:
    """p -> R @ p + t"""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform3D":
        return RigidTransform3D(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def inverse(self) -> "RigidTransform3D":
        return RigidTransform3D(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform3D") -> "RigidTransform3D":
        """self after other."""
        return RigidTransform3D(self.R @ other.R, self.R @ other.t + self.t)


def procrustes2d(src: np.ndarray, dst: np.ndarray) -> tuple[Similarity2D, float]:
    """Least-squares similarity mapping paired src points onto dst.

    Minimizes sum ||s * R(theta) @ src_i + t - dst_i||^2 in closed form.
    Returns the transform and the residual RMS.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst must be paired")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    sm = src.mean(axis=0)
    dm = dst.mean(axis=0)
    sc = src - sm
    dc = dst - dm
    var_src = float(np.mean(np.sum(sc**2, axis=1)))
    if var_src < 1e-18:
        raise ValueError("degenerate input: all src points coincident")
    C = (dc.T @ sc) / len(src)
    U, sigma, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    S = np.array([1.0, d])
    R = U @ np.diag(S) @ Vt
    scale = float(np.sum(sigma * S)) / var_src
    theta = float(np.arctan2(R[1, 0], R[0, 0]))
    t = dm - scale * (R @ sm)
    sim = Similarity2D(scale, theta, t)
    rms = float(np.sqrt(np.mean(np.sum((sim.apply(src) - dst) ** 2, axis=1))))
    return sim, rms


def _closest_on_triangles(p: np.ndarray, a, b, c) -> np.ndarray:
    """Closest point to p on each triangle (a, b, c); arrays (T, 3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_int = vb / denom
        w_int = vc / denom

    out = a + ab * np.nan_to_num(v_int)[:, None] + ac * np.nan_to_num(w_int)[:, None]
    taken = np.zeros(len(a), dtype=bool)

    def assign(mask, value):
        nonlocal out, taken
        use = mask & ~taken
        out = np.where(use[:, None], value, out)
        taken |= use

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * np.nan_to_num(t_ab)[:, None])
    assign((d6 >= 0) & (d5 <= d6), c)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * np.nan_to_num(t_ac)[:, None])
    assign(
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
        b + (c - b) * np.nan_to_num(t_bc)[:, None],
    )
    return out


def closest_point_on_mesh(p, mesh: LabeledMesh) -> tuple[np.ndarray, float, int]:
    """Globally nearest point on the mesh surface to p.

    Returns (point, distance, triangle index).
    """
    if mesh.num_triangles() == 0:
        raise ValueError("empty mesh")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    a, b, c = mesh.corners()
    cand = _closest_on_triangles(p, a, b, c)
    d2 = np.sum((cand - p) ** 2, axis=1)
    i = int(np.argmin(d2))
    return cand[i], float(np.sqrt(d2[i])), i


def closest_points_on_mesh(points: np.ndarray, mesh: LabeledMesh) -> tuple[np.ndarray, np.ndarray]:
    """Batch nearest surface points; returns (points (N, 3), distances (N,))."""
    if mesh.num_triangles() == 0:
        raise ValueError("empty mesh")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = mesh.corners()
    out = np.empty_like(pts)
    dist = np.empty(len(pts))
    for k in range(len(pts)):
        cand = _closest_on_triangles(pts[k], a, b, c)
        d2 = np.sum((cand - pts[k]) ** 2, axis=1)
        i = int(np.argmin(d2))
        out[k] = cand[i]
        dist[k] = np.sqrt(d2[i])
    return out, dist


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[RigidTransform3D | None, float]:
    """Rigid least-squares src -> dst; returns (transform, smallest singular value)."""
    sm = src.mean(axis=0)
    dm = dst.mean(axis=0)
    H = (src - sm).T @ (dst - dm)
    U, sigma, Vt = np.linalg.svd(H)
    if sigma[2] <= 1e-12 * max(sigma[0], 1e-300):
        return None, float(sigma[2])
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = dm - R @ sm
    return RigidTransform3D(R, t), float(sigma[2])


def icp_refine(
    cloud: np.ndarray,
    mesh: LabeledMesh,
    init: RigidTransform3D,
    max_iters: int = 50,
    tol: float = 1e-6,
    trim_fraction: float = 0.0,
) -> tuple[RigidTransform3D, list[float]]:
    """Point-to-point ICP of a cloud onto the mesh surface.

    Each iteration pairs transformed points with their nearest surface
    points and re-solves the rigid transform in closed form from the
    original cloud. The returned history holds the RMS point-to-mesh
    distance after the initial guess and after every accepted update;
    with trim_fraction == 0 it is monotone non-increasing.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) < 3:
        raise ValueError("need at least 3 cloud points")
    if not (0.0 <= trim_fraction < 1.0):
        raise ValueError("trim_fraction must be in [0, 1)")

    T = init
    targets, dist = closest_points_on_mesh(T.apply(cloud), mesh)
    history = [float(np.sqrt(np.mean(dist**2)))]
    for _ in range(max_iters):
        if trim_fraction > 0.0:
            keep_n = max(3, int(np.ceil((1.0 - trim_fraction) * len(cloud))))
            keep = np.argsort(dist, kind="stable")[:keep_n]
        else:
            keep = slice(None)
        T_new, _sv = _kabsch(cloud[keep], targets[keep])
        if T_new is None:
            logger.warning("ICP correspondence covariance is rank-deficient; keeping init")
            return init, history
        targets, dist = closest_points_on_mesh(T_new.apply(cloud), mesh)
        rms_new = float(np.sqrt(np.mean(dist**2)))
        improvement = history[-1] - rms_new
        T = T_new
        history.append(rms_new)
        if improvement < tol:
            break
    return T, history
