"""Camera pose estimation from 2D-3D correspondences.

A Grunert-style minimal three-point solver runs inside RANSAC; database
cameras are k-means clustered so resectioning runs per spatial cluster;
pose candidates are vetted with height/tilt heuristics measured against
the lifted model before the best cluster is selected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .geometry import (
    Camera,
    Intrinsics,
    Pose,
    Ray,
    orthonormalize,
    rodrigues,
)
from .gismap import LabeledMesh
from .render import BVH, raycast

logger = logging.getLogger(__name__)

MAX_HEIGHT_M = 4.0
MAX_TILT_DEG = 30.0


@dataclass(frozen=True)
class Correspondence:
    """Pixel observation of a world point (possibly an outlier)."""

    px: tuple[float, float]
    X: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.px)):
            raise ValueError("pixel coordinates must be finite")
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class RansacParams:
    inlier_px: float = 4.0
    confidence: float = 0.999
    max_iters: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.inlier_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclass
class ClusterIndex:
    """k-means partition of database cameras plus per-cluster point sets."""

    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    point_sets: list[set[int]] = field(default_factory=list)


@dataclass(frozen=True)
class PlausibilityReport:
    height_m: float
    tilt_deg: float
    below_ground: bool
    verdict: str  # "accept" | "reject"
    reason: str


def _bearings(corrs: list[Correspondence], intr: Intrinsics) -> np.ndarray:
    b = np.array(
        [[(c.px[0] - intr.cx) / intr.f, (c.px[1] - intr.cy) / intr.f, 1.0] for c in corrs]
    )
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _absolute_orientation(Pw: np.ndarray, Qc: np.ndarray) -> Pose | None:
    """Rigid fit Qc = R @ Pw + t for three paired points."""
    Pm = Pw.mean(axis=0)
    Qm = Qc.mean(axis=0)
    H = (Pw - Pm).T @ (Qc - Qm)
    U, sigma, Vt = np.linalg.svd(H)
    if sigma[1] <= 1e-12 * max(sigma[0], 1e-300):
        return None
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = Qm - R @ Pm
    return Pose(orthonormalize(R), t)


def reprojection_errors(pose: Pose, corrs: list[Correspondence], intr: Intrinsics) -> np.ndarray:
    """Per-correspondence pixel error; +inf for points behind the camera."""
    X = np.array([c.X for c in corrs])
    px = np.array([c.px for c in corrs])
    Xc = X @ pose.R.T + pose.t
    z = Xc[:, 2]
    err = np.full(len(corrs), np.inf)
    ok = z > 0
    u = intr.f * Xc[ok, 0] / z[ok] + intr.cx
    v = intr.f * Xc[ok, 1] / z[ok] + intr.cy
    err[ok] = np.hypot(u - px[ok, 0], v - px[ok, 1])
    return err


def solve_p3p(corrs: list[Correspondence], intr: Intrinsics) -> list[Pose]:
    """Minimal absolute-pose solver; returns up to four candidate poses.

    Solves the three-point law-of-cosines system for the camera-to-point
    distances via its quartic resultant, then recovers each pose by rigid
    alignment. Every returned candidate is polished so the three input
    points reproject within solver precision.
    """
    if len(corrs) != 3:
        raise ValueError("P3P needs exactly 3 correspondences")
    Pw = np.array([c.X for c in corrs])
    area2 = np.linalg.norm(np.cross(Pw[1] - Pw[0], Pw[2] - Pw[0]))
    if area2 < 1e-12:
        raise ValueError("world points are collinear")
    f = _bearings(corrs, intr)
    if (
        np.linalg.norm(np.cross(f[0], f[1])) < 1e-12
        or np.linalg.norm(np.cross(f[0], f[2])) < 1e-12
        or np.linalg.norm(np.cross(f[1], f[2])) < 1e-12
    ):
        raise ValueError("bearing vectors are coincident")

    a2 = float(np.sum((Pw[1] - Pw[2]) ** 2))
    b2 = float(np.sum((Pw[0] - Pw[2]) ** 2))
    c2 = float(np.sum((Pw[0] - Pw[1]) ** 2))
    ca = float(f[1] @ f[2])
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])

    # With s2 = u*s1 and s3 = v*s1 the system reduces to a quartic in v.
    # Assemble it by polynomial arithmetic instead of hand-expanded
    # coefficients: N/D is u as a rational function of v.
    A = (a2 - c2) / b2
    N = np.array([A + 1.0, -2.0 * A * cb, A - 1.0])
    D = np.array([2.0 * cg, -2.0 * ca])
    P1 = np.array([c2, -2.0 * c2 * cb, c2])
    D2 = npoly.polymul(D, D)
    quartic = npoly.polyadd(npoly.polymul(P1, D2), -b2 * D2)
    quartic = npoly.polyadd(quartic, -b2 * npoly.polymul(N, N))
    quartic = npoly.polyadd(quartic, 2.0 * b2 * cg * npoly.polymul(N, D))

    coeffs = quartic[::-1]
    scale = np.max(np.abs(coeffs))
    nz = np.flatnonzero(np.abs(coeffs) > 1e-14 * scale)
    if len(nz) == 0:
        return []
    coeffs = coeffs[nz[0] :]
    roots = np.roots(coeffs)

    poses = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = float(r.real)
        # polish the root on the full quartic
        for _ in range(3):
            val = npoly.polyval(v, quartic)
            dval = npoly.polyval(v, npoly.polyder(quartic))
            if dval == 0.0:
                break
            v -= val / dval
        if v <= 0:
            continue
        denom = float(npoly.polyval(v, D))
        if abs(denom) < 1e-12:
            continue
        u = float(npoly.polyval(v, N)) / denom
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1sq <= 0:
            continue
        s1 = float(np.sqrt(s1sq))
        Qc = np.array([s1 * f[0], (u * s1) * f[1], (v * s1) * f[2]])
        pose = _absolute_orientation(Pw, Qc)
        if pose is None:
            continue
        pose = _polish_minimal(pose, corrs, intr)
        if pose is not None:
            poses.append(pose)
    return poses


def _polish_minimal(pose: Pose, corrs: list[Correspondence], intr: Intrinsics) -> Pose | None:
    """Gauss-Newton on the three minimal points; rejects non-interpolating poses."""
    refined = _gauss_newton_pose(pose, corrs, intr, max_steps=10)
    err = reprojection_errors(refined, corrs, intr)
    if np.any(~np.isfinite(err)) or np.max(err) > 1e-6:
        return None
    return refined


def _gauss_newton_pose(
    pose: Pose, corrs: list[Correspondence], intr: Intrinsics, max_steps: int
) -> Pose:
    """Damped Gauss-Newton minimizing squared reprojection error."""
    X = np.array([c.X for c in corrs])
    px = np.array([c.px for c in corrs])
    R, t = pose.R, pose.t

    def cost(R, t):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        if np.any(z <= 0):
            return np.inf, None, None
        u = intr.f * Xc[:, 0] / z + intr.cx
        v = intr.f * Xc[:, 1] / z + intr.cy
        res = np.column_stack([u - px[:, 0], v - px[:, 1]]).ravel()
        return float(res @ res), res, Xc

    c0, res, Xc = cost(R, t)
    if not np.isfinite(c0):
        return pose
    lam = 1e-6
    for _ in range(max_steps):
        # residual Jacobian wrt (rotation increment, translation increment)
        n = len(X)
        J = np.zeros((2 * n, 6))
        for i in range(n):
            x, y, z = Xc[i]
            du = np.array([intr.f / z, 0.0, -intr.f * x / z**2])
            dv = np.array([0.0, intr.f / z, -intr.f * y / z**2])
            dxc = np.column_stack(
                [
                    np.array(
                        [[0.0, z, -y], [-z, 0.0, x], [y, -x, 0.0]]
                    ),  # d(exp(w) xc)/dw = -[xc]x
                    np.eye(3),
                ]
            )
            J[2 * i] = du @ dxc
            J[2 * i + 1] = dv @ dxc
        JtJ = J.T @ J
        g = J.T @ res
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
            except np.linalg.LinAlgError:
                return Pose(orthonormalize(R), t)
            W = rodrigues(delta[:3])
            R_new = orthonormalize(W @ R)
            t_new = W @ t + delta[3:]
            c_new, res_new, Xc_new = cost(R_new, t_new)
            if c_new < c0:
                R, t, c0, res, Xc = R_new, t_new, c_new, res_new, Xc_new
                lam = max(lam * 0.25, 1e-12)
                stepped = True
                break
            lam *= 4.0
        if not stepped or c0 < 1e-24:
            break
    return Pose(orthonormalize(R), t)


def refine_pose(pose: Pose, inliers: list[Correspondence], intr: Intrinsics) -> Pose:
    """Nonlinear reprojection refinement over an inlier set.

    Never increases the total squared reprojection error; falls back to
    the input pose when the normal equations are rank-deficient.
    """
    if len(inliers) < 4:
        raise ValueError("refinement needs at least 4 inliers")
    X = np.array([c.X for c in inliers])
    spread = np.linalg.svd((X - X.mean(axis=0)), compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        logger.warning("refine_pose: degenerate inlier geometry; returning input pose")
        return pose
    return _gauss_newton_pose(pose, inliers, intr, max_steps=20)


def ransac_resect(
    corrs: list[Correspondence],
    intr: Intrinsics,
    params: RansacParams = RansacParams(),
    debug: bool = False,
) -> tuple[Pose, np.ndarray, int]:
    """Robust pose estimation; returns (pose, inlier indices, iterations used).

    The sample sequence is fully determined by params.seed: all minimal
    samples are pre-drawn so the result does not depend on how the search
    is scheduled. Iterations adapt to the best inlier ratio found.
    """
    n = len(corrs)
    if n < 4:
        raise ValueError("need at least 4 correspondences")
    rng = np.random.default_rng(params.seed)

    def sample_stream():
        # drawn in fixed-size blocks so the sequence depends only on the seed
        drawn = 0
        while drawn < params.max_iters:
            block = min(512, params.max_iters - drawn)
            keys = rng.random((block, n))
            triples = np.argsort(keys, axis=1, kind="stable")[:, :3]
            yield from triples
            drawn += block

    best_pose = None
    best_inliers = np.zeros(0, dtype=np.int64)
    best_count = 0
    best_err_sum = np.inf
    needed = params.max_iters
    it = 0
    for it, sample in enumerate(sample_stream(), start=1):
        minimal = [corrs[j] for j in sample]
        try:
            candidates = solve_p3p(minimal, intr)
        except ValueError:
            candidates = []
        for pose in candidates:
            err = reprojection_errors(pose, corrs, intr)
            if debug:
                assert np.max(err[sample]) < 1e-6
            mask = err < params.inlier_px
            count = int(np.sum(mask))
            err_sum = float(np.sum(err[mask])) if count else np.inf
            if count > best_count or (count == best_count and err_sum < best_err_sum):
                best_pose = pose
                best_inliers = np.flatnonzero(mask)
                best_count = count
                best_err_sum = err_sum
        if best_count > 0:
            w = best_count / n
            denom = np.log1p(-min(w**3, 1.0 - 1e-12))
            needed = (
                int(np.ceil(np.log(1.0 - params.confidence) / denom)) if denom < 0 else 1
            )
        if it >= min(needed, params.max_iters):
            break

    if best_pose is None or best_count == 0:
        raise ValueError("RANSAC found no inliers")
    if best_count >= 4:
        refined = refine_pose(best_pose, [corrs[j] for j in best_inliers], intr)
        err = reprojection_errors(refined, corrs, intr)
        mask = err < params.inlier_px
        if int(np.sum(mask)) >= best_count:
            best_pose = refined
            best_inliers = np.flatnonzero(mask)
    return best_pose, best_inliers, it


def cluster_cameras(
    camera_positions: np.ndarray,
    k: int = 10,
    seed: int = 0,
    visibility: list[set[int]] | None = None,
) -> ClusterIndex:
    """k-means (k-means++ seeding, Lloyd iterations) over camera positions.

    A point id belongs to every cluster containing a camera that sees it.
    """
    pos = np.asarray(camera_positions, dtype=np.float64).reshape(len(camera_positions), -1)
    n = len(pos)
    if n < k:
        raise ValueError(f"need at least k={k} cameras, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pos.shape[1]))
    centroids[0] = pos[rng.integers(n)]
    d2 = np.sum((pos - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            centroids[j] = pos[rng.integers(n)]
        else:
            centroids[j] = pos[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pos - centroids[j]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dist = np.sum((pos[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist, axis=1)
        for j in range(k):
            members = pos[new_assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    point_sets: list[set[int]] = [set() for _ in range(k)]
    if visibility is not None:
        for cam, pts in enumerate(visibility):
            point_sets[assign[cam]].update(pts)
    return ClusterIndex(k=k, assignments=assign, centroids=centroids, point_sets=point_sets)


def plausibility_filter(pose: Pose, bvh: BVH, mesh: LabeledMesh) -> PlausibilityReport:
    """Vet a pose against the model: reject below-ground, too-high, or over-tilted cameras."""
    center = pose.center()
    down = raycast(bvh, mesh, Ray(center, np.array([0.0, 0.0, -1.0])))
    up = raycast(bvh, mesh, Ray(center, np.array([0.0, 0.0, 1.0])))

    down_axis = pose.R.T @ np.array([0.0, 1.0, 0.0])
    cos_tilt = float(down_axis @ np.array([0.0, 0.0, -1.0]))
    tilt_deg = float(np.degrees(np.arccos(np.clip(cos_tilt, -1.0, 1.0))))

    if down is None:
        below = up is not None
        reason = "below ground plane" if below else "no ground found"
        return PlausibilityReport(float("nan"), tilt_deg, below, "reject", reason)

    height = float(center[2] - down.point[2])
    if height > MAX_HEIGHT_M:
        return PlausibilityReport(height, tilt_deg, False, "reject", f"height {height:.2f} m > {MAX_HEIGHT_M} m")
    if tilt_deg > MAX_TILT_DEG:
        return PlausibilityReport(height, tilt_deg, False, "reject", f"tilt {tilt_deg:.1f} deg > {MAX_TILT_DEG} deg")
    return PlausibilityReport(height, tilt_deg, False, "accept", "within height and tilt limits")


def resect_against_clusters(
    cluster_corrs: dict[int, list[Correspondence]],
    intr: Intrinsics,
    params: RansacParams,
    bvh: BVH,
    mesh: LabeledMesh,
    apply_filter: bool = True,
) -> tuple[Pose, int, np.ndarray] | None:
    """Resection independently per cluster; keep the plausible pose with most inliers.

    Ties break toward the lower cluster id. Returns None when every
    cluster fails or is rejected by the plausibility filter.
    """
    best = None
    for cid in sorted(cluster_corrs):
        corrs = cluster_corrs[cid]
        if len(corrs) < 4:
            continue
        cluster_params = RansacParams(
            inlier_px=params.inlier_px,
            confidence=params.confidence,
            max_iters=params.max_iters,
            seed=params.seed + cid,
        )
        try:
            pose, inliers, _ = ransac_resect(corrs, intr, cluster_params)
        except ValueError:
            continue
        if apply_filter and plausibility_filter(pose, bvh, mesh).verdict != "accept":
            continue
        if best is None or len(inliers) > len(best[2]):
            best = (pose, cid, inliers)
    return best
