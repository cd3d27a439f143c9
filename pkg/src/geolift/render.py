"""BVH-accelerated ray casting and per-pixel context backprojection.

The BVH is a binary median-split tree stored in flat arrays so the
traversal kernels can be JIT-compiled. Rendering a camera produces three
aligned rasters: depth (Euclidean ray distance, +inf for misses),
semantic label, and discretized surface-normal bin.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import RAY_EPS, Camera, Hit, Ray, pixel_rays
from .gismap import LabeledMesh, SemanticLabel

LEAF_SIZE = 4

COS_45 = np.cos(np.pi / 4.0)
SIN_15 = np.sin(np.pi / 12.0)


class NormalBin(enum.IntEnum):
    ground = 0
    ceiling = 1
    wall = 2
    none = 3


@dataclass
class BVH:
    """Flat binary BVH over mesh triangles.

    Internal nodes have left/right child indices; leaves have left == -1
    and cover tri_order[first : first + count].
    """

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    tri_order: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def num_nodes(self) -> int:
        return len(self.left)


def build_bvh(mesh: LabeledMesh) -> BVH:
    """Median-split BVH (longest axis, leaf size <= LEAF_SIZE)."""
    T = mesh.num_triangles()
    if T == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    v0, v1, v2 = mesh.corners()
    tri_min = np.minimum(np.minimum(v0, v1), v2)
    tri_max = np.maximum(np.maximum(v0, v1), v2)
    centroids = (tri_min + tri_max) * 0.5

    order = np.arange(T, dtype=np.int32)
    bounds_min, bounds_max = [], []
    left, right, first, count = [], [], [], []

    # each stack entry: (node index, start, end) over order[start:end]
    stack = [(0, 0, T)]
    bounds_min.append(np.zeros(3))
    bounds_max.append(np.zeros(3))
    left.append(-1)
    right.append(-1)
    first.append(0)
    count.append(0)
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        bmin = tri_min[idx].min(axis=0)
        bmax = tri_max[idx].max(axis=0)
        bounds_min[node] = bmin
        bounds_max[node] = bmax
        n = hi - lo
        if n <= LEAF_SIZE:
            left[node] = -1
            right[node] = -1
            first[node] = lo
            count[node] = n
            continue
        axis = int(np.argmax(bmax - bmin))
        keys = centroids[idx, axis]
        mid = n // 2
        part = np.argsort(keys, kind="stable")
        order[lo:hi] = idx[part]
        li = len(left)
        ri = li + 1
        for _ in range(2):
            bounds_min.append(np.zeros(3))
            bounds_max.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            first.append(0)
            count.append(0)
        left[node] = li
        right[node] = ri
        stack.append((li, lo, lo + mid))
        stack.append((ri, lo + mid, hi))

    return BVH(
        bounds_min=np.asarray(bounds_min, dtype=np.float64),
        bounds_max=np.asarray(bounds_max, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        first=np.asarray(first, dtype=np.int32),
        count=np.asarray(count, dtype=np.int32),
        tri_order=order,
        v0=np.ascontiguousarray(v0),
        v1=np.ascontiguousarray(v1),
        v2=np.ascontiguousarray(v2),
    )


@numba.njit(cache=True, error_model="numpy")
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, v1, v2, i):
    """Moller-Trumbore; returns t or inf."""
    e1x = v1[i, 0] - v0[i, 0]
    e1y = v1[i, 1] - v0[i, 1]
    e1z = v1[i, 2] - v0[i, 2]
    e2x = v2[i, 0] - v0[i, 0]
    e2y = v2[i, 1] - v0[i, 1]
    e2z = v2[i, 2] - v0[i, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -1e-14 < det < 1e-14:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[i, 0]
    ty = oy - v0[i, 1]
    tz = oz - v0[i, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= RAY_EPS:
        return np.inf
    return t


@numba.njit(cache=True, error_model="numpy")
def _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node):
    """Ray/AABB entry and exit parameters."""
    t1 = (bmin[node, 0] - ox) * ix
    t2 = (bmax[node, 0] - ox) * ix
    tmin = min(t1, t2)
    tmax = max(t1, t2)
    t1 = (bmin[node, 1] - oy) * iy
    t2 = (bmax[node, 1] - oy) * iy
    tmin = max(tmin, min(t1, t2))
    tmax = min(tmax, max(t1, t2))
    t1 = (bmin[node, 2] - oz) * iz
    t2 = (bmax[node, 2] - oz) * iz
    tmin = max(tmin, min(t1, t2))
    tmax = min(tmax, max(t1, t2))
    return tmin, tmax


@numba.njit(cache=True, error_model="numpy")
def _traverse_nearest(
    ox, oy, oz, dx, dy, dz, bmin, bmax, left, right, first, count, order, v0, v1, v2
):
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    stack = np.empty(128, dtype=np.int32)
    stack[0] = 0
    sp = 1
    best_t = np.inf
    best_i = -1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tmin, tmax = _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node)
        if tmax < RAY_EPS or tmin > tmax or tmin > best_t:
            continue
        if left[node] < 0:
            for j in range(first[node], first[node] + count[node]):
                i = order[j]
                t = _tri_hit(ox, oy, oz, dx, dy, dz, v0, v1, v2, i)
                if t < best_t or (t == best_t and t < np.inf and i < best_i):
                    best_t = t
                    best_i = i
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return best_t, best_i


@numba.njit(cache=True, error_model="numpy")
def _traverse_all(
    ox, oy, oz, dx, dy, dz, bmin, bmax, left, right, first, count, order, v0, v1, v2, out_t, out_i
):
    """Collects every hit with t > RAY_EPS; returns total hit count.

    Writes at most len(out_t) records; the caller re-runs with a larger
    buffer when the returned count exceeds the capacity.
    """
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    stack = np.empty(128, dtype=np.int32)
    stack[0] = 0
    sp = 1
    nhits = 0
    cap = out_t.shape[0]
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tmin, tmax = _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node)
        if tmax < RAY_EPS or tmin > tmax:
            continue
        if left[node] < 0:
            for j in range(first[node], first[node] + count[node]):
                i = order[j]
                t = _tri_hit(ox, oy, oz, dx, dy, dz, v0, v1, v2, i)
                if t < np.inf:
                    if nhits < cap:
                        out_t[nhits] = t
                        out_i[nhits] = i
                    nhits += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return nhits


@numba.njit(cache=True, error_model="numpy")
def _traverse_batch(
    origins, dirs, bmin, bmax, left, right, first, count, order, v0, v1, v2, out_t, out_i
):
    for k in range(origins.shape[0]):
        t, i = _traverse_nearest(
            origins[k, 0],
            origins[k, 1],
            origins[k, 2],
            dirs[k, 0],
            dirs[k, 1],
            dirs[k, 2],
            bmin,
            bmax,
            left,
            right,
            first,
            count,
            order,
            v0,
            v1,
            v2,
        )
        out_t[k] = t
        out_i[k] = i


def _hit_from(mesh: LabeledMesh, ray: Ray, t: float, tri: int) -> Hit:
    v = mesh.vertices[mesh.triangles[tri]]
    n = np.cross(v[1] - v[0], v[2] - v[0])
    n /= np.linalg.norm(n)
    return Hit(float(t), ray.point_at(float(t)), int(tri), int(mesh.labels[tri]), n)


def raycast(bvh: BVH, mesh: LabeledMesh, ray: Ray) -> Hit | None:
    """Nearest intersection along the ray, or None."""
    t, i = _traverse_nearest(
        ray.origin[0],
        ray.origin[1],
        ray.origin[2],
        ray.dir[0],
        ray.dir[1],
        ray.dir[2],
        bvh.bounds_min,
        bvh.bounds_max,
        bvh.left,
        bvh.right,
        bvh.first,
        bvh.count,
        bvh.tri_order,
        bvh.v0,
        bvh.v1,
        bvh.v2,
    )
    if i < 0:
        return None
    return _hit_from(mesh, ray, t, i)


def raycast_all(bvh: BVH, mesh: LabeledMesh, ray: Ray) -> list[Hit]:
    """Every intersection along the ray, ascending by t."""
    cap = 64
    while True:
        out_t = np.empty(cap, dtype=np.float64)
        out_i = np.empty(cap, dtype=np.int32)
        n = _traverse_all(
            ray.origin[0],
            ray.origin[1],
            ray.origin[2],
            ray.dir[0],
            ray.dir[1],
            ray.dir[2],
            bvh.bounds_min,
            bvh.bounds_max,
            bvh.left,
            bvh.right,
            bvh.first,
            bvh.count,
            bvh.tri_order,
            bvh.v0,
            bvh.v1,
            bvh.v2,
            out_t,
            out_i,
        )
        if n <= cap:
            break
        cap = n
    ordering = np.lexsort((out_i[:n], out_t[:n]))
    return [_hit_from(mesh, ray, out_t[k], out_i[k]) for k in ordering]


def raycast_batch(bvh: BVH, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit (t, tri_index) for many rays; t = inf, index = -1 on miss."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    out_t = np.empty(len(origins), dtype=np.float64)
    out_i = np.empty(len(origins), dtype=np.int32)
    _traverse_batch(
        origins,
        dirs,
        bvh.bounds_min,
        bvh.bounds_max,
        bvh.left,
        bvh.right,
        bvh.first,
        bvh.count,
        bvh.tri_order,
        bvh.v0,
        bvh.v1,
        bvh.v2,
        out_t,
        out_i,
    )
    return out_t, out_i


def discretize_normal(n) -> NormalBin:
    """Bin a unit normal: ground (up), ceiling (down), wall (near-vertical surface)."""
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("normal must be unit length")
    return _bin_scalar(float(n[2]))


def _bin_scalar(nz: float) -> NormalBin:
    if nz >= COS_45:
        return NormalBin.ground
    if nz <= -COS_45:
        return NormalBin.ceiling
    if abs(nz) <= SIN_15:
        return NormalBin.wall
    return NormalBin.none


def discretize_normals(nz: np.ndarray) -> np.ndarray:
    """Vectorized normal binning from z-components."""
    out = np.full(nz.shape, int(NormalBin.none), dtype=np.uint8)
    out[nz >= COS_45] = int(NormalBin.ground)
    out[nz <= -COS_45] = int(NormalBin.ceiling)
    out[np.abs(nz) <= SIN_15] = int(NormalBin.wall)
    return out


@dataclass
class ContextMaps:
    """Per-pixel backprojected context for one camera.

    depth holds Euclidean distance along the pixel ray (+inf for no hit);
    labels holds SemanticLabel codes (sky for no hit); normals holds
    NormalBin codes (none for no hit).
    """

    depth: np.ndarray
    labels: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        if not (self.depth.shape == self.labels.shape == self.normals.shape):
            raise ValueError("context rasters must share dimensions")


def render_context(camera: Camera, bvh: BVH, mesh: LabeledMesh) -> ContextMaps:
    """Backproject depth, labels, and normal bins into the camera."""
    H, W = camera.height, camera.width
    dirs = pixel_rays(camera).reshape(-1, 3)
    origins = np.broadcast_to(camera.center(), (len(dirs), 3))
    t, tri = raycast_batch(bvh, origins, dirs)
    depth = t.reshape(H, W)

    labels = np.full(len(dirs), int(SemanticLabel.sky), dtype=np.uint8)
    normals = np.full(len(dirs), int(NormalBin.none), dtype=np.uint8)
    hit = tri >= 0
    if np.any(hit):
        face_n = mesh.face_normals()
        labels[hit] = mesh.labels[tri[hit]]
        normals[hit] = discretize_normals(face_n[tri[hit], 2])
    return ContextMaps(depth=depth, labels=labels.reshape(H, W), normals=normals.reshape(H, W))


def principal_depth(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """Convert ray-distance depth to distance along the optical axis."""
    dirs = pixel_rays(camera)
    axis = camera.optical_axis()
    return depth * (dirs @ axis)
