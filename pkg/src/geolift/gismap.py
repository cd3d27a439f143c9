"""2D GIS polygon maps, declarative lift specifications, and mesh lifting.

A map is a set of labeled simple polygons in a local metric CRS. A lift
spec turns selected polygons into prisms (extrude up / carve down) or
tilted floors; everything else becomes a flat floor at ground elevation.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)


class SemanticLabel(enum.IntEnum):
    building = 0
    plants = 1
    pavement = 2
    sky = 3
    unknown = 4

    @staticmethod
    def from_name(name: str) -> "SemanticLabel":
        try:
            return SemanticLabel[name]
        except KeyError:
            raise ValidationError(f"unknown semantic label {name!r}") from None


def shoelace_area(ring: np.ndarray) -> float:
    """Signed area of a 2D ring; positive for CCW."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    """True when open segments p1p2 and p3p4 cross at an interior point."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def ring_is_simple(ring: np.ndarray) -> bool:
    """No two non-adjacent edges intersect."""
    n = len(ring)
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = ring[j], ring[(j + 1) % n]
            if _segments_properly_intersect(a1, a2, b1, b2):
                return False
    return True


@dataclass(frozen=True)
class GisPolygon:
    """Simple CCW polygon with a semantic label and walkability flag."""

    id: str
    ring: np.ndarray
    label: SemanticLabel
    walkable: bool

    def __post_init__(self):
        ring = np.asarray(self.ring, dtype=np.float64).reshape(-1, 2)
        if len(ring) < 3:
            raise ValidationError(f"polygon {self.id!r}: ring needs at least 3 vertices")
        if np.allclose(ring[0], ring[-1]):
            raise ValidationError(f"polygon {self.id!r}: first vertex repeated at end")
        area = shoelace_area(ring)
        if area < 0:
            logger.warning("polygon %r given clockwise; reversing ring", self.id)
            ring = ring[::-1].copy()
            area = -area
        if area <= 1e-12:
            raise ValidationError(f"polygon {self.id!r}: zero-area ring")
        if not ring_is_simple(ring):
            raise ValidationError(f"polygon {self.id!r}: self-intersecting ring")
        object.__setattr__(self, "ring", ring)

    def area(self) -> float:
        return shoelace_area(self.ring)


@dataclass(frozen=True)
class GisMap:
    polygons: list[GisPolygon]

    def __post_init__(self):
        if not self.polygons:
            raise ValidationError("map has no polygons")
        ids = [p.id for p in self.polygons]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate polygon ids: {dup}")
        _reject_nested_rings(self.polygons)

    def by_id(self, pid: str) -> GisPolygon:
        for p in self.polygons:
            if p.id == pid:
                return p
        raise KeyError(pid)


def _point_in_ring(pt: np.ndarray, ring: np.ndarray) -> bool:
    """Even-odd rule; boundary points are not counted as inside."""
    x, y = pt
    inside = False
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def _reject_nested_rings(polygons: list[GisPolygon]) -> None:
    # Holes are unsupported: a ring fully inside another ring is an error.
    for a in polygons:
        for b in polygons:
            if a.id == b.id:
                continue
            if all(_point_in_ring(v, b.ring) for v in a.ring):
                raise ValidationError(
                    f"polygon {a.id!r} is nested inside {b.id!r}; holes are unsupported"
                )


class LiftOpKind(enum.Enum):
    extrude = "extrude"
    carve = "carve"
    tilt = "tilt"


@dataclass(frozen=True)
class LiftOp:
    polygon_id: str
    kind: LiftOpKind
    height: float = 0.0  # extrude
    depth: float = 0.0  # carve
    anchors: np.ndarray | None = None  # tilt, 3x(x, y, z)

    def __post_init__(self):
        if self.kind is LiftOpKind.extrude and self.height <= 0:
            raise ValidationError(f"extrude of {self.polygon_id!r}: height must be > 0")
        if self.kind is LiftOpKind.carve and self.depth <= 0:
            raise ValidationError(f"carve of {self.polygon_id!r}: depth must be > 0")
        if self.kind is LiftOpKind.tilt:
            a = np.asarray(self.anchors, dtype=np.float64)
            if a.shape != (3, 3):
                raise ValidationError(f"tilt of {self.polygon_id!r}: need exactly 3 anchors")
            cross = (a[1, 0] - a[0, 0]) * (a[2, 1] - a[0, 1]) - (a[1, 1] - a[0, 1]) * (
                a[2, 0] - a[0, 0]
            )
            if abs(cross) < 1e-12:
                raise ValidationError(f"tilt of {self.polygon_id!r}: anchors collinear in (x, y)")
            object.__setattr__(self, "anchors", a)


@dataclass(frozen=True)
class LiftSpec:
    ground_elevation: float = 0.0
    ops: tuple[LiftOp, ...] = ()

    def validate_against(self, gis_map: GisMap) -> None:
        known = {p.id for p in gis_map.polygons}
        seen = set()
        for op in self.ops:
            if op.polygon_id not in known:
                raise ValidationError(f"lift op references missing polygon {op.polygon_id!r}")
            if op.polygon_id in seen:
                raise ValidationError(f"multiple lift ops for polygon {op.polygon_id!r}")
            seen.add(op.polygon_id)


@dataclass
class LabeledMesh:
    """Triangle mesh with per-triangle semantic payload.

    vertices: (V, 3) float64; triangles: (T, 3) int32 vertex indices;
    labels: (T,) uint8 SemanticLabel codes; walkable: (T,) bool;
    polygon_ids: length-T list of source polygon ids.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    walkable: np.ndarray
    polygon_ids: list[str]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        self.walkable = np.asarray(self.walkable, dtype=bool).reshape(-1)
        T = len(self.triangles)
        if not (len(self.labels) == len(self.walkable) == len(self.polygon_ids) == T):
            raise ValidationError("mesh per-triangle arrays have mismatched lengths")
        if T and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValidationError("triangle index out of range")

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-triangle corner arrays (v0, v1, v2), each (T, 3)."""
        v = self.vertices[self.triangles]
        return v[:, 0, :].copy(), v[:, 1, :].copy(), v[:, 2, :].copy()

    def face_normals(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        n = np.cross(v1 - v0, v2 - v0)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def areas(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    def num_triangles(self) -> int:
        return len(self.triangles)


def parse_map(text: str) -> GisMap:
    """Parse and validate map.json content."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed map JSON: {e}") from None
    if not isinstance(doc, dict) or "polygons" not in doc:
        raise ValidationError("map JSON must be an object with a 'polygons' list")
    polys = []
    for i, p in enumerate(doc["polygons"]):
        for key in ("id", "label", "walkable", "ring"):
            if key not in p:
                raise ValidationError(f"polygons[{i}]: missing field {key!r}")
        polys.append(
            GisPolygon(
                id=str(p["id"]),
                ring=np.asarray(p["ring"], dtype=np.float64),
                label=SemanticLabel.from_name(p["label"]),
                walkable=bool(p["walkable"]),
            )
        )
    return GisMap(polys)


def parse_liftspec(text: str, gis_map: GisMap | None = None) -> LiftSpec:
    """Parse and validate lift.json content (against a map when given)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed lift JSON: {e}") from None
    ops = []
    for i, o in enumerate(doc.get("ops", [])):
        if "polygon" not in o or "op" not in o:
            raise ValidationError(f"ops[{i}]: missing 'polygon' or 'op'")
        kind = o["op"]
        if kind == "extrude":
            if "height" not in o:
                raise ValidationError(f"ops[{i}]: extrude needs 'height'")
            ops.append(LiftOp(str(o["polygon"]), LiftOpKind.extrude, height=float(o["height"])))
        elif kind == "carve":
            if "depth" not in o:
                raise ValidationError(f"ops[{i}]: carve needs 'depth'")
            ops.append(LiftOp(str(o["polygon"]), LiftOpKind.carve, depth=float(o["depth"])))
        elif kind == "tilt":
            if "anchors" not in o:
                raise ValidationError(f"ops[{i}]: tilt needs 'anchors'")
            ops.append(
                LiftOp(str(o["polygon"]), LiftOpKind.tilt, anchors=np.asarray(o["anchors"]))
            )
        else:
            raise ValidationError(f"ops[{i}]: unknown op {kind!r}")
    spec = LiftSpec(ground_elevation=float(doc.get("ground_elevation", 0.0)), ops=tuple(ops))
    if gis_map is not None:
        spec.validate_against(gis_map)
    return spec


def triangulate_polygon(poly: GisPolygon) -> list[tuple[int, int, int]]:
    """Ear-clipping triangulation of a simple CCW ring.

    Returns exactly n-2 (i, j, k) index triples into the ring.
    """
    ring = poly.ring
    n = len(ring)
    if shoelace_area(ring) <= 1e-12:
        raise ValidationError(f"polygon {poly.id!r}: degenerate (zero area)")
    idx = list(range(n))
    tris: list[tuple[int, int, int]] = []

    def cross_z(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def point_in_tri(p, a, b, c):
        d1 = cross_z(a, b, p)
        d2 = cross_z(b, c, p)
        d3 = cross_z(c, a, p)
        return d1 > 1e-12 and d2 > 1e-12 and d3 > 1e-12

    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 2 * n * n:
            raise ValidationError(f"polygon {poly.id!r}: ear clipping failed")
        m = len(idx)
        clipped = False
        for k in range(m):
            i_prev, i_cur, i_next = idx[(k - 1) % m], idx[k], idx[(k + 1) % m]
            a, b, c = ring[i_prev], ring[i_cur], ring[i_next]
            if cross_z(a, b, c) <= 1e-12:
                continue  # reflex or collinear corner
            if any(
                point_in_tri(ring[j], a, b, c) for j in idx if j not in (i_prev, i_cur, i_next)
            ):
                continue
            tris.append((i_prev, i_cur, i_next))
            idx.pop(k)
            clipped = True
            break
        if not clipped:
            raise ValidationError(f"polygon {poly.id!r}: no ear found (degenerate ring?)")
    tris.append((idx[0], idx[1], idx[2]))
    return tris


class _MeshBuilder:
    """Accumulates deduplicated vertices and labeled faces deterministically."""

    def __init__(self):
        self.vertices: list[np.ndarray] = []
        self.vmap: dict[tuple[float, float, float], int] = {}
        self.tris: list[tuple[int, int, int]] = []
        self.labels: list[int] = []
        self.walkable: list[bool] = []
        self.polygon_ids: list[str] = []

    def vertex(self, p) -> int:
        key = (float(p[0]), float(p[1]), float(p[2]))
        i = self.vmap.get(key)
        if i is None:
            i = len(self.vertices)
            self.vmap[key] = i
            self.vertices.append(np.asarray(p, dtype=np.float64))
        return i

    def face(self, a, b, c, label: int, pid: str, walkable: bool) -> None:
        ia, ib, ic = self.vertex(a), self.vertex(b), self.vertex(c)
        p0, p1, p2 = self.vertices[ia], self.vertices[ib], self.vertices[ic]
        if 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0)) <= 1e-12:
            return  # skip degenerate slivers
        self.tris.append((ia, ib, ic))
        self.labels.append(label)
        self.walkable.append(walkable)
        self.polygon_ids.append(pid)

    def build(self) -> LabeledMesh:
        return LabeledMesh(
            vertices=np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3),
            triangles=np.asarray(self.tris, dtype=np.int32).reshape(-1, 3),
            labels=np.asarray(self.labels, dtype=np.uint8),
            walkable=np.asarray(self.walkable, dtype=bool),
            polygon_ids=self.polygon_ids,
        )


def _flat_face(mb, poly, tris, z, label, walkable):
    for (i, j, k) in tris:
        a = (*poly.ring[i], z)
        b = (*poly.ring[j], z)
        c = (*poly.ring[k], z)
        mb.face(a, b, c, label, poly.id, walkable)


def _walls(mb, poly, z_lo, z_hi, outward: bool):
    """Side walls of a prism between two elevations.

    outward=True faces away from the footprint (extrusion); False faces
    into it (carved pit seen from above).
    """
    ring = poly.ring
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        a0, b0 = (ax, ay, z_lo), (bx, by, z_lo)
        a1, b1 = (ax, ay, z_hi), (bx, by, z_hi)
        if outward:
            mb.face(a0, b0, b1, poly.label, poly.id, False)
            mb.face(a0, b1, a1, poly.label, poly.id, False)
        else:
            mb.face(b0, a0, a1, poly.label, poly.id, False)
            mb.face(b0, a1, b1, poly.label, poly.id, False)


def lift(gis_map: GisMap, spec: LiftSpec) -> LabeledMesh:
    """Lift a validated 2D map into a labeled 3D mesh.

    Polygons without ops become flat floors at ground elevation. Extrude
    builds a closed prism above the floor (walls are never walkable);
    carve sinks the floor by the given depth, walled to ground level;
    tilt replaces the floor with the plane through the three anchors.
    """
    spec.validate_against(gis_map)
    ops = {op.polygon_id: op for op in spec.ops}
    z0 = spec.ground_elevation
    mb = _MeshBuilder()
    for poly in gis_map.polygons:
        tris = triangulate_polygon(poly)
        op = ops.get(poly.id)
        if op is None:
            _flat_face(mb, poly, tris, z0, poly.label, poly.walkable)
        elif op.kind is LiftOpKind.extrude:
            z1 = z0 + op.height
            _flat_face(mb, poly, tris, z1, poly.label, poly.walkable)  # top
            _walls(mb, poly, z0, z1, outward=True)
            _flat_face(mb, poly, tris, z0, poly.label, poly.walkable)  # bottom floor
        elif op.kind is LiftOpKind.carve:
            z1 = z0 - op.depth
            _flat_face(mb, poly, tris, z1, poly.label, poly.walkable)  # sunken floor
            _walls(mb, poly, z1, z0, outward=False)
        elif op.kind is LiftOpKind.tilt:
            a = op.anchors
            # plane z = px*x + py*y + pz through the anchors
            A = np.column_stack([a[:, 0], a[:, 1], np.ones(3)])
            px, py, pz = np.linalg.solve(A, a[:, 2])
            for (i, j, k) in tris:
                pts = []
                for idx in (i, j, k):
                    x, y = poly.ring[idx]
                    pts.append((x, y, px * x + py * y + pz))
                mb.face(pts[0], pts[1], pts[2], poly.label, poly.id, poly.walkable)
    return mb.build()
