"""Farm context: GeoJSON ingestion and the spatial queries planners get wrong.

A farm file is a GeoJSON FeatureCollection with three kinds of features:

* one ``Polygon`` whose ``role`` property is ``"boundary"``;
* one ``Point`` whose ``role`` property is ``"deploy"`` (where the robot is
  dropped off and returns to);
* any number of tree ``Point`` features, each carrying an ``id`` property.
  Every other property is kept as a string attribute (species, age,
  leaf_color, ...).

Coordinates follow RFC 7946 ``[lon, lat]`` order. All geometry is done in a
local east/north frame in meters centred on the boundary centroid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from shapely.geometry import LinearRing, Point, Polygon

EARTH_RADIUS_M = 6371008.8
# Slack for "on the boundary" / "on the midline" tests, in meters.
ON_EDGE_TOL_M = 1e-6

DIRECTIONS = ("north", "south", "east", "west")


class FarmError(ValueError):
    """Raised when a farm file is unusable; the message names the feature."""


class GeoPoint(NamedTuple):
    lat: float
    lon: float


class LocalXY(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class TreeRecord:
    id: str
    position: GeoPoint
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class FarmMap:
    trees: tuple[TreeRecord, ...]
    boundary: tuple[GeoPoint, ...]
    deploy_point: GeoPoint
    origin: GeoPoint

    def tree(self, tree_id: str) -> TreeRecord:
        for t in self.trees:
            if t.id == tree_id:
                return t
        raise KeyError(tree_id)

    @property
    def tree_ids(self) -> list[str]:
        return [t.id for t in self.trees]


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


def _project(origin: GeoPoint, lat: float, lon: float) -> LocalXY:
    k = math.pi / 180.0
    x = EARTH_RADIUS_M * (lon - origin.lon) * math.cos(origin.lat * k) * k
    y = EARTH_RADIUS_M * (lat - origin.lat) * k
    return LocalXY(x, y)


def _unproject(origin: GeoPoint, x: float, y: float) -> GeoPoint:
    k = math.pi / 180.0
    lat = origin.lat + y / (EARTH_RADIUS_M * k)
    lon = origin.lon + x / (EARTH_RADIUS_M * math.cos(origin.lat * k) * k)
    return GeoPoint(lat, lon)


def to_local(farm: FarmMap, p: GeoPoint) -> LocalXY:
    """Equirectangular projection about the farm origin."""
    return _project(farm.origin, p.lat, p.lon)


def from_local(farm: FarmMap, xy: LocalXY) -> GeoPoint:
    return _unproject(farm.origin, xy.x, xy.y)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    k = math.pi / 180.0
    dlat = (b.lat - a.lat) * k
    dlon = (b.lon - a.lon) * k
    h = math.sin(dlat / 2) ** 2 + math.cos(a.lat * k) * math.cos(b.lat * k) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def local_distance(a: LocalXY, b: LocalXY) -> float:
    return math.hypot(b.x - a.x, b.y - a.y)


def tree_xy(farm: FarmMap, tree_id: str) -> LocalXY:
    return to_local(farm, farm.tree(tree_id).position)


def deploy_xy(farm: FarmMap) -> LocalXY:
    return to_local(farm, farm.deploy_point)


def boundary_xy(farm: FarmMap) -> np.ndarray:
    return np.array([to_local(farm, p) for p in farm.boundary], dtype=float)


def farm_scale(farm: FarmMap) -> float:
    """Diagonal of the boundary's local bounding box, in meters.

    Normalized distance budgets are multiples of this length.
    """
    xy = boundary_xy(farm)
    span = xy.max(axis=0) - xy.min(axis=0)
    return float(math.hypot(span[0], span[1]))


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def _feature_label(i: int, feat: dict) -> str:
    props = feat.get("properties") or {}
    fid = props.get("id", feat.get("id"))
    return f"feature[{i}]" + (f" (id {fid!r})" if fid is not None else "")


def _as_geopoint(coords, label: str) -> GeoPoint:
    try:
        lon, lat = float(coords[0]), float(coords[1])
    except (TypeError, ValueError, IndexError):
        raise FarmError(f"{label}: bad coordinates {coords!r}") from None
    if not (math.isfinite(lat) and math.isfinite(lon)) or not -90 <= lat <= 90 or not -180 <= lon <= 180:
        raise FarmError(f"{label}: coordinates out of range {coords!r}")
    return GeoPoint(lat, lon)


def _attr_string(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def _centroid(ring: list[GeoPoint]) -> GeoPoint:
    c = Polygon([(p.lon, p.lat) for p in ring]).centroid
    return GeoPoint(c.y, c.x)


def load_farm(geojson_text: str) -> FarmMap:
    try:
        doc = json.loads(geojson_text)
    except json.JSONDecodeError as exc:
        raise FarmError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise FarmError("top-level object is not a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise FarmError("FeatureCollection has no 'features' list")

    boundary: list[GeoPoint] | None = None
    deploy: GeoPoint | None = None
    trees: list[tuple[str, TreeRecord]] = []
    seen: dict[str, str] = {}

    for i, feat in enumerate(features):
        if not isinstance(feat, dict):
            raise FarmError(f"feature[{i}]: not an object")
        label = _feature_label(i, feat)
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if not isinstance(props, dict) or not isinstance(geom, dict):
            raise FarmError(f"{label}: properties and geometry must be objects")
        role = props.get("role")
        gtype = geom.get("type")

        if role == "boundary":
            if gtype != "Polygon":
                raise FarmError(f"{label}: boundary must be a Polygon, got {gtype!r}")
            if boundary is not None:
                raise FarmError(f"{label}: second boundary feature")
            rings = geom.get("coordinates")
            if not isinstance(rings, list) or not rings or not isinstance(rings[0], list):
                raise FarmError(f"{label}: boundary polygon has no exterior ring")
            ring = [_as_geopoint(c, label) for c in rings[0]]
            if len(ring) > 1 and ring[0] == ring[-1]:
                ring = ring[:-1]
            if len(set(ring)) < 3:
                raise FarmError(f"{label}: boundary needs at least 3 distinct vertices")
            boundary = ring
        elif role == "deploy":
            if gtype != "Point":
                raise FarmError(f"{label}: deploy point must be a Point, got {gtype!r}")
            if deploy is not None:
                raise FarmError(f"{label}: second deploy feature")
            deploy = _as_geopoint(geom.get("coordinates"), label)
        elif gtype == "Point" and role in (None, "tree"):
            tid = props.get("id", feat.get("id"))
            if tid is None or str(tid) == "":
                raise FarmError(f"{label}: tree Point without an 'id' property")
            tid = str(tid)
            if tid in seen:
                raise FarmError(f"{label}: duplicate tree id {tid!r} (first seen at {seen[tid]})")
            seen[tid] = f"feature[{i}]"
            attrs = {k: _attr_string(v) for k, v in props.items() if k not in ("id", "role")}
            trees.append((label, TreeRecord(tid, _as_geopoint(geom.get("coordinates"), label), attrs)))

    if boundary is None:
        raise FarmError("missing boundary: no Polygon feature with role='boundary'")
    if deploy is None:
        raise FarmError("missing deploy point: no Point feature with role='deploy'")

    origin = _centroid(boundary)
    local_ring = [_project(origin, p.lat, p.lon) for p in boundary]
    if not LinearRing(local_ring).is_simple:
        raise FarmError("boundary polygon is self-intersecting")
    poly = Polygon(local_ring)

    def inside(p: GeoPoint) -> bool:
        return poly.distance(Point(_project(origin, p.lat, p.lon))) <= ON_EDGE_TOL_M

    for label, t in trees:
        if not inside(t.position):
            raise FarmError(f"{label}: tree {t.id!r} lies outside the boundary")
    if not inside(deploy):
        raise FarmError("deploy point lies outside the boundary")

    return FarmMap(tuple(t for _, t in trees), tuple(boundary), deploy, origin)


def load_farm_file(path) -> FarmMap:
    with open(path, encoding="utf-8") as fh:
        return load_farm(fh.read())


# --------------------------------------------------------------------------
# queries
# --------------------------------------------------------------------------


def trees_in_half(farm: FarmMap, direction: str) -> set[str]:
    """Tree ids in the named half of the boundary's bounding box.

    Trees on the midline belong to both halves.
    """
    direction = direction.lower()
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    xy = boundary_xy(farm)
    axis = 1 if direction in ("north", "south") else 0
    mid = (xy[:, axis].min() + xy[:, axis].max()) / 2.0
    sign = 1.0 if direction in ("north", "east") else -1.0
    out = set()
    for t in farm.trees:
        v = to_local(farm, t.position)[axis]
        if sign * (v - mid) >= -ON_EDGE_TOL_M:
            out.add(t.id)
    return out


def convex_hull(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Andrew's monotone chain; CCW, collinear points dropped."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def min_area_rectangle(points) -> np.ndarray:
    """Minimum-area enclosing rectangle.

    One side of the optimum lies along a convex-hull edge, so every edge
    direction is tried with all hull vertices projected at once. Returns the
    4 corners as a (4, 2) array in CCW order. Raises ``ValueError`` when the
    points are collinear.
    """
    hull = np.array(convex_hull(points), dtype=float)
    if len(hull) < 3:
        raise ValueError("degenerate point set: all points collinear")
    edges = np.roll(hull, -1, axis=0) - hull
    U = edges / np.hypot(edges[:, 0], edges[:, 1])[:, None]
    N = np.stack([-U[:, 1], U[:, 0]], axis=1)
    pu, pn = hull @ U.T, hull @ N.T  # [vertex, edge]
    u_min, u_max = pu.min(axis=0), pu.max(axis=0)
    n_min, n_max = pn.min(axis=0), pn.max(axis=0)
    area = (u_max - u_min) * (n_max - n_min)
    k = int(np.argmin(area))
    u, n = U[k], N[k]
    return np.array([
        u * u_min[k] + n * n_min[k],
        u * u_max[k] + n * n_min[k],
        u * u_max[k] + n * n_max[k],
        u * u_min[k] + n * n_max[k],
    ])


# CCW compass order starting at NE; used to label rectangle corners.
_CCW_LABELS = ("NE", "NW", "SW", "SE")
_CCW_ANGLES = np.radians([45.0, 135.0, -135.0, -45.0])


def label_corners(corners_ccw: np.ndarray) -> dict[str, np.ndarray]:
    c = corners_ccw.mean(axis=0)
    ang = np.arctan2(corners_ccw[:, 1] - c[1], corners_ccw[:, 0] - c[0])
    best = None
    for shift in range(4):
        diff = ang[[(shift + i) % 4 for i in range(4)]] - _CCW_ANGLES
        cost = float(np.abs(np.angle(np.exp(1j * diff))).sum())
        if best is None or cost < best[0] - 1e-12:
            best = (cost, shift)
    shift = best[1]
    return {lab: corners_ccw[(shift + i) % 4] for i, lab in enumerate(_CCW_LABELS)}


def boundary_corners_local(farm: FarmMap) -> list[LocalXY]:
    """Corners of the boundary's minimum-area rectangle as NW, NE, SE, SW."""
    rect = min_area_rectangle(boundary_xy(farm))
    labeled = label_corners(rect)
    return [LocalXY(float(labeled[k][0]), float(labeled[k][1])) for k in ("NW", "NE", "SE", "SW")]


def boundary_corners(farm: FarmMap) -> list[GeoPoint]:
    return [from_local(farm, xy) for xy in boundary_corners_local(farm)]


def nearest_trees(farm: FarmMap, origin: GeoPoint, k: int, exclude: Iterable[str] = ()) -> list[str]:
    """``k`` closest trees to ``origin``; ties go to the smaller id.

    Distances are compared at micrometre resolution so that projection
    round-off does not decide ties.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    excluded = set(exclude)
    here = to_local(farm, origin)
    ranked = sorted(
        (round(local_distance(here, to_local(farm, t.position)), 6), t.id)
        for t in farm.trees
        if t.id not in excluded
    )
    if k > len(ranked):
        raise ValueError(f"asked for {k} trees but only {len(ranked)} are available")
    return [tid for _, tid in ranked[:k]]
