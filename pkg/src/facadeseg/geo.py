"""Facade images from building footprints and equirectangular photospheres.

Footprint rings are simplified and merged into wall segments, walls are cut
into pieces of bounded length and extruded into vertical quads, and every
grid sample on a quad is ray-cast back into the panorama.

All coordinates are planar metres: x east, y north, z up (ground at 0).
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .imaging import bilinear_sample, to_uint8, warp_image

DEFAULT_TOLERANCE = 2.0
DEFAULT_MERGE_ANGLE_DEG = 2.0
DEFAULT_WALL_HEIGHT = 40.0
DEFAULT_PIECE_LENGTH = 40.0
DEFAULT_EXTENSION = 2.0
DEFAULT_MPP = 0.025
DEFAULT_CAMERA_HEIGHT = 2.5
DEFAULT_SPHERE_RADIUS = 20.0


class GeometryError(ValueError):
    pass


@dataclass
class FootprintPolygon:
    id: str
    ring: list

    def __post_init__(self):
        ring = [(float(x), float(y)) for x, y in self.ring]
        if len(ring) > 1 and ring[0] == ring[-1]:
            ring = ring[:-1]
        if len(ring) < 3:
            raise GeometryError(f"footprint {self.id!r} has fewer than 3 distinct vertices")
        for a, b in zip(ring, ring[1:] + ring[:1]):
            if a == b:
                raise GeometryError(f"footprint {self.id!r} repeats vertex {a}")
        self.ring = ring


@dataclass
class WallSegment:
    p0: tuple
    p1: tuple
    source_footprint: str = ""

    def __post_init__(self):
        self.p0 = (float(self.p0[0]), float(self.p0[1]))
        self.p1 = (float(self.p1[0]), float(self.p1[1]))
        if self.length <= 0:
            raise GeometryError("wall segment has zero length")

    @property
    def length(self):
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    @property
    def direction(self):
        n = self.length
        return ((self.p1[0] - self.p0[0]) / n, (self.p1[1] - self.p0[1]) / n)


@dataclass
class WallQuad:
    base: WallSegment
    height: float = DEFAULT_WALL_HEIGHT
    mpp: float = DEFAULT_MPP
    id: str = ""

    def __post_init__(self):
        if self.height <= 0 or self.mpp <= 0:
            raise GeometryError("wall quad needs positive height and mpp")

    @property
    def grid_shape(self):
        rows = max(1, int(round(self.height / self.mpp)))
        cols = max(1, int(round(self.base.length / self.mpp)))
        return rows, cols

    def sample_points(self):
        """3D grid points, (rows, cols, 3). Row 0 is the wall top, column 0 is p0."""
        rows, cols = self.grid_shape
        t = np.linspace(0.0, 1.0, cols) if cols > 1 else np.zeros(1)
        z = np.linspace(self.height, 0.0, rows) if rows > 1 else np.array([self.height])
        (x0, y0), (x1, y1) = self.base.p0, self.base.p1
        px = x0 + t * (x1 - x0)
        py = y0 + t * (y1 - y0)
        pts = np.empty((rows, cols, 3))
        pts[..., 0] = px[None, :]
        pts[..., 1] = py[None, :]
        pts[..., 2] = z[:, None]
        return pts


@dataclass
class Photosphere:
    id: str
    center: tuple
    heading: float
    image: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.heading = float(self.heading) % (2 * math.pi)
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[1] < 2 or img.shape[0] < 1:
            raise GeometryError("photosphere image must be an (H, W>=2, 3) raster")
        self.image = img


@dataclass
class FacadeImage:
    pixels: np.ndarray = field(repr=False)
    mpp: float
    quad_id: str
    photosphere_id: str
    valid: np.ndarray | None = field(default=None, repr=False)

    def sidecar(self):
        h, w = self.pixels.shape[:2]
        return {
            "quad_id": self.quad_id,
            "photosphere_id": self.photosphere_id,
            "mpp": self.mpp,
            "width": int(w),
            "height": int(h),
        }


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------

def point_chord_distance(p, a, b):
    """Distance from point p to the segment a-b."""
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / denom))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _rdp(points, tol):
    """Douglas-Peucker on an open chain; endpoints are always kept."""
    keep = [False] * len(points)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        best, best_k = -1.0, -1
        for k in range(i + 1, j):
            d = point_chord_distance(points[k], points[i], points[j])
            if d > best:
                best, best_k = d, k
        if best_k >= 0 and best > tol:
            keep[best_k] = True
            stack.append((i, best_k))
            stack.append((best_k, j))
    return [p for p, k in zip(points, keep) if k]


def simplify_ring(ring, tolerance):
    """Douglas-Peucker on a closed ring anchored at its two most distant vertices."""
    n = len(ring)
    best, ia, ib = -1.0, 0, 1
    for i in range(n):
        for j in range(i + 1, n):
            d = math.dist(ring[i], ring[j])
            if d > best:
                best, ia, ib = d, i, j
    chain_a = ring[ia:ib + 1]
    chain_b = ring[ib:] + ring[:ia + 1]
    left = _rdp(chain_a, tolerance)
    right = _rdp(chain_b, tolerance)
    out = left[:-1] + right[:-1]
    # rotate back so the earliest surviving input vertex leads
    order = {v: k for k, v in enumerate(ring)}
    start = min(range(len(out)), key=lambda k: order[out[k]])
    return out[start:] + out[:start]


def _direction_change_deg(a, b, c):
    v1 = (b[0] - a[0], b[1] - a[1])
    v2 = (c[0] - b[0], c[1] - b[1])
    ang = math.atan2(v1[0] * v2[1] - v1[1] * v2[0], v1[0] * v2[0] + v1[1] * v2[1])
    return abs(math.degrees(ang))


def merge_collinear(ring, angle_deg=DEFAULT_MERGE_ANGLE_DEG):
    """Drop vertices where consecutive edges turn by less than ``angle_deg``."""
    ring = list(ring)
    changed = True
    while changed and len(ring) > 3:
        changed = False
        for k in range(len(ring)):
            a, b, c = ring[k - 1], ring[k], ring[(k + 1) % len(ring)]
            if _direction_change_deg(a, b, c) < angle_deg:
                del ring[k]
                changed = True
                break
    return ring


def _edges(ring, fid):
    return [WallSegment(a, b, fid) for a, b in zip(ring, ring[1:] + ring[:1])]


def simplify_and_merge(polygons, tolerance=DEFAULT_TOLERANCE, angle_deg=DEFAULT_MERGE_ANGLE_DEG):
    """Wall segments of the simplified, collinear-merged footprint outlines.

    With ``tolerance == 0`` the original edges are returned unchanged. A
    ring that collapses below three vertices yields its longest chord and a
    ``UserWarning``.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    walls = []
    for poly in polygons:
        if tolerance == 0:
            walls.extend(_edges(poly.ring, poly.id))
            continue
        ring = merge_collinear(simplify_ring(poly.ring, tolerance), angle_deg)
        if len(ring) < 3:
            a, b = max(
                ((p, q) for i, p in enumerate(poly.ring) for q in poly.ring[i + 1:]),
                key=lambda pq: math.dist(*pq),
            )
            warnings.warn(f"footprint {poly.id!r} degenerated to {len(ring)} vertices; using its longest chord")
            walls.append(WallSegment(a, b, poly.id))
            continue
        walls.extend(_edges(ring, poly.id))
    return walls


def subdivide_and_extend(segment, max_len=DEFAULT_PIECE_LENGTH, extension=DEFAULT_EXTENSION):
    """Split into ceil(length / max_len) equal pieces, each extended at both ends."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    if extension < 0:
        raise ValueError("extension must be >= 0")
    length = segment.length
    n = max(1, math.ceil(length / max_len - 1e-12))
    (x0, y0), (x1, y1) = segment.p0, segment.p1
    ux, uy = segment.direction
    pieces = []
    for i in range(n):
        t0, t1 = i / n, (i + 1) / n
        a = (x0 + t0 * (x1 - x0) - extension * ux, y0 + t0 * (y1 - y0) - extension * uy)
        b = (x0 + t1 * (x1 - x0) + extension * ux, y0 + t1 * (y1 - y0) + extension * uy)
        pieces.append(WallSegment(a, b, segment.source_footprint))
    return pieces


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def project_points(points, sphere):
    """Equirectangular (u, v) pixel coordinates of 3D points seen from ``sphere``.

    u = W * (lon + pi) / (2 pi), v = H * (pi/2 - lat) / pi, where longitude
    is the azimuth from north (clockwise) minus the sphere heading, wrapped
    to (-pi, pi].
    """
    pts = np.asarray(points, dtype=np.float64)
    d = pts - np.asarray(sphere.center)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm == 0):
        raise GeometryError("sample point coincides with the photosphere centre")
    d = d / norm[..., None]
    lon = np.arctan2(d[..., 0], d[..., 1]) - sphere.heading
    lon = np.pi - np.mod(np.pi - lon, 2 * np.pi)  # wrap to (-pi, pi]
    lat = np.arcsin(np.clip(d[..., 2], -1.0, 1.0))
    h, w = sphere.image.shape[:2]
    u = w * (lon + np.pi) / (2 * np.pi)
    v = h * (np.pi / 2 - lat) / np.pi
    return u, v


def extract_facade_image(quad, sphere):
    """Ray-cast every quad grid sample into the panorama (bilinear sampling)."""
    pts = quad.sample_points()
    (x0, y0), (x1, y1) = quad.base.p0, quad.base.p1
    cx, cy, _ = sphere.center
    side = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
    if abs(side) < 1e-12:
        raise GeometryError("photosphere centre lies on the wall plane")
    u, v = project_points(pts, sphere)
    # continuous (u, v) puts pixel i's centre at i + 0.5
    vals = bilinear_sample(sphere.image, u - 0.5, v - 0.5, wrap_x=True)
    return FacadeImage(to_uint8(vals), quad.mpp, quad.id, sphere.id)


def apply_rectification(image, homography):
    """Warp a facade image by an externally supplied homography."""
    pixels, valid = warp_image(image.pixels, homography)
    return FacadeImage(pixels, image.mpp, image.quad_id, image.photosphere_id, valid)


def segment_distance(segment, point):
    return point_chord_distance(point, segment.p0, segment.p1)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_footprints(path):
    """Polygons from a GeoJSON FeatureCollection (planar metre coordinates)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise GeometryError(f"{path}: expected a GeoJSON FeatureCollection")
    polys = []
    for k, feat in enumerate(doc.get("features", [])):
        fid = feat.get("id", (feat.get("properties") or {}).get("id"))
        if fid is None:
            raise GeometryError(f"{path}: feature {k} has no id")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            rings = [geom["coordinates"][0]]
        elif geom.get("type") == "MultiPolygon":
            rings = [poly[0] for poly in geom["coordinates"]]
        else:
            raise GeometryError(f"{path}: feature {fid!r} is not a Polygon")
        for j, ring in enumerate(rings):
            pid = str(fid) if len(rings) == 1 else f"{fid}.{j}"
            polys.append(FootprintPolygon(pid, [tuple(p[:2]) for p in ring]))
    return polys


SPHERE_FIELDS = ("id", "image_path", "x", "y", "heading_deg")


def parse_sphere_manifest(doc, base_dir="."):
    """Photosphere records from a manifest (object, list, or {"photospheres": [...]}).

    Returns dicts with resolved ``image_path``; images are loaded lazily.
    """
    if isinstance(doc, dict) and "photospheres" in doc:
        doc = doc["photospheres"]
    if isinstance(doc, dict):
        doc = [doc]
    records = []
    for k, rec in enumerate(doc):
        for name in SPHERE_FIELDS:
            if name not in rec:
                raise GeometryError(f"photosphere manifest entry {k}: missing field {name!r}")
        path = rec["image_path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        records.append(
            {
                "id": str(rec["id"]),
                "image_path": path,
                "x": float(rec["x"]),
                "y": float(rec["y"]),
                "z": float(rec.get("z", DEFAULT_CAMERA_HEIGHT)),
                "heading_deg": float(rec["heading_deg"]),
            }
        )
    return records


def sphere_from_record(rec, image):
    return Photosphere(rec["id"], (rec["x"], rec["y"], rec["z"]), math.radians(rec["heading_deg"]), image)
