import json
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from facadeseg import geo
from facadeseg.geo import (
    FootprintPolygon,
    GeometryError,
    Photosphere,
    WallQuad,
    WallSegment,
)
from facadeseg.imaging import SingularHomographyError

coord = st.floats(-200, 200, allow_nan=False)


def square_with_notch():
    # a 20 m square whose south edge has a 0.5 m deep, 1 m wide notch
    return FootprintPolygon("b1", [(0, 0), (9.5, 0), (9.5, 0.5), (10.5, 0.5), (10.5, 0), (20, 0), (20, 20), (0, 20)])


def pano(h=128, w=256, fill=None):
    if fill is not None:
        return np.full((h, w, 3), fill, dtype=np.uint8)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = np.arange(w, dtype=np.uint8)[None, :]
    img[..., 1] = np.arange(h, dtype=np.uint8)[:, None]
    return img


def oracle_uv(point, center, heading, h, w):
    # rotate into the camera frame, then read angles off the unit sphere
    dx, dy, dz = np.subtract(point, center)
    c, s = math.cos(heading), math.sin(heading)
    fx, fy = dx * c - dy * s, dx * s + dy * c  # camera-east, camera-north
    lon = math.atan2(fx, fy)
    lat = math.atan2(dz, math.hypot(fx, fy))
    return (lon / (2 * math.pi) + 0.5) * w, (0.5 - lat / math.pi) * h


def test_footprint_drops_closing_vertex():
    poly = FootprintPolygon("a", [(0, 0), (1, 0), (1, 1), (0, 0)])
    assert poly.ring == [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]


@pytest.mark.parametrize("ring", [[(0, 0), (1, 0)], [(0, 0), (0, 0), (1, 1), (2, 0)]])
def test_footprint_rejects_degenerate(ring):
    with pytest.raises(GeometryError):
        FootprintPolygon("bad", ring)


def test_notch_is_simplified_away():
    walls = geo.simplify_and_merge([square_with_notch()], tolerance=2.0)
    assert len(walls) == 4
    lengths = sorted(round(w.length, 9) for w in walls)
    assert lengths == [20.0] * 4


def test_zero_tolerance_keeps_every_edge():
    walls = geo.simplify_and_merge([square_with_notch()], tolerance=0)
    assert len(walls) == 8


def test_collinear_edges_merge():
    poly = FootprintPolygon("c", [(0, 0), (3, 0), (8, 0), (8, 4), (0, 4)])
    walls = geo.simplify_and_merge([poly], tolerance=0.01)
    assert any(math.isclose(w.length, 8.0) and w.p0[1] == w.p1[1] == 0 for w in walls)
    assert len(walls) == 4


def test_degenerate_ring_falls_back_to_longest_chord():
    sliver = FootprintPolygon("s", [(0, 0), (30, 0.1), (60, 0)])
    with pytest.warns(UserWarning, match="longest chord"):
        walls = geo.simplify_and_merge([sliver], tolerance=2.0)
    assert len(walls) == 1 and math.isclose(walls[0].length, 60.0)


def test_negative_tolerance_rejected():
    with pytest.raises(ValueError):
        geo.simplify_and_merge([square_with_notch()], tolerance=-1)


def test_hundred_metre_wall_splits_into_three():
    pieces = geo.subdivide_and_extend(WallSegment((0, 0), (100, 0)), max_len=40, extension=2)
    assert len(pieces) == 3
    for p in pieces:
        assert math.isclose(p.length, 100 / 3 + 4)
    assert math.isclose(pieces[0].p0[0], -2) and math.isclose(pieces[-1].p1[0], 102)


@given(coord, coord, coord, coord, st.floats(1, 60), st.floats(0, 5))
def test_subdivision_conserves_length(x0, y0, x1, y1, max_len, ext):
    assume(math.hypot(x1 - x0, y1 - y0) > 1e-3)
    seg = WallSegment((x0, y0), (x1, y1))
    pieces = geo.subdivide_and_extend(seg, max_len=max_len, extension=ext)
    n = len(pieces)
    assert n == max(1, math.ceil(seg.length / max_len - 1e-12))
    core = [p.length - 2 * ext for p in pieces]
    assert math.isclose(sum(core), seg.length, rel_tol=1e-9, abs_tol=1e-9)
    assert all(c <= max_len * (1 + 1e-9) + 1e-9 for c in core)
    ux, uy = seg.direction
    for p in pieces:
        # every piece stays on the original (infinite) line
        for q in (p.p0, p.p1):
            off = abs((q[0] - x0) * uy - (q[1] - y0) * ux)
            assert off < 1e-6 * (1 + seg.length)


def _ring_distance(p, ring):
    return min(geo.point_chord_distance(p, a, b) for a, b in zip(ring, ring[1:] + ring[:1]))


@given(st.integers(0, 2**31 - 1), st.integers(5, 30), st.floats(0.1, 5))
def test_simplification_stays_within_tolerance(seed, m, tol):
    r = np.random.default_rng(seed)
    ang = np.sort(r.uniform(0, 2 * np.pi, m))
    rad = r.uniform(10, 30, m)
    ring = [(float(a), float(b)) for a, b in zip(rad * np.cos(ang), rad * np.sin(ang))]
    assume(len(set(ring)) == m)
    simple = geo.simplify_ring(ring, tol)
    assert set(simple) <= set(ring)
    assert all(_ring_distance(p, simple) <= tol + 1e-9 for p in ring)


def test_wall_quad_grid_orientation():
    quad = WallQuad(WallSegment((0, 0), (1, 0)), height=0.5, mpp=0.25)
    assert quad.grid_shape == (2, 4)
    pts = quad.sample_points()
    assert pts[0, 0].tolist() == [0, 0, 0.5]
    assert pts[-1, -1].tolist() == [1, 0, 0]


def test_projection_cardinal_points():
    sphere = Photosphere("p", (0, 0, 0), 0.0, pano())
    u, v = geo.project_points(np.array([[0, 10, 0], [10, 0, 0], [0, 0, 10]]), sphere)
    assert (u[0], v[0]) == (128, 64)
    assert math.isclose(u[1], 192) and math.isclose(v[1], 64)
    assert math.isclose(v[2], 0)


@given(st.tuples(coord, coord, st.floats(-20, 60)), st.floats(0, 2 * math.pi))
def test_projection_matches_rotation_oracle(point, heading):
    center = (1.0, -2.0, 2.5)
    assume(math.dist(point, center) > 1e-3)
    sphere = Photosphere("p", center, heading, pano())
    u, v = geo.project_points(np.array([point]), sphere)
    ou, ov = oracle_uv(point, center, heading, 128, 256)
    du = abs(u[0] - ou)
    assert min(du, 256 - du) < 0.5 and abs(v[0] - ov) < 0.5


def test_extracted_pixels_land_on_oracle_coordinates():
    # the panorama encodes its own column and row, so every extracted pixel
    # reveals where its ray hit
    sphere = Photosphere("p", (5, -10, 2.5), 0.3, pano())
    quad = WallQuad(WallSegment((0, 0), (10, 0)), height=8, mpp=0.5, id="q")
    out = geo.extract_facade_image(quad, sphere)
    assert out.pixels.shape == (16, 20, 3)
    pts = quad.sample_points()
    for r in range(16):
        for c in range(20):
            ou, ov = oracle_uv(pts[r, c], sphere.center, sphere.heading, 128, 256)
            assert abs(out.pixels[r, c, 0] + 0.5 - ou) <= 1.0
            assert abs(out.pixels[r, c, 1] + 0.5 - ov) <= 1.0


def test_extraction_is_deterministic():
    sphere = Photosphere("p", (5, -10, 2.5), 1.0, np.random.default_rng(0).integers(0, 255, (64, 128, 3), dtype=np.uint8))
    quad = WallQuad(WallSegment((0, 0), (6, 0)), height=4, mpp=0.1, id="q")
    a = geo.extract_facade_image(quad, sphere)
    b = geo.extract_facade_image(quad, sphere)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.sidecar() == {"quad_id": "q", "photosphere_id": "p", "mpp": 0.1, "width": 60, "height": 40}


def test_centre_on_wall_line_rejected():
    sphere = Photosphere("p", (5, 0, 2.5), 0.0, pano())
    quad = WallQuad(WallSegment((0, 0), (10, 0)), height=4, mpp=0.5)
    with pytest.raises(GeometryError, match="wall plane"):
        geo.extract_facade_image(quad, sphere)


def test_constant_panorama_gives_constant_facade():
    sphere = Photosphere("p", (3, -7, 2.5), 2.0, pano(fill=(10, 200, 30)))
    quad = WallQuad(WallSegment((0, 0), (10, 0)), height=10, mpp=0.25)
    out = geo.extract_facade_image(quad, sphere)
    assert (out.pixels == np.array([10, 200, 30], dtype=np.uint8)).all()


def _facade(img):
    return geo.FacadeImage(img, 0.1, "q", "p")


def test_rectification_identity_and_translation():
    img = np.random.default_rng(0).integers(0, 255, (12, 16, 3), dtype=np.uint8)
    same = geo.apply_rectification(_facade(img), np.eye(3))
    assert np.array_equal(same.pixels, img) and same.valid.all()
    shift = np.array([[1, 0, 3], [0, 1, 2], [0, 0, 1]], dtype=float)
    moved = geo.apply_rectification(_facade(img), shift)
    assert np.array_equal(moved.pixels[2:, 3:], img[:-2, :-3])
    assert not moved.valid[:2].any() and not moved.valid[:, :3].any()


def test_rectification_round_trip_interior():
    img = np.random.default_rng(1).integers(0, 255, (40, 40, 3), dtype=np.uint8)
    hmat = np.array([[1.0, 0.05, 1.0], [0.02, 1.0, -0.5], [0.0005, 0.0, 1.0]])
    there = geo.apply_rectification(_facade(img), hmat)
    back = geo.apply_rectification(there, np.linalg.inv(hmat))
    inner = back.valid.copy()
    inner[:4], inner[-4:], inner[:, :4], inner[:, -4:] = False, False, False, False
    err = np.abs(back.pixels.astype(int) - img.astype(int))[inner]
    assert np.median(err) <= 40


def test_singular_homography_rejected():
    with pytest.raises(SingularHomographyError):
        geo.apply_rectification(_facade(np.zeros((4, 4, 3), np.uint8)), np.zeros((3, 3)))


def test_load_footprints(tmp_path):
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "id": "a", "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [5, 0], [5, 5], [0, 0]]]}},
            {
                "type": "Feature",
                "properties": {"id": "m"},
                "geometry": {
                    "type": "MultiPolygon",
                    "coordinates": [[[[0, 0], [1, 0], [1, 1]]], [[[3, 3], [4, 3], [4, 4]]]],
                },
            },
        ],
    }
    path = tmp_path / "fp.geojson"
    path.write_text(json.dumps(doc))
    polys = geo.load_footprints(path)
    assert [p.id for p in polys] == ["a", "m.0", "m.1"]
    doc["features"][0].pop("id")
    path.write_text(json.dumps(doc))
    with pytest.raises(GeometryError, match="no id"):
        geo.load_footprints(path)


def test_manifest_requires_heading():
    rec = {"id": "s1", "image_path": "s1.jpg", "x": 0, "y": 0}
    with pytest.raises(GeometryError, match="heading_deg"):
        geo.parse_sphere_manifest(rec)


def test_manifest_shapes_and_defaults(tmp_path):
    rec = {"id": 7, "image_path": "s.jpg", "x": 1, "y": 2, "heading_deg": 90}
    for doc in (rec, [rec], {"photospheres": [rec]}):
        (out,) = geo.parse_sphere_manifest(doc, base_dir=str(tmp_path))
        assert out["id"] == "7" and out["z"] == 2.5
        assert out["image_path"] == str(tmp_path / "s.jpg")
    sphere = geo.sphere_from_record(out, pano())
    assert math.isclose(sphere.heading, math.pi / 2)


def test_segment_distance():
    seg = WallSegment((0, 0), (10, 0))
    assert geo.segment_distance(seg, (5, 3)) == 3
    assert math.isclose(geo.segment_distance(seg, (13, 4)), 5)
