import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_rasterize, brute_window_any
from scarseg.raster import GeoTransform, RasterError, Window
from scarseg.vector import (
    Mask,
    Polygon,
    PolygonError,
    PolygonSet,
    load_mask,
    load_polygons,
    mask_intersects_window,
    polygon_area,
    rasterize,
    save_mask,
)

T = GeoTransform(0.0, 0.0, 5.0, 5.0)


def square(x0, y0, side):
    return [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side), (x0, y0)]


def rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]


def write_geojson(path, geometries):
    feats = [{"type": "Feature", "properties": {"crs_label": "local"}, "geometry": g} for g in geometries]
    path.write_text(json.dumps({"type": "FeatureCollection", "features": feats}))


# -- loading ------------------------------------------------------------------


def test_load_single_square(tmp_path):
    write_geojson(tmp_path / "a.geojson", [{"type": "Polygon", "coordinates": [square(0, 0, 1)]}])
    ps = load_polygons(tmp_path / "a.geojson")
    assert len(ps) == 1
    assert ps.crs_label == "local"


def test_multipolygon_flattened(tmp_path):
    parts = [[square(i * 10, 0, 5)] for i in range(3)]
    write_geojson(tmp_path / "m.geojson", [{"type": "MultiPolygon", "coordinates": parts}])
    assert len(load_polygons(tmp_path / "m.geojson")) == 3


def test_load_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(PolygonError, match="malformed"):
        load_polygons(tmp_path / "bad.json")
    write_geojson(tmp_path / "open.json", [{"type": "Polygon", "coordinates": [square(0, 0, 1)[:-1]]}])
    with pytest.raises(PolygonError, match="not closed"):
        load_polygons(tmp_path / "open.json")
    write_geojson(tmp_path / "pt.json", [{"type": "Point", "coordinates": [0, 0]}])
    with pytest.raises(PolygonError, match="unsupported geometry"):
        load_polygons(tmp_path / "pt.json")
    write_geojson(tmp_path / "flat.json", [{"type": "Polygon", "coordinates": [[(0, 0), (1, 1), (2, 2), (0, 0)]]}])
    with pytest.raises(PolygonError, match="degenerate"):
        load_polygons(tmp_path / "flat.json")


def test_geojson_roundtrip(tmp_path):
    ps = PolygonSet([Polygon(square(0, 0, 10), [square(2, 2, 3)]), Polygon(square(20, 20, 4))], "utm")
    ps.save(tmp_path / "p.geojson")
    back = load_polygons(tmp_path / "p.geojson")
    assert [p.rings for p in back.polygons] == [p.rings for p in ps.polygons]
    assert back.crs_label == "utm"


def test_bbox_encloses_vertices():
    p = Polygon([(3, -1), (7, 2), (1, 5), (3, -1)])
    ps = PolygonSet([p])
    xmin, ymin, xmax, ymax = ps.bboxes[0]
    assert all(xmin <= x <= xmax and ymin <= y <= ymax for x, y in p.exterior)


# -- area ---------------------------------------------------------------------


def test_area_examples():
    assert polygon_area(Polygon(square(0, 0, 1))) == 1.0
    assert polygon_area(Polygon(square(0, 0, 1), [square(0.25, 0.25, 0.5)])) == 0.75
    assert polygon_area(Polygon([(0, 0), (1, 1), (2, 2), (0, 0)])) == 0.0


def test_area_orientation_free():
    ring = square(0, 0, 3)
    assert polygon_area(Polygon(ring)) == polygon_area(Polygon(ring[::-1])) == 9.0


# -- rasterization ------------------------------------------------------------


def test_rasterize_empty_and_outside():
    assert rasterize(PolygonSet([]), T, 4, 4).data.sum() == 0
    far = PolygonSet([Polygon(square(1000, 1000, 10))])
    assert rasterize(far, T, 4, 4).data.sum() == 0


def test_rasterize_aligned_square():
    # 10 m square covering pixel rows/cols 0..1 of a 5 m north-up grid
    ps = PolygonSet([Polygon(rect(0, -10, 10, 0))])
    m = rasterize(ps, T, 4, 4)
    assert m.data.sum() == 4
    np.testing.assert_array_equal(m.data[:2, :2], 1)


def test_rasterize_hole_subtracts():
    ps = PolygonSet([Polygon(rect(0, -20, 20, 0), [rect(5, -15, 15, -5)])])
    m = rasterize(ps, T, 4, 4)
    assert m.data.sum() == 12
    np.testing.assert_array_equal(m.data[1:3, 1:3], 0)


def test_adjacent_squares_no_double_count():
    a = Polygon(rect(0, -10, 10, 0))
    b = Polygon(rect(10, -10, 20, 0))
    ma = rasterize(PolygonSet([a]), T, 4, 6).data
    mb = rasterize(PolygonSet([b]), T, 4, 6).data
    assert not (ma & mb).any()
    assert ma.sum() + mb.sum() == 8


ring_pts = st.lists(st.tuples(st.floats(-5, 45), st.floats(-45, 5)), min_size=3, max_size=7)


@given(st.lists(ring_pts, min_size=1, max_size=3))
def test_rasterize_matches_point_in_polygon_oracle(rings):
    polys = []
    for pts in rings:
        ring = [*pts, pts[0]]
        polys.append(Polygon(ring))
    ps = PolygonSet(polys)
    got = rasterize(ps, T, 8, 8).data
    want = brute_rasterize(polys, 0.0, 0.0, 5.0, 8, 8)
    np.testing.assert_array_equal(got, want)


@given(st.integers(0, 10), st.integers(0, 10), st.integers(1, 8), st.integers(1, 8))
def test_rectangle_area_exact(c0, r0, w, h):
    p = Polygon(rect(c0 * 5.0, -(r0 + h) * 5.0, (c0 + w) * 5.0, -r0 * 5.0))
    m = rasterize(PolygonSet([p]), T, 20, 20)
    assert m.data.sum() * 25.0 == polygon_area(p)


@given(ring_pts)
def test_duplicate_polygon_idempotent(pts):
    p = Polygon([*pts, pts[0]])
    one = rasterize(PolygonSet([p]), T, 8, 8).data
    two = rasterize(PolygonSet([p, p]), T, 8, 8).data
    np.testing.assert_array_equal(one, two)


@given(st.lists(st.tuples(st.floats(10, 30), st.floats(-30, -10)), min_size=3, max_size=6),
       st.integers(-1, 1), st.integers(-1, 1))
def test_translation_by_whole_pixel(pts, dc, dr):
    p = Polygon([*pts, pts[0]])
    base = rasterize(PolygonSet([p]), T, 10, 10).data
    moved = rasterize(PolygonSet([p.translated(dc * 5.0, -dr * 5.0)]), T, 10, 10).data
    np.testing.assert_array_equal(np.roll(base, (dr, dc), axis=(0, 1)), moved)


# -- mask ---------------------------------------------------------------------


def test_mask_values_checked():
    with pytest.raises(RasterError):
        Mask(np.array([[0, 2]]), T)


def test_mask_roundtrip(tmp_path, rng):
    m = Mask((rng.random((7, 9)) > 0.5).astype(np.uint8), GeoTransform(10, 20, 5, 5))
    save_mask(m, tmp_path / "m")
    assert load_mask(tmp_path / "m") == m


def test_intersects_examples():
    data = np.zeros((8, 8), np.uint8)
    m0 = Mask(data, T)
    assert not mask_intersects_window(m0, Window(0, 0, 8, 8))
    data = data.copy()
    data[3, 4] = 1
    m1 = Mask(data, T)
    assert mask_intersects_window(m1, Window(4, 3, 1, 1))
    assert not mask_intersects_window(m1, Window(5, 3, 3, 3))
    with pytest.raises(RasterError):
        mask_intersects_window(m1, Window(6, 6, 3, 3))


@given(st.integers(0, 2**32 - 1))
def test_intersects_matches_scan(seed):
    rng = np.random.default_rng(seed)
    data = (rng.random((12, 12)) < 0.03).astype(np.uint8)
    m = Mask(data, T)
    for _ in range(20):
        w, h = rng.integers(1, 7, 2)
        col, row = rng.integers(0, 12 - w + 1), rng.integers(0, 12 - h + 1)
        win = Window(int(col), int(row), int(w), int(h))
        assert mask_intersects_window(m, win) == brute_window_any(data, col, row, w, h)
