"""Landslide polygons and their rasterization into binary masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import GeoTransform, RasterError, Window, header_transform, read_bundle, write_bundle

DEGENERATE_AREA = 1e-9


class PolygonError(ValueError):
    pass


Ring = list[tuple[float, float]]


def _check_ring(ring: Ring) -> Ring:
    ring = [(float(x), float(y)) for x, y in ring]
    if len(ring) < 4:
        raise PolygonError(f"ring needs at least 4 points, got {len(ring)}")
    if ring[0] != ring[-1]:
        raise PolygonError("ring is not closed (first point != last point)")
    return ring


def ring_signed_area(ring: Ring) -> float:
    a = np.asarray(ring, dtype=np.float64)
    x, y = a[:, 0], a[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


@dataclass(frozen=True)
class Polygon:
    exterior: Ring
    holes: list[Ring] = field(default_factory=list)

    def __post_init__(self):
        object.__setattr__(self, "exterior", _check_ring(self.exterior))
        object.__setattr__(self, "holes", [_check_ring(h) for h in self.holes])

    @property
    def rings(self) -> list[Ring]:
        return [self.exterior, *self.holes]

    def bbox(self) -> tuple[float, float, float, float]:
        a = np.asarray(self.exterior)
        return float(a[:, 0].min()), float(a[:, 1].min()), float(a[:, 0].max()), float(a[:, 1].max())

    def translated(self, dx: float, dy: float) -> Polygon:
        def move(r):
            return [(x + dx, y + dy) for x, y in r]
        return Polygon(move(self.exterior), [move(h) for h in self.holes])


def polygon_area(p: Polygon) -> float:
    """Shoelace area of the exterior minus the holes, in squared map units."""
    area = abs(ring_signed_area(p.exterior)) - sum(abs(ring_signed_area(h)) for h in p.holes)
    return max(area, 0.0)


@dataclass
class PolygonSet:
    polygons: list[Polygon]
    crs_label: str = ""
    bboxes: list[tuple[float, float, float, float]] = field(init=False)

    def __post_init__(self):
        self.bboxes = [p.bbox() for p in self.polygons]

    def __len__(self):
        return len(self.polygons)

    def to_geojson(self) -> dict:
        feats = []
        for p in self.polygons:
            coords = [[list(pt) for pt in r] for r in p.rings]
            feats.append({
                "type": "Feature",
                "properties": {"crs_label": self.crs_label},
                "geometry": {"type": "Polygon", "coordinates": coords},
            })
        return {"type": "FeatureCollection", "features": feats}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_geojson()))


def _geometry_polygons(geom: dict) -> list[Polygon]:
    gtype = geom.get("type") if isinstance(geom, dict) else None
    if gtype == "Polygon":
        parts = [geom["coordinates"]]
    elif gtype == "MultiPolygon":
        parts = geom["coordinates"]
    else:
        raise PolygonError(f"unsupported geometry type {gtype!r}")
    out = []
    for rings in parts:
        if not rings:
            raise PolygonError("polygon without rings")
        poly = Polygon(rings[0], list(rings[1:]))
        for r in poly.rings:
            if abs(ring_signed_area(r)) < DEGENERATE_AREA:
                raise PolygonError("degenerate ring (zero area)")
        out.append(poly)
    return out


def load_polygons(path) -> PolygonSet:
    """Read a GeoJSON FeatureCollection of Polygon/MultiPolygon features.

    MultiPolygons are split into their parts. Coordinates are taken as-is in
    the raster's projected units.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise PolygonError(f"malformed JSON in {path}: {e}") from e
    if doc.get("type") == "FeatureCollection":
        features = doc.get("features", [])
    elif doc.get("type") == "Feature":
        features = [doc]
    else:
        features = [{"geometry": doc, "properties": {}}]
    polygons: list[Polygon] = []
    crs_label = ""
    for f in features:
        polygons.extend(_geometry_polygons(f.get("geometry")))
        crs_label = crs_label or (f.get("properties") or {}).get("crs_label", "")
    return PolygonSet(polygons, crs_label)


@dataclass(frozen=True, eq=False)
class Mask:
    data: np.ndarray
    transform: GeoTransform

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise RasterError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise RasterError("mask values must be 0 or 1")
        object.__setattr__(self, "data", arr.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def crop(self, w: Window) -> Mask:
        if not w.in_bounds(self.height, self.width):
            raise RasterError(f"window {w} out of bounds for {self.height}x{self.width} mask")
        return Mask(self.data[w.slices].copy(), self.transform.translated(w.col_off, w.row_off))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.transform == other.transform and np.array_equal(self.data, other.data)


def save_mask(mask: Mask, path) -> None:
    write_bundle(path, mask.data[None], mask.transform, "u8")


def load_mask(path) -> Mask:
    header, data = read_bundle(path)
    if header["dtype"] != "u8" or header["bands"] != 1:
        raise RasterError(f"expected a single-band u8 mask bundle, got {header['bands']}x{header['dtype']}")
    return Mask(data[0], header_transform(header))


def _fill_polygon(out: np.ndarray, poly: Polygon, t: GeoTransform) -> None:
    height, width = out.shape
    xmin, ymin, xmax, ymax = poly.bbox()
    r0 = max(0, math.floor((t.origin_y - ymax) / t.pixel_h - 0.5))
    r1 = min(height - 1, math.ceil((t.origin_y - ymin) / t.pixel_h - 0.5))
    if r0 > r1 or xmax < t.origin_x or xmin > t.origin_x + width * t.pixel_w:
        return
    edges = np.concatenate([
        np.hstack([np.asarray(r[:-1]), np.asarray(r[1:])]) for r in poly.rings
    ])
    x0, y0, x1, y1 = edges.T
    rows = np.arange(r0, r1 + 1)
    cy = t.origin_y - (rows + 0.5) * t.pixel_h
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    # half-open in y: an edge owns its upper endpoint, not its lower one
    hit = (lo[None, :] < cy[:, None]) & (cy[:, None] <= hi[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0[None, :] + (cy[:, None] - y0[None, :]) * (x1 - x0)[None, :] / (y1 - y0)[None, :]
    for i, r in enumerate(rows):
        xs = np.sort(xc[i, hit[i]])
        for a, b in zip(xs[0::2], xs[1::2]):
            # pixel centers with a <= cx < b
            c0 = max(0, math.ceil((a - t.origin_x) / t.pixel_w - 0.5))
            c1 = min(width, math.ceil((b - t.origin_x) / t.pixel_w - 0.5))
            if c1 > c0:
                out[r, c0:c1] = 1


def rasterize(ps: PolygonSet, t: GeoTransform, height: int, width: int) -> Mask:
    """Burn polygons into a 0/1 mask using the pixel-center, even-odd rule."""
    out = np.zeros((height, width), dtype=np.uint8)
    for poly in ps.polygons:
        _fill_polygon(out, poly, t)
    return Mask(out, t)


def mask_intersects_window(m: Mask, w: Window) -> bool:
    if not w.in_bounds(m.height, m.width):
        raise RasterError(f"window {w} out of bounds for {m.height}x{m.width} mask")
    return bool(m.data[w.slices].any())
