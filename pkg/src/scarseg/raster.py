"""Georeferenced multi-band rasters in a small JSON + raw-binary bundle format.

A bundle ``scene`` is two files: ``scene.json`` (header) and ``scene.bin``
(little-endian payload, band-sequential, row-major). Image rasters use
``"f32le"``; masks use ``"u8"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}
GRID_TOL = 1e-6


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float

    def __post_init__(self):
        if not (self.pixel_w > 0 and self.pixel_h > 0):
            raise RasterError(f"pixel size must be positive, got {self.pixel_w}x{self.pixel_h}")

    def translated(self, col_off: int, row_off: int) -> GeoTransform:
        return replace(
            self,
            origin_x=self.origin_x + col_off * self.pixel_w,
            origin_y=self.origin_y - row_off * self.pixel_h,
        )

    def almost_equal(self, other: GeoTransform, tol: float = GRID_TOL) -> bool:
        return all(
            abs(a - b) <= tol
            for a, b in zip(
                (self.origin_x, self.origin_y, self.pixel_w, self.pixel_h),
                (other.origin_x, other.origin_y, other.pixel_w, other.pixel_h),
            )
        )


def world_to_pixel(t: GeoTransform, x: float, y: float) -> tuple[int, int]:
    """Return the (col, row) of the pixel containing world point (x, y).

    Rows grow downward (y decreasing). Indices may be out of range.
    """
    col = math.floor((x - t.origin_x) / t.pixel_w)
    row = math.floor((t.origin_y - y) / t.pixel_h)
    return col, row


def pixel_to_world(t: GeoTransform, col: int, row: int) -> tuple[float, float]:
    """World coordinates of the center of pixel (col, row)."""
    return t.origin_x + (col + 0.5) * t.pixel_w, t.origin_y - (row + 0.5) * t.pixel_h


@dataclass(frozen=True)
class Window:
    col_off: int
    row_off: int
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise RasterError(f"window dims must be positive: {self}")

    def in_bounds(self, height: int, width: int) -> bool:
        return (
            self.col_off >= 0
            and self.row_off >= 0
            and self.col_off + self.width <= width
            and self.row_off + self.height <= height
        )

    @property
    def slices(self) -> tuple[slice, slice]:
        return (
            slice(self.row_off, self.row_off + self.height),
            slice(self.col_off, self.col_off + self.width),
        )

    def to_dict(self) -> dict:
        return {"col_off": self.col_off, "row_off": self.row_off, "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class Raster:
    """A (bands, height, width) float32 grid plus its geotransform.

    ``data`` is stored as a numpy array; it is treated as immutable.
    """

    data: np.ndarray
    transform: GeoTransform
    nodata: float | None = None
    crs: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise RasterError(f"raster data must be (bands, height, width), got {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        valid = arr if self.nodata is None else arr[arr != np.float32(self.nodata)]
        if not np.all(np.isfinite(valid)):
            raise RasterError("raster contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def full_window(self) -> Window:
        return Window(0, 0, self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.transform == other.transform
            and self.nodata == other.nodata
            and self.crs == other.crs
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


# -- bundle I/O ---------------------------------------------------------------


def bundle_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def write_bundle(path, array: np.ndarray, transform: GeoTransform, dtype: str,
                 nodata: float | None = None, crs: str = "", extra: dict | None = None) -> None:
    header_path, payload_path = bundle_paths(path)
    bands, height, width = array.shape
    header = {
        "bands": int(bands),
        "height": int(height),
        "width": int(width),
        "dtype": dtype,
        "origin_x": transform.origin_x,
        "origin_y": transform.origin_y,
        "pixel_w": transform.pixel_w,
        "pixel_h": transform.pixel_h,
        "nodata": nodata,
        "crs": crs,
    }
    if extra:
        header.update(extra)
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        payload_path.write_bytes(np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes())
        header_path.write_text(json.dumps(header, indent=2))
    except OSError as e:
        raise RasterError(f"cannot write raster bundle {header_path}: {e}") from e


def read_bundle(path) -> tuple[dict, np.ndarray]:
    header_path, payload_path = bundle_paths(path)
    if not header_path.exists() or not payload_path.exists():
        raise RasterError(f"missing raster bundle: {header_path} / {payload_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise RasterError(f"bad header {header_path}: {e}") from e
    dtype = header.get("dtype")
    if dtype not in DTYPES:
        raise RasterError(f"unsupported dtype {dtype!r}")
    shape = (int(header["bands"]), int(header["height"]), int(header["width"]))
    raw = payload_path.read_bytes()
    expected = math.prod(shape) * DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise RasterError(f"size mismatch: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).copy()
    return header, data


def header_transform(header: dict) -> GeoTransform:
    return GeoTransform(header["origin_x"], header["origin_y"], header["pixel_w"], header["pixel_h"])


def save_raster(raster: Raster, path) -> None:
    write_bundle(path, raster.data, raster.transform, "f32le", raster.nodata, raster.crs)


def load_raster(path) -> Raster:
    header, data = read_bundle(path)
    if header["dtype"] != "f32le":
        raise RasterError(f"expected an f32le image bundle, got {header['dtype']}")
    return Raster(data.astype(np.float32, copy=False), header_transform(header), header.get("nodata"),
                  header.get("crs", ""))


# -- grid operations ----------------------------------------------------------


def window_read(raster: Raster, w: Window) -> Raster:
    if not w.in_bounds(raster.height, raster.width):
        raise RasterError(f"window {w} out of bounds for {raster.height}x{raster.width} raster")
    rs, cs = w.slices
    return Raster(raster.data[:, rs, cs].copy(), raster.transform.translated(w.col_off, w.row_off),
                  raster.nodata, raster.crs)


def stack_bands(optical: Raster, dem: Raster) -> Raster:
    """Concatenate bands, optical first then DEM. Grids must match."""
    if (optical.height, optical.width) != (dem.height, dem.width):
        raise RasterError(
            f"grid mismatch: {optical.height}x{optical.width} vs {dem.height}x{dem.width}")
    if not optical.transform.almost_equal(dem.transform):
        raise RasterError(f"grid mismatch: transforms differ ({optical.transform} vs {dem.transform})")
    return Raster(np.concatenate([optical.data, dem.data], axis=0), optical.transform,
                  optical.nodata, optical.crs)


def resample_bilinear(src: Raster, target_pixel: float) -> Raster:
    """Resample to square ``target_pixel`` cells over the same world extent.

    Samples are anchored at pixel centers; the stencil is clamped at the
    borders. Output cells whose stencil touches nodata become nodata.
    """
    if not target_pixel > 0:
        raise RasterError(f"target pixel size must be positive, got {target_pixel}")
    t = src.transform
    out_w = math.ceil(src.width * t.pixel_w / target_pixel - 1e-9)
    out_h = math.ceil(src.height * t.pixel_h / target_pixel - 1e-9)

    # fractional source coordinates of output pixel centers
    fx = ((np.arange(out_w) + 0.5) * target_pixel) / t.pixel_w - 0.5
    fy = ((np.arange(out_h) + 0.5) * target_pixel) / t.pixel_h - 0.5
    fx = np.clip(fx, 0, src.width - 1)
    fy = np.clip(fy, 0, src.height - 1)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    x1 = np.minimum(x0 + 1, src.width - 1)
    y1 = np.minimum(y0 + 1, src.height - 1)
    ax = (fx - x0)[None, None, :]
    ay = (fy - y0)[None, :, None]

    d = src.data.astype(np.float64)
    v00 = d[:, y0][:, :, x0]
    v01 = d[:, y0][:, :, x1]
    v10 = d[:, y1][:, :, x0]
    v11 = d[:, y1][:, :, x1]
    out = (v00 * (1 - ax) * (1 - ay) + v01 * ax * (1 - ay)
           + v10 * (1 - ax) * ay + v11 * ax * ay)

    if src.nodata is not None:
        nd = src.data == np.float32(src.nodata)
        hole = (nd[:, y0][:, :, x0] | nd[:, y0][:, :, x1] | nd[:, y1][:, :, x0] | nd[:, y1][:, :, x1])
        out[hole] = src.nodata

    transform = GeoTransform(t.origin_x, t.origin_y, float(target_pixel), float(target_pixel))
    return Raster(out.astype(np.float32), transform, src.nodata, src.crs)


# -- normalization ------------------------------------------------------------


@dataclass
class Normalization:
    """Per-channel min-max constants, recorded so inference matches training."""

    mins: list[float] = field(default_factory=list)
    maxs: list[float] = field(default_factory=list)

    @classmethod
    def fit(cls, raster: Raster) -> Normalization:
        d = raster.data
        mins, maxs = [], []
        for b in range(raster.bands):
            band = d[b]
            if raster.nodata is not None:
                band = band[band != np.float32(raster.nodata)]
            mins.append(float(band.min()))
            maxs.append(float(band.max()))
        return cls(mins, maxs)

    def apply(self, raster: Raster) -> Raster:
        if len(self.mins) != raster.bands:
            raise RasterError(f"normalization has {len(self.mins)} channels, raster has {raster.bands}")
        lo = np.asarray(self.mins, dtype=np.float64)[:, None, None]
        span = np.asarray(self.maxs, dtype=np.float64)[:, None, None] - lo
        span[span == 0] = 1.0
        out = (raster.data - lo) / span
        if raster.nodata is not None:
            out = np.where(raster.data == np.float32(raster.nodata), 0.0, out)
        return Raster(out.astype(np.float32), raster.transform, None, raster.crs)

    def to_dict(self) -> dict:
        return {"mins": self.mins, "maxs": self.maxs}

    @classmethod
    def from_dict(cls, d: dict | None) -> Normalization | None:
        return None if d is None else cls(list(d["mins"]), list(d["maxs"]))
