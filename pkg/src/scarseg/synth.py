"""Synthetic landslide scenes for desk-scale runs.

A scene has five optical bands of raw-DN-like values over a textured,
vegetated background, bright elliptical scars on hillslopes, a few
spectrally similar bare fields on flat ground (the usual false-positive
source), and a smooth elevation model where each scar sits in a shallow
depression. The elevation is written at twice the optical pixel size so it
must be resampled before stacking, like the real DEM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import GeoTransform, Raster
from .vector import Mask, Polygon, PolygonSet, rasterize

# blue, green, red, red-edge, NIR reflectance-like means
VEGETATION = np.array([0.05, 0.09, 0.05, 0.22, 0.40])
SCAR = np.array([0.16, 0.20, 0.24, 0.27, 0.30])
FIELD = np.array([0.13, 0.17, 0.19, 0.25, 0.31])
DN_SCALE = 20000.0


@dataclass
class SynthScene:
    optical: Raster
    dem: Raster
    mask: Mask
    polygons: PolygonSet


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return f / (f.std() + 1e-12)


def _ellipse(cx, cy, a, b, theta, n=24):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x = cx + a * np.cos(t) * np.cos(theta) - b * np.sin(t) * np.sin(theta)
    y = cy + a * np.cos(t) * np.sin(theta) + b * np.sin(t) * np.cos(theta)
    ring = list(zip(x.tolist(), y.tolist()))
    return ring + [ring[0]]


def make_scene(seed: int = 0, height: int = 512, width: int = 512, n_blobs: int = 40,
               pixel: float = 5.0, n_fields: int | None = None, origin=(500000.0, 7540000.0),
               crs: str = "synthetic UTM-like meters") -> SynthScene:
    rng = np.random.default_rng(seed)
    t = GeoTransform(origin[0], origin[1], pixel, pixel)
    if n_fields is None:
        n_fields = max(1, n_blobs // 4)

    elev = (1500 + 250 * _smooth_noise(rng, (height, width), 40)
            + 60 * _smooth_noise(rng, (height, width), 12))
    gy, gx = np.gradient(elev, pixel)
    slope = np.hypot(gx, gy)

    # scar centers favour steep ground
    steep = slope > np.quantile(slope, 0.5)
    flat = slope < np.quantile(slope, 0.3)
    margin = 4
    inner = np.zeros_like(steep)
    inner[margin:-margin, margin:-margin] = True

    def pick(candidates, k):
        idx = np.flatnonzero(candidates & inner)
        return np.unravel_index(rng.choice(idx, size=k, replace=False), (height, width))

    polys = []
    for r, c in zip(*pick(steep, n_blobs)):
        a, b = rng.uniform(3, 9), rng.uniform(2, 5)
        cx, cy = t.origin_x + (c + 0.5) * pixel, t.origin_y - (r + 0.5) * pixel
        polys.append(Polygon(_ellipse(cx, cy, a * pixel, b * pixel, rng.uniform(0, np.pi))))
    inventory = PolygonSet(polys, crs)
    mask = rasterize(inventory, t, height, width)

    fields = np.zeros((height, width), bool)
    for r, c in zip(*pick(flat, n_fields)):
        hh, ww = rng.integers(5, 14, size=2)
        fields[max(r - hh // 2, 0):r + hh // 2 + 1, max(c - ww // 2, 0):c + ww // 2 + 1] = True
    fields &= mask.data == 0

    scar = ndimage.gaussian_filter(mask.data.astype(float), 0.7)
    scar = np.maximum(scar, mask.data)
    field = ndimage.gaussian_filter(fields.astype(float), 0.7)
    texture = 0.15 * _smooth_noise(rng, (height, width), 3)
    bands = []
    for k in range(5):
        base = VEGETATION[k] * (1 + texture + 0.1 * _smooth_noise(rng, (height, width), 20))
        v = base * (1 - scar - field) + SCAR[k] * scar + FIELD[k] * field
        v = v * (1 + 0.04 * rng.standard_normal((height, width)))
        bands.append(np.clip(v, 0.0, 1.0) * DN_SCALE)
    optical = Raster(np.round(np.stack(bands)).astype(np.float32), t, None, crs)

    # scarps: material removed leaves a shallow depression
    elev = elev - 4.0 * ndimage.gaussian_filter(mask.data.astype(float), 1.0)
    coarse = elev[: height // 2 * 2, : width // 2 * 2].reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3))
    dem = Raster(coarse[None].astype(np.float32), GeoTransform(t.origin_x, t.origin_y, 2 * pixel, 2 * pixel),
                 None, crs)
    return SynthScene(optical, dem, mask, inventory)
