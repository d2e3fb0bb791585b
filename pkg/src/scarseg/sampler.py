"""Window generation (regular grid / random), scar filtering and patch extraction."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .raster import (
    Normalization,
    Raster,
    RasterError,
    Window,
    load_raster,
    save_raster,
    window_read,
)
from .vector import Mask, load_mask, mask_intersects_window, save_mask

PATCH_SIZES = (32, 64, 128)


@dataclass(frozen=True)
class SamplingSpec:
    method: str = "regular"
    patch_size: int = 32
    overlap_fraction: float = 0.2
    n_candidates: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("regular", "random"):
            raise ValueError(f"unknown sampling method {self.method!r}")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")

    @property
    def stride(self) -> int:
        return max(1, math.floor(self.patch_size * (1 - self.overlap_fraction)))


def grid_offsets(extent: int, size: int, stride: int) -> list[int]:
    """Offsets from 0 at ``stride``, plus one flush with the far edge if needed."""
    if extent < size:
        raise ValueError(f"extent {extent} smaller than patch size {size}")
    offs = list(range(0, extent - size + 1, stride))
    if offs[-1] != extent - size:
        offs.append(extent - size)
    return offs


def _check_extent(extent, size):
    h, w = extent
    if h < size or w < size:
        raise ValueError(f"extent {h}x{w} smaller than patch size {size}")


def regular_grid(extent: tuple[int, int], spec: SamplingSpec) -> list[Window]:
    _check_extent(extent, spec.patch_size)
    h, w = extent
    size = spec.patch_size
    rows = grid_offsets(h, size, spec.stride)
    cols = grid_offsets(w, size, spec.stride)
    return [Window(c, r, size, size) for r in rows for c in cols]


def random_windows(extent: tuple[int, int], spec: SamplingSpec) -> list[Window]:
    _check_extent(extent, spec.patch_size)
    h, w = extent
    size = spec.patch_size
    rng = np.random.default_rng(spec.seed)
    rows = rng.integers(0, h - size + 1, size=spec.n_candidates)
    cols = rng.integers(0, w - size + 1, size=spec.n_candidates)
    return [Window(int(c), int(r), size, size) for r, c in zip(rows, cols)]


def candidate_windows(extent: tuple[int, int], spec: SamplingSpec) -> list[Window]:
    if spec.method == "regular":
        return regular_grid(extent, spec)
    return random_windows(extent, spec)


def filter_intersecting(windows: list[Window], mask: Mask) -> list[Window]:
    """Keep the windows containing at least one scar pixel, in input order."""
    return [w for w in windows if mask_intersects_window(mask, w)]


@dataclass
class PatchItem:
    image: Raster
    mask: Mask
    window: Window
    transform_id: str = "identity"


@dataclass
class PatchSet:
    items: list[PatchItem]
    patch_size: int
    channels: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for it in self.items:
            if it.image.bands != self.channels:
                raise ValueError(f"patch has {it.image.bands} channels, expected {self.channels}")
            dims = {(it.image.height, it.image.width), (it.mask.height, it.mask.width)}
            if dims != {(self.patch_size, self.patch_size)}:
                raise ValueError(f"patch dims {dims} differ from patch_size {self.patch_size}")

    def __len__(self):
        return len(self.items)

    @property
    def normalization(self) -> Normalization | None:
        return Normalization.from_dict(self.meta.get("normalization"))

    def subset(self, indices) -> PatchSet:
        return PatchSet([self.items[i] for i in indices], self.patch_size, self.channels, dict(self.meta))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (n, c, h, w) float32 images and (n, 1, h, w) float32 targets."""
        x = np.stack([it.image.data for it in self.items]).astype(np.float32, copy=False)
        y = np.stack([it.mask.data[None] for it in self.items]).astype(np.float32)
        return x, y


def extract_patches(image: Raster, mask: Mask, windows: list[Window],
                    meta: dict | None = None) -> PatchSet:
    if (image.height, image.width) != (mask.height, mask.width) or not image.transform.almost_equal(
            mask.transform):
        raise RasterError("grid mismatch between image and mask")
    items = [PatchItem(window_read(image, w), mask.crop(w), w) for w in windows]
    sizes = {(w.width, w.height) for w in windows}
    if len(sizes) > 1 or any(a != b for a, b in sizes):
        raise ValueError(f"windows must be square and uniform, got sizes {sizes}")
    size = windows[0].width if windows else 0
    return PatchSet(items, size, image.bands, dict(meta or {}))


def sample_patches(image: Raster, mask: Mask, spec: SamplingSpec,
                   normalization: Normalization | None = None) -> PatchSet:
    """Candidate windows -> scar filter -> normalized patch pairs."""
    candidates = candidate_windows((image.height, image.width), spec)
    kept = filter_intersecting(candidates, mask)
    if normalization is not None:
        image = normalization.apply(image)
    meta = {
        "spec": asdict(spec),
        "n_candidates_generated": len(candidates),
        "normalization": normalization.to_dict() if normalization else None,
    }
    return extract_patches(image, mask, kept, meta)


# -- persistence --------------------------------------------------------------


def save_windows(windows: list[Window], path) -> None:
    Path(path).write_text("".join(json.dumps(w.to_dict()) + "\n" for w in windows))


def load_windows(path) -> list[Window]:
    return [Window(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def save_patchset(ps: PatchSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, it in enumerate(ps.items):
        save_raster(it.image, d / f"{i:06d}_image")
        save_mask(it.mask, d / f"{i:06d}_mask")
        entries.append({"index": i, "window": it.window.to_dict(), "transform_id": it.transform_id})
    index = {
        "patch_size": ps.patch_size,
        "channels": ps.channels,
        "count": len(ps),
        **ps.meta,
        "items": entries,
    }
    (d / "index.json").write_text(json.dumps(index, indent=1))


def load_patchset(directory) -> PatchSet:
    d = Path(directory)
    index_path = d / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no PatchSet index at {index_path}")
    index = json.loads(index_path.read_text())
    items = [
        PatchItem(load_raster(d / f"{e['index']:06d}_image"), load_mask(d / f"{e['index']:06d}_mask"),
                  Window(**e["window"]), e.get("transform_id", "identity"))
        for e in index["items"]
    ]
    meta = {k: v for k, v in index.items() if k not in ("patch_size", "channels", "count", "items")}
    return PatchSet(items, index["patch_size"], index["channels"], meta)
