"""Tiled inference over large areas and landslide-class segmentation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import UNetConfig
from .raster import Raster
from .sampler import grid_offsets
from .vector import Mask


def predict_tiled(model: tuple[UNetConfig, dict], area: Raster, tile: int,
                  overlap_fraction: float = 0.5, batch: int = 16) -> np.ndarray:
    """Per-pixel landslide probability for ``area``, shape (height, width).

    Tiles slide at stride floor(tile * (1 - overlap)) with a final tile flush
    to each far edge; each pixel gets the mean of all tiles covering it.
    """
    cfg, w = model
    if area.bands != cfg.in_channels:
        raise nn.ShapeError(f"area has {area.bands} channels, model expects {cfg.in_channels}")
    if tile > area.height or tile > area.width:
        raise ValueError(f"tile {tile} larger than area {area.height}x{area.width}")
    if tile % 2 ** cfg.depth:
        raise nn.ShapeError(f"tile {tile} not divisible by 2^depth={2 ** cfg.depth}")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    stride = max(1, math.floor(tile * (1 - overlap_fraction)))
    origins = [(r, c) for r in grid_offsets(area.height, tile, stride)
               for c in grid_offsets(area.width, tile, stride)]
    total = np.zeros((area.height, area.width), dtype=np.float64)
    count = np.zeros((area.height, area.width), dtype=np.int32)
    data = area.data
    for s in range(0, len(origins), batch):
        chunk = origins[s:s + batch]
        x = np.stack([data[:, r:r + tile, c:c + tile] for r, c in chunk])
        probs = nn.unet_forward(cfg, w, x)
        for (r, c), p in zip(chunk, probs):
            total[r:r + tile, c:c + tile] += p[0]
            count[r:r + tile, c:c + tile] += 1
    return total / count


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float
    fp: float
    fn: float
    tn: float

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _grid(m) -> np.ndarray:
    return m.data if isinstance(m, Mask) else np.asarray(m)


def confusion(pred, truth) -> ConfusionCounts:
    p = _grid(pred).astype(bool)
    t = _grid(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"dim mismatch: pred {p.shape} vs truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num, den):
    return (num / den, True) if den > 0 else (0.0, False)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)[0]


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


def f1(c: ConfusionCounts) -> float:
    # same as 2PR/(P+R) wherever that is defined
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)[0]


def miou(c: ConfusionCounts) -> float:
    """Landslide-class Jaccard index tp / (tp + fp + fn)."""
    return _ratio(c.tp, c.tp + c.fp + c.fn)[0]


def miou_macro(c: ConfusionCounts) -> float:
    """Mean of landslide IoU and background IoU."""
    return 0.5 * (miou(c) + _ratio(c.tn, c.tn + c.fp + c.fn)[0])


def counts_to_area(c: ConfusionCounts, pixel: float) -> dict[str, float]:
    if not pixel > 0:
        raise ValueError("pixel size must be positive")
    k = pixel * pixel / 1e6
    return {"tp": c.tp * k, "fp": c.fp * k, "fn": c.fn * k, "tn": c.tn * k}


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    miou: float
    miou_macro: float
    counts: dict
    areas_km2: dict
    undefined_flags: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, c: ConfusionCounts, pixel: float = 5.0) -> MetricsReport:
        flags = [name for name, den in (
            ("precision", c.tp + c.fp),
            ("recall", c.tp + c.fn),
            ("f1", 2 * c.tp + c.fp + c.fn),
            ("miou", c.tp + c.fp + c.fn),
        ) if den <= 0]
        return cls(precision(c), recall(c), f1(c), miou(c), miou_macro(c), asdict(c),
                   counts_to_area(c, pixel), flags)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    CSV_FIELDS = ("precision", "recall", "f1", "miou", "miou_macro",
                  "tp_km2", "fp_km2", "fn_km2", "tn_km2", "undefined")

    def csv_row(self) -> list:
        a = self.areas_km2
        return [self.precision, self.recall, self.f1, self.miou, self.miou_macro,
                a["tp"], a["fp"], a["fn"], a["tn"], ";".join(self.undefined_flags)]


def evaluate_masks(pred, truth, pixel: float = 5.0) -> MetricsReport:
    return MetricsReport.from_counts(confusion(pred, truth), pixel)
