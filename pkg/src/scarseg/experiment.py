"""Factorial experiment matrix: expand, prepare data cells, run, tabulate."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .augment import AugmentSpec, augment_dataset
from .evaluate import MetricsReport, binarize, confusion, predict_tiled
from .raster import Normalization, Raster, load_raster, resample_bilinear, save_raster, stack_bands
from .sampler import (
    PatchSet,
    SamplingSpec,
    candidate_windows,
    extract_patches,
    filter_intersecting,
    load_patchset,
    save_patchset,
)
from .trainer import TrainConfig, train
from .vector import Mask, load_mask, save_mask

log = logging.getLogger(__name__)

DATASETS = ("optical", "optical+aug", "optical+dem", "optical+dem+aug")
SAMPLING = ("regular", "random")
PATCH_SIZES = (32, 64, 128)
INIT_FILTERS = (16, 32, 64)
BATCH_SIZES = (16, 32, 64, 128)


@dataclass(frozen=True)
class ExperimentMatrix:
    datasets: tuple[str, ...] = DATASETS
    sampling: tuple[str, ...] = SAMPLING
    patch_sizes: tuple[int, ...] = PATCH_SIZES
    init_filters: tuple[int, ...] = INIT_FILTERS
    batch_sizes: tuple[int, ...] = BATCH_SIZES
    base_seed: int = 0

    def __post_init__(self):
        for name in ("datasets", "sampling", "patch_sizes", "init_filters", "batch_sizes"):
            levels = getattr(self, name)
            if not levels:
                raise ValueError(f"empty factor: {name}")
            object.__setattr__(self, name, tuple(levels))
        bad = set(self.datasets) - set(DATASETS)
        if bad:
            raise ValueError(f"unknown datasets {sorted(bad)}")
        bad = set(self.sampling) - set(SAMPLING)
        if bad:
            raise ValueError(f"unknown sampling methods {sorted(bad)}")


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    dataset: str
    sampling: str
    patch_size: int
    init_filters: int
    batch_size: int
    seed: int

    @property
    def uses_dem(self) -> bool:
        return "dem" in self.dataset

    @property
    def cell(self) -> str:
        return f"{self.dataset}/{self.sampling}_{self.patch_size}"


def derive_seed(base_seed: int, *factors) -> int:
    payload = json.dumps([base_seed, *factors]).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") >> 1


def expand_matrix(m: ExperimentMatrix) -> list[RunConfig]:
    """Cartesian product in (dataset, sampling, size, filters, batch) order."""
    runs = []
    for ds, smp, size, filt, bs in itertools.product(
            m.datasets, m.sampling, m.patch_sizes, m.init_filters, m.batch_sizes):
        run_id = f"{ds.replace('+', '-')}_{smp}_p{size}_f{filt}_b{bs}"
        runs.append(RunConfig(run_id, ds, smp, size, filt, bs, derive_seed(m.base_seed, ds, smp, size, filt, bs)))
    return runs


# -- data preparation ---------------------------------------------------------


def optical_only(ps: PatchSet, n_optical: int) -> PatchSet:
    from .sampler import PatchItem

    items = [PatchItem(Raster(it.image.data[:n_optical], it.image.transform, it.image.nodata, it.image.crs),
                       it.mask, it.window, it.transform_id) for it in ps.items]
    meta = dict(ps.meta)
    norm = ps.normalization
    if norm is not None:
        meta["normalization"] = Normalization(norm.mins[:n_optical], norm.maxs[:n_optical]).to_dict()
    return PatchSet(items, ps.patch_size, n_optical, meta)


def align_dem(dem: Raster, like: Raster) -> Raster:
    """Bring a DEM onto the optical grid (bilinear), cropping any overhang."""
    if abs(dem.transform.pixel_w - like.transform.pixel_w) > 1e-9 or abs(
            dem.transform.pixel_h - like.transform.pixel_h) > 1e-9:
        dem = resample_bilinear(dem, like.transform.pixel_w)
    if dem.height < like.height or dem.width < like.width:
        raise ValueError(f"DEM {dem.height}x{dem.width} does not cover optical grid {like.height}x{like.width}")
    return Raster(dem.data[:, :like.height, :like.width], dem.transform, dem.nodata, dem.crs)


def prepare_data(optical: Raster, dem: Raster, mask: Mask, test_areas: dict, m: ExperimentMatrix,
                 data_root, sampling: dict | None = None, augment: dict | None = None) -> dict:
    """Build every (dataset, sampling, size) PatchSet cell and the test-area bundles.

    ``test_areas`` maps a name to (optical, dem, mask). The same filtered
    windows feed all four datasets of a cell so they differ only in content.
    Returns a summary of cell sizes.
    """
    root = Path(data_root)
    sampling = dict(sampling or {})
    aug = AugmentSpec(**(augment or {}))
    dem = align_dem(dem, optical)
    stacked = stack_bands(optical, dem)
    norm = Normalization.fit(stacked)
    normed = norm.apply(stacked)
    summary = {}
    for smp, size in itertools.product(m.sampling, m.patch_sizes):
        spec = SamplingSpec(method=smp, patch_size=size, **sampling)
        candidates = candidate_windows((optical.height, optical.width), spec)
        kept = filter_intersecting(candidates, mask)
        if not kept:
            raise ValueError(f"no {smp} {size}px windows intersect a scar")
        meta = {"spec": asdict(spec), "n_candidates_generated": len(candidates),
                "normalization": norm.to_dict()}
        full = extract_patches(normed, mask, kept, meta)
        variants = {"optical+dem": full, "optical": optical_only(full, optical.bands)}
        for ds in m.datasets:
            base = variants["optical+dem" if "dem" in ds else "optical"]
            ps = augment_dataset(base, aug) if ds.endswith("+aug") else base
            save_patchset(ps, root / "patches" / ds / f"{smp}_{size}")
            summary[f"{ds}/{smp}_{size}"] = len(ps)
    for name, (a_opt, a_dem, a_mask) in test_areas.items():
        d = root / "test_areas" / name
        save_raster(a_opt, d / "optical")
        save_raster(align_dem(a_dem, a_opt), d / "dem")
        save_mask(a_mask, d / "mask")
    (root / "prepared.json").write_text(json.dumps({
        "cells": summary, "normalization": norm.to_dict(), "sampling": sampling,
        "augment": asdict(aug), "test_areas": sorted(test_areas)}, indent=1))
    return summary


# -- execution ----------------------------------------------------------------


@dataclass(frozen=True)
class RunContext:
    data_root: str
    out_root: str
    epochs: int = 200
    learning_rate: float = 0.001
    val_fraction: float = 0.3
    depth: int = 4
    predict_overlap: float = 0.5
    threshold: float = 0.5

    def hash_for(self, run: RunConfig) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("data_root", "out_root")}
        payload["run"] = asdict(run)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    dataset: str
    sampling: str
    patch_size: int
    init_filters: int
    batch_size: int
    seed: int
    status: str = "ok"
    error: str = ""
    checkpoint: str = ""
    metrics: dict = field(default_factory=dict)
    avg_miou: float = float("nan")
    best_val_loss: float = float("nan")
    config_hash: str = ""
    seconds: float = 0.0

    @classmethod
    def for_run(cls, run: RunConfig, **kw) -> RunRecord:
        return cls(run.run_id, run.dataset, run.sampling, run.patch_size, run.init_filters,
                   run.batch_size, run.seed, **kw)

    def factors(self) -> tuple:
        return self.dataset, self.sampling, self.patch_size, self.init_filters, self.batch_size

    def score(self, key: str) -> float:
        """Mean of ``key`` across test areas."""
        return float(np.mean([m[key] for m in self.metrics.values()]))


def list_test_areas(data_root) -> list[str]:
    d = Path(data_root) / "test_areas"
    return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.exists() else []


def load_test_area(data_root, name: str, with_dem: bool) -> tuple[Raster, Mask]:
    d = Path(data_root) / "test_areas" / name
    area = load_raster(d / "optical")
    if with_dem:
        area = stack_bands(area, load_raster(d / "dem"))
    return area, load_mask(d / "mask")


def evaluate_checkpoint(ckpt_dir, area: Raster, truth: Mask, tile: int, overlap: float = 0.5,
                        threshold: float = 0.5) -> MetricsReport:
    cfg, w, manifest = nn.load_checkpoint(ckpt_dir)
    norm = Normalization.from_dict(manifest.get("normalization"))
    if norm is not None:
        area = norm.apply(area)
    probs = predict_tiled((cfg, w), area, tile, overlap)
    return MetricsReport.from_counts(confusion(binarize(probs, threshold), truth), area.transform.pixel_w)


def run_one(run: RunConfig, ctx: RunContext) -> RunRecord:
    t0 = time.perf_counter()
    out = Path(ctx.out_root) / "runs" / run.run_id
    rec = RunRecord.for_run(run, config_hash=ctx.hash_for(run))
    try:
        cell = Path(ctx.data_root) / "patches" / run.cell
        if not (cell / "index.json").exists():
            raise FileNotFoundError(f"missing PatchSet cell {run.cell}")
        ps = load_patchset(cell)
        net = nn.UNetConfig(in_channels=ps.channels, init_filters=run.init_filters, depth=ctx.depth)
        tcfg = TrainConfig(epochs=ctx.epochs, learning_rate=ctx.learning_rate, batch_size=run.batch_size,
                           val_fraction=ctx.val_fraction, shuffle_seed=run.seed, init_seed=run.seed)
        ckpt, history = train(tcfg, net, ps, out)
        rec.checkpoint = str(ckpt)
        rec.best_val_loss = history.best_val_loss()
        for name in list_test_areas(ctx.data_root):
            area, truth = load_test_area(ctx.data_root, name, run.uses_dem)
            rep = evaluate_checkpoint(ckpt, area, truth, run.patch_size, ctx.predict_overlap, ctx.threshold)
            rec.metrics[name] = rep.to_dict()
        if not rec.metrics:
            raise FileNotFoundError("no test areas under data_root/test_areas")
        rec.avg_miou = float(np.mean([m["miou"] for m in rec.metrics.values()]))
    except Exception as e:  # a failed run must not abort the batch
        log.warning("run %s failed: %s", run.run_id, e)
        rec.status = "failed"
        rec.error = f"{type(e).__name__}: {e}"
        log.debug(traceback.format_exc())
    rec.seconds = time.perf_counter() - t0
    return rec


def record_path(out_root, run_id: str) -> Path:
    return Path(out_root) / "records" / f"{run_id}.json"


def load_records(out_root) -> list[RunRecord]:
    d = Path(out_root) / "records"
    return [RunRecord(**json.loads(p.read_text())) for p in sorted(d.glob("*.json"))] if d.exists() else []


def run_all(runs: list[RunConfig], ctx: RunContext, jobs: int = 1) -> list[RunRecord]:
    """Train and score every run; runs with an existing record are skipped."""
    pending, records = [], {}
    for run in runs:
        p = record_path(ctx.out_root, run.run_id)
        if p.exists():
            rec = RunRecord(**json.loads(p.read_text()))
            if rec.config_hash != ctx.hash_for(run):
                log.warning("record %s was produced by a different config; keeping it", run.run_id)
            records[run.run_id] = rec
        else:
            pending.append(run)
    log.info("%d runs, %d already recorded", len(runs), len(runs) - len(pending))

    def persist(rec: RunRecord):
        p = record_path(ctx.out_root, rec.run_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(asdict(rec), indent=1))
        records[rec.run_id] = rec

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(run_one, pending, itertools.repeat(ctx)):
                persist(rec)
    else:
        for run in pending:
            persist(run_one(run, ctx))
    return [records[r.run_id] for r in runs]


# -- tables -------------------------------------------------------------------

GROUP = ("dataset", "sampling", "patch_size")


def _ok(records):
    return [r for r in records if r.status == "ok" and r.metrics]


def best_models(records: list[RunRecord], key: str = "f1",
                group_by: tuple[str, ...] = GROUP) -> list[RunRecord]:
    """Per group, the record with the highest area-averaged ``key``.

    Ties go to the smaller batch, then the smaller filter count.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for r in _ok(records):
        groups.setdefault(tuple(getattr(r, g) for g in group_by), []).append(r)
    best = []
    for k in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        best.append(min(groups[k], key=lambda r: (-r.score(key), r.batch_size, r.init_filters, r.run_id)))
    return best


def generalization_table(records: list[RunRecord], n_areas: int | None = None) -> list[RunRecord]:
    """Best average-mIoU record per (sampling, size), sorted by average mIoU (ascending)."""
    ok = _ok(records)
    for r in ok:
        if n_areas is not None and len(r.metrics) != n_areas:
            raise ValueError(f"record {r.run_id} scored on {len(r.metrics)} areas, expected {n_areas}")
    best = best_models(ok, "miou", ("sampling", "patch_size"))
    return sorted(best, key=lambda r: (r.avg_miou, r.sampling, r.patch_size))


def summary_rows(records: list[RunRecord], areas: list[str]) -> tuple[list[str], list[list]]:
    head = ["run_id", "dataset", "sampling", "patch_size", "init_filters", "batch_size", "status"]
    for a in areas:
        head += [f"{a}_{k}" for k in ("precision", "recall", "f1", "miou")]
    head += ["avg_miou", "best_val_loss", "error"]
    rows = []
    for r in records:
        row = [r.run_id, r.dataset, r.sampling, r.patch_size, r.init_filters, r.batch_size, r.status]
        for a in areas:
            m = r.metrics.get(a, {})
            row += [_fmt(m.get(k)) for k in ("precision", "recall", "f1", "miou")]
        row += [_fmt(r.avg_miou), _fmt(r.best_val_loss), r.error]
        rows.append(row)
    return head, rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if v != v else f"{v:.4f}"
    return v


def best_rows(records: list[RunRecord], areas: list[str]) -> tuple[list[str], list[list]]:
    head = ["dataset", "sampling", "patch_size", "init_filters", "batch_size"]
    for a in areas:
        head += [f"{a}_{k}" for k in ("precision", "recall", "f1", "miou")]
    rows = []
    for r in records:
        row = [r.dataset, r.sampling, r.patch_size, r.init_filters, r.batch_size]
        for a in areas:
            row += [_fmt(r.metrics[a].get(k)) for k in ("precision", "recall", "f1", "miou")]
        rows.append(row)
    return head, rows


def generalization_rows(records: list[RunRecord], areas: list[str]) -> tuple[list[str], list[list]]:
    head = ["sampling", "size"] + [f"{a}_miou" for a in areas] + ["average_miou", "dataset"]
    rows = [[r.sampling, r.patch_size] + [_fmt(r.metrics[a]["miou"]) for a in areas]
            + [_fmt(r.avg_miou), r.dataset] for r in records]
    return head, rows


def format_table(head: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in head]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_csv(path, head, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(head)
        wr.writerows(rows)


def svg_bar_chart(labels: list[str], values: list[float], title: str, ymax: float = 1.0) -> str:
    """A dependency-free vertical bar chart."""
    bw, gap, h, top, left = 28, 10, 240, 30, 40
    width = left + len(values) * (bw + gap) + gap
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h + top + 120}">',
             f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">{title}</text>',
             f'<line x1="{left}" y1="{top + h}" x2="{width}" y2="{top + h}" stroke="black"/>']
    for frac in (0.25, 0.5, 0.75, 1.0):
        y = top + h - frac * h
        parts.append(f'<text x="4" y="{y + 4:.1f}" font-size="10" font-family="sans-serif">'
                     f'{frac * ymax:.2f}</text>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = left + gap + i * (bw + gap)
        bh = 0 if v != v else max(0.0, min(v / ymax, 1.0)) * h
        parts.append(f'<rect x="{x}" y="{top + h - bh:.1f}" width="{bw}" height="{bh:.1f}" fill="#4477aa"/>')
        parts.append(f'<text x="{x + bw / 2}" y="{top + h + 8}" font-size="9" font-family="sans-serif" '
                     f'transform="rotate(60 {x + bw / 2} {top + h + 8})">{lab}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_tables(records: list[RunRecord], out_root, plots: bool = True) -> dict[str, str]:
    """Write summary/best/generalization CSVs (+ SVG plots); return text renderings."""
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    areas = sorted({a for r in records for a in r.metrics})
    texts = {}
    head, rows = summary_rows(records, areas)
    write_csv(out / "summary.csv", head, rows)
    texts["summary"] = format_table(head, rows)
    for key in ("f1", "miou"):
        head, rows = best_rows(best_models(records, key), areas)
        write_csv(out / f"best_{key}.csv", head, rows)
        texts[f"best_{key}"] = format_table(head, rows)
    gen = generalization_table(records, len(areas) or None)
    head, rows = generalization_rows(gen, areas)
    write_csv(out / "generalization.csv", head, rows)
    texts["generalization"] = format_table(head, rows)
    if plots and _ok(records):
        (out / "plots").mkdir(exist_ok=True)
        ok = _ok(records)
        (out / "plots" / "avg_miou.svg").write_text(
            svg_bar_chart([r.run_id for r in ok], [r.avg_miou for r in ok], "average mIoU per run"))
        (out / "plots" / "generalization.svg").write_text(svg_bar_chart(
            [f"{r.sampling} {r.patch_size}" for r in gen], [r.avg_miou for r in gen],
            "best average mIoU per sampling/size"))
    (out / "tables.txt").write_text("\n\n".join(f"[{k}]\n{v}" for k, v in texts.items()) + "\n")
    return texts


# -- config-driven entry point -----------------------------------------------


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def matrix_from_config(cfg: dict) -> ExperimentMatrix:
    f = cfg.get("factors", {})
    return ExperimentMatrix(
        datasets=tuple(f.get("datasets", DATASETS)),
        sampling=tuple(f.get("sampling", SAMPLING)),
        patch_sizes=tuple(f.get("patch_sizes", PATCH_SIZES)),
        init_filters=tuple(f.get("init_filters", INIT_FILTERS)),
        batch_sizes=tuple(f.get("batch_sizes", BATCH_SIZES)),
        base_seed=int(cfg.get("base_seed", 0)),
    )


def prepare_from_config(cfg: dict, m: ExperimentMatrix, data_root: Path, base: Path) -> None:
    from .synth import make_scene
    from .vector import load_polygons, rasterize

    if "synth" in cfg:
        s = cfg["synth"]
        scene = make_scene(s.get("seed", 0), s.get("height", 512), s.get("width", 512), s.get("blobs", 40))
        size = s.get("test_size", 256)
        areas = {}
        for i in range(s.get("test_areas", 2)):
            t = make_scene(s.get("seed", 0) + 1000 + i, size, size, s.get("test_blobs", max(1, s.get("blobs", 40) // 4)))
            areas[f"area{i + 1}"] = (t.optical, t.dem, t.mask)
        optical, dem, mask = scene.optical, scene.dem, scene.mask
    elif "prepare" in cfg:
        p = cfg["prepare"]

        def load_scene(d):
            opt = load_raster(_resolve(base, d["optical"]))
            dm = load_raster(_resolve(base, d["dem"]))
            if "mask" in d:
                mk = load_mask(_resolve(base, d["mask"]))
            else:
                mk = rasterize(load_polygons(_resolve(base, d["polygons"])), opt.transform, opt.height, opt.width)
            return opt, dm, mk

        optical, dem, mask = load_scene(p)
        areas = {name: load_scene(d) for name, d in p["test_areas"].items()}
    else:
        raise ValueError("experiment config needs 'synth' or 'prepare' when data_root is not prepared")
    prepare_data(optical, dem, mask, areas, m, data_root, cfg.get("sampling"), cfg.get("augment"))


def run_experiment(config_path, out_root=None, jobs: int | None = None, seed: int | None = None) -> dict:
    """Run everything an ``experiment.json`` describes; returns the text tables."""
    config_path = Path(config_path)
    base = config_path.parent
    cfg = json.loads(config_path.read_text())
    if seed is not None:
        cfg["base_seed"] = seed
    m = matrix_from_config(cfg)
    out = Path(out_root) if out_root else _resolve(base, cfg.get("out_root", "experiment_out"))
    data_root = _resolve(base, cfg["data_root"]) if "data_root" in cfg else out / "data"
    if not (data_root / "prepared.json").exists():
        prepare_from_config(cfg, m, data_root, base)
    t = cfg.get("train", {})
    inf = cfg.get("inference", {})
    ctx = RunContext(str(data_root), str(out), epochs=t.get("epochs", 200),
                     learning_rate=t.get("learning_rate", 0.001), val_fraction=t.get("val_fraction", 0.3),
                     depth=cfg.get("depth", 4), predict_overlap=inf.get("overlap_fraction", 0.5),
                     threshold=inf.get("threshold", 0.5))
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.resolved.json").write_text(json.dumps(
        {**cfg, "resolved": {"data_root": str(data_root), "out_root": str(out), "matrix": asdict(m),
                             "context": asdict(ctx)}}, indent=1))
    records = run_all(expand_matrix(m), ctx, jobs or cfg.get("jobs", 1))
    return write_tables(records, out, plots=cfg.get("plots", True))
