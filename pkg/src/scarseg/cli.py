"""``scarseg`` command line: one subcommand per pipeline stage.

Every subcommand accepts ``--config FILE`` (JSON whose keys are flag names,
dashes or underscores) and flags override it. The fully resolved settings
are echoed to ``manifest.json`` next to the outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path

MODULE_OF_FILE = {
    "raster": "raster_core",
    "vector": "vector_mask",
    "sampler": "sampler",
    "augment": "augment",
    "nn": "nn_engine",
    "trainer": "trainer",
    "evaluate": "inference_eval",
    "experiment": "experiment",
    "synth": "synth",
    "cli": "cli",
}


class CliError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", type=Path, help="JSON file of flag values; flags override it")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=out_required, help="output path (bundle prefix or directory)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--sequential", action="store_true", help="single-threaded BLAS for bit-exact results")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scarseg", description="Landslide-scar segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="burn GeoJSON polygons into a mask aligned to a raster")
    p.add_argument("--polygons", required=True, help="GeoJSON FeatureCollection")
    p.add_argument("--reference", required=True, help="raster bundle giving the grid")
    _common(p)

    p = sub.add_parser("resample", help="bilinear resample to a square pixel size")
    p.add_argument("--raster", required=True)
    p.add_argument("--target-pixel", type=float, required=True, help="output pixel size (m)")
    _common(p)

    p = sub.add_parser("stack", help="append DEM band(s) to an optical raster")
    p.add_argument("--optical", required=True)
    p.add_argument("--dem", required=True)
    _common(p)

    p = sub.add_parser("sample", help="sample scar-intersecting patches into a PatchSet")
    p.add_argument("--raster", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--method", choices=["regular", "random"], default="regular")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--overlap", type=float, default=0.2, help="regular-grid overlap fraction")
    p.add_argument("--candidates", type=int, default=5000, help="random candidate count")
    p.add_argument("--no-normalize", action="store_true", help="skip per-channel min-max scaling")
    _common(p)

    p = sub.add_parser("augment", help="add rotated/flipped copies to a PatchSet")
    p.add_argument("--patches", required=True)
    p.add_argument("--copies", type=int, default=2)
    _common(p)

    p = sub.add_parser("train", help="train a U-net on a PatchSet")
    p.add_argument("--patches", required=True)
    p.add_argument("--init-filters", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.3)
    _common(p)

    p = sub.add_parser("predict", help="tiled inference over an area")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--area", required=True, help="optical raster bundle")
    p.add_argument("--dem", help="DEM bundle (required for DEM-trained models)")
    p.add_argument("--tile", type=int, help="tile size (default: training patch size)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    _common(p)

    p = sub.add_parser("evaluate", help="confusion counts and metrics for two masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--csv", help="also append one CSV row here")
    _common(p, out_required=False)

    p = sub.add_parser("experiment", help="run an experiment.json matrix and write tables")
    _common(p, out_required=False)

    p = sub.add_parser("synth", help="generate a synthetic scene, inventory and test areas")
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--blobs", type=int, default=40)
    p.add_argument("--test-areas", type=int, default=2)
    p.add_argument("--test-size", type=int, default=256)
    _common(p)
    ap.subcommand_parsers = sub.choices
    return ap


def parse(argv) -> argparse.Namespace:
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=Path)
    early, _ = pre.parse_known_args(argv)
    if early.config is not None and early.command in COMMANDS and early.command != "experiment":
        try:
            cfg = json.loads(early.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {early.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise CliError(f"config {early.config} must be a JSON object")
        sub = ap.subcommand_parsers[early.command]
        known = {a.dest for a in sub._actions}
        defaults = {}
        for k, v in cfg.items():
            dest = k.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise CliError(f"unknown config key {k!r} for {early.command}")
            defaults[dest] = v
        sub.set_defaults(**defaults)
        # required flags may come from the file instead
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
    return ap.parse_args(argv)


def _manifest(path: Path, args: argparse.Namespace, **extra) -> None:
    d = path if path.suffix == "" and path.is_dir() else path.parent
    d.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    (d / "manifest.json").write_text(json.dumps({"resolved": resolved, **extra}, indent=1))


def cmd_rasterize(a):
    from .raster import load_raster
    from .vector import load_polygons, rasterize, save_mask

    ref = load_raster(a.reference)
    ps = load_polygons(a.polygons)
    m = rasterize(ps, ref.transform, ref.height, ref.width)
    save_mask(m, a.out)
    _manifest(Path(a.out), a, polygons=len(ps), scar_pixels=int(m.data.sum()), rule="pixel-center even-odd")
    return {"polygons": len(ps), "scar_pixels": int(m.data.sum())}


def cmd_resample(a):
    from .raster import load_raster, resample_bilinear, save_raster

    r = resample_bilinear(load_raster(a.raster), a.target_pixel)
    save_raster(r, a.out)
    _manifest(Path(a.out), a)
    return {"bands": r.bands, "height": r.height, "width": r.width}


def cmd_stack(a):
    from .raster import load_raster, save_raster, stack_bands

    r = stack_bands(load_raster(a.optical), load_raster(a.dem))
    save_raster(r, a.out)
    _manifest(Path(a.out), a)
    return {"bands": r.bands}


def cmd_sample(a):
    from .raster import Normalization, load_raster
    from .sampler import SamplingSpec, candidate_windows, save_patchset, save_windows, sample_patches
    from .vector import load_mask

    img = load_raster(a.raster)
    mask = load_mask(a.mask)
    spec = SamplingSpec(a.method, a.patch_size, a.overlap, a.candidates, a.seed)
    norm = None if a.no_normalize else Normalization.fit(img)
    ps = sample_patches(img, mask, spec, norm)
    out = Path(a.out)
    save_patchset(ps, out)
    save_windows(candidate_windows((img.height, img.width), spec), out / "candidates.jsonl")
    save_windows([it.window for it in ps.items], out / "windows.jsonl")
    _manifest(out, a)
    return {"candidates": ps.meta["n_candidates_generated"], "kept": len(ps), "stride": spec.stride}


def cmd_augment(a):
    from .augment import AugmentSpec, augment_dataset
    from .sampler import load_patchset, save_patchset

    ps = load_patchset(a.patches)
    out = augment_dataset(ps, AugmentSpec(a.copies, a.seed))
    save_patchset(out, a.out)
    _manifest(Path(a.out), a)
    return {"input": len(ps), "output": len(out)}


def cmd_train(a):
    from .nn import UNetConfig
    from .sampler import load_patchset
    from .trainer import TrainConfig, train

    ps = load_patchset(a.patches)
    net = UNetConfig(ps.channels, a.init_filters, a.depth)
    cfg = TrainConfig(a.epochs, a.lr, a.batch_size, a.val_fraction, shuffle_seed=a.seed, init_seed=a.seed)
    ckpt, hist = train(cfg, net, ps, a.out)
    _manifest(Path(a.out), a)
    return {"checkpoint": str(ckpt), "best_val_loss": hist.best_val_loss(), "epochs": len(hist)}


def cmd_predict(a):
    from .evaluate import binarize, predict_tiled
    from .experiment import align_dem
    from .nn import load_checkpoint
    from .raster import Normalization, Raster, load_raster, save_raster, stack_bands
    from .vector import Mask, save_mask

    cfg, w, manifest = load_checkpoint(a.checkpoint)
    area = load_raster(a.area)
    if a.dem:
        area = stack_bands(area, align_dem(load_raster(a.dem), area))
    norm = Normalization.from_dict(manifest.get("normalization"))
    if norm is not None:
        area = norm.apply(area)
    tile = a.tile or (manifest.get("patch_size") or 2 ** cfg.depth * 2)
    probs = predict_tiled((cfg, w), area, tile, a.overlap)
    out = Path(a.out)
    save_raster(Raster(probs[None].astype("float32"), area.transform), out / "probability")
    save_mask(Mask(binarize(probs, a.threshold), area.transform), out / "prediction")
    _manifest(out, a, tile=tile)
    return {"scar_pixels": int((probs >= a.threshold).sum()), "tile": tile}


def cmd_evaluate(a):
    import csv

    from .evaluate import MetricsReport, confusion
    from .vector import load_mask

    pred, truth = load_mask(a.pred), load_mask(a.truth)
    rep = MetricsReport.from_counts(confusion(pred, truth), truth.transform.pixel_w)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(rep.to_json())
        _manifest(Path(a.out), a)
    if a.csv:
        new = not Path(a.csv).exists()
        with open(a.csv, "a", newline="") as f:
            wr = csv.writer(f)
            if new:
                wr.writerow(MetricsReport.CSV_FIELDS)
            wr.writerow(rep.csv_row())
    return rep.to_dict()


def cmd_experiment(a):
    from .experiment import run_experiment

    if a.config is None:
        raise CliError("experiment needs --config experiment.json")
    texts = run_experiment(a.config, a.out, jobs=a.jobs if a.jobs > 1 else None,
                           seed=a.seed if a.seed else None)
    print(texts["generalization"], file=sys.stderr)
    return {"tables": sorted(texts)}


def cmd_synth(a):
    from .raster import save_raster
    from .synth import make_scene
    from .vector import save_mask

    out = Path(a.out)

    def write(scene, d: Path):
        save_raster(scene.optical, d / "optical")
        save_raster(scene.dem, d / "dem")
        save_mask(scene.mask, d / "mask")
        scene.polygons.save(d / "inventory.geojson")

    scene = make_scene(a.seed, a.height, a.width, a.blobs)
    write(scene, out / "scene")
    for i in range(a.test_areas):
        t = make_scene(a.seed + 1000 + i, a.test_size, a.test_size, max(1, a.blobs // 4))
        write(t, out / f"area{i + 1}")
    _manifest(out, a)
    return {"polygons": len(scene.polygons), "scar_pixels": int(scene.mask.data.sum())}


COMMANDS = {name[4:]: fn for name, fn in globals().items() if name.startswith("cmd_")}


def _failing_module(exc: BaseException, command: str) -> str:
    mod = None
    for frame in traceback.extract_tb(exc.__traceback__):
        stem = Path(frame.filename).stem
        if "scarseg" in frame.filename and stem in MODULE_OF_FILE:
            mod = MODULE_OF_FILE[stem]
    return mod or "cli"


def main(argv=None) -> int:
    level = os.environ.get("SCARSEG_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse(argv)
    except CliError as e:
        print(f"error: cli: {e}", file=sys.stderr)
        return 2
    try:
        ctx = contextlib.nullcontext()
        if args.sequential:
            from .nn import sequential

            ctx = sequential()
        with ctx:
            result = COMMANDS[args.command](args)
    except Exception as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {_failing_module(e, args.command)}: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
