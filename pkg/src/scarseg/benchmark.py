"""Desk-scale synthetic benchmark: one scene, one model, one held-out area."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

from . import nn
from .augment import AugmentSpec, augment_dataset
from .evaluate import MetricsReport, binarize, confusion, predict_tiled
from .experiment import align_dem, optical_only
from .raster import Normalization, Raster, stack_bands
from .sampler import SamplingSpec, sample_patches
from .synth import make_scene
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    scene_size: int = 512
    blobs: int = 40
    test_size: int = 256
    test_blobs: int = 10
    patch_size: int = 32
    n_candidates: int = 5000
    copies: int = 2
    use_dem: bool = True
    init_filters: int = 16
    depth: int = 3
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 16
    overlap: float = 0.5


def run_benchmark(cfg: BenchmarkConfig, out_dir) -> dict:
    """Train on a synthetic scene and score on a separately generated area."""
    t0 = time.perf_counter()
    scene = make_scene(cfg.seed, cfg.scene_size, cfg.scene_size, cfg.blobs)
    img = stack_bands(scene.optical, align_dem(scene.dem, scene.optical))
    norm = Normalization.fit(img)
    ps = sample_patches(img, scene.mask, SamplingSpec("random", cfg.patch_size, n_candidates=cfg.n_candidates,
                                                      seed=cfg.seed), norm)
    if not cfg.use_dem:
        ps = optical_only(ps, scene.optical.bands)
    if cfg.copies:
        ps = augment_dataset(ps, AugmentSpec(cfg.copies, cfg.seed))

    net = nn.UNetConfig(ps.channels, cfg.init_filters, cfg.depth)
    tcfg = TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                       shuffle_seed=cfg.seed, init_seed=cfg.seed)
    with nn.sequential():
        ckpt, hist = train(tcfg, net, ps, out_dir)
        net, w, manifest = nn.load_checkpoint(ckpt)

        # held-out area: a different scene seed, never sampled for training
        test = make_scene(cfg.seed + 1000, cfg.test_size, cfg.test_size, cfg.test_blobs)
        area = stack_bands(test.optical, align_dem(test.dem, test.optical))
        area = norm.apply(area)
        if not cfg.use_dem:
            area = Raster(area.data[:test.optical.bands], area.transform, area.nodata, area.crs)
        probs = predict_tiled((net, w), area, cfg.patch_size, cfg.overlap)
    rep = MetricsReport.from_counts(confusion(binarize(probs), test.mask), test.mask.transform.pixel_w)
    return {
        "config": asdict(cfg),
        "patches": len(ps),
        "best_epoch": manifest["epoch"],
        "best_val_loss": manifest["val_loss"],
        "metrics": rep.to_dict(),
        "seconds": time.perf_counter() - t0,
    }

