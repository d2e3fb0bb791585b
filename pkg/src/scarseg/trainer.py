"""Training loop: seeded train/val split, mini-batch Adam, checkpoint on val improvement."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import UNetConfig, load_checkpoint  # noqa: F401  (re-exported)
from .sampler import PatchSet

log = logging.getLogger(__name__)

BATCH_SIZES = (16, 32, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.001
    batch_size: int = 32
    val_fraction: float = 0.3
    shuffle_seed: int = 0
    init_seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    saved: bool


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def best_val_loss(self) -> float:
        return min(self.val_losses)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["epoch", "train_loss", "val_loss", "seconds", "saved"])
            for e in self.epochs:
                wr.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), f"{e.seconds:.3f}", int(e.saved)])

    @classmethod
    def read_csv(cls, path) -> TrainHistory:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                                float(r["seconds"]), r["saved"] == "1") for r in rows])


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError(f"need at least 2 patches to split, got {n}")
    n_val = int(round(val_fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_train_val(ps: PatchSet, val_fraction: float, seed: int) -> tuple[PatchSet, PatchSet]:
    """Disjoint seeded split with round(val_fraction * n) validation patches."""
    tr, va = split_indices(len(ps), val_fraction, seed)
    return ps.subset(tr), ps.subset(va)


def evaluate_loss(cfg: UNetConfig, w, x: np.ndarray, y: np.ndarray, batch: int = 64) -> float:
    """Mean BCE over the whole set, batched for memory; exact pixel-weighted mean."""
    total, count = 0.0, 0
    for s in range(0, len(x), batch):
        probs = nn.unet_forward(cfg, w, x[s:s + batch])
        loss, _ = nn.bce_loss(probs, y[s:s + batch])
        total += loss * probs.size
        count += probs.size
    return total / count


def train(cfg: TrainConfig, net_cfg: UNetConfig, ps: PatchSet, out_dir,
          weights: dict | None = None) -> tuple[Path | None, TrainHistory]:
    """Train a U-net on ``ps``; returns (best checkpoint dir, history).

    A checkpoint is written to ``out_dir/checkpoint`` whenever the epoch's
    validation loss is strictly below every earlier one. All epochs run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ps.channels != net_cfg.in_channels:
        raise nn.ShapeError(f"PatchSet has {ps.channels} channels, model expects {net_cfg.in_channels}")
    tr_idx, va_idx = split_indices(len(ps), cfg.val_fraction, cfg.shuffle_seed)
    assert not set(tr_idx) & set(va_idx)
    if len(tr_idx) == 0:
        raise ValueError("empty training split")
    x, y = ps.arrays()
    net_cfg.check_input(x.shape)
    xt, yt, xv, yv = x[tr_idx], y[tr_idx], x[va_idx], y[va_idx]

    w = weights if weights is not None else nn.init_weights(net_cfg, cfg.init_seed)
    state = nn.AdamState.for_weights(w)
    rng = np.random.default_rng([cfg.shuffle_seed, 1])
    ckpt_dir = out / "checkpoint"
    history = TrainHistory()
    best = math.inf
    best_path = None
    meta = {"seed": cfg.init_seed, "train_config": asdict(cfg), "patch_size": ps.patch_size,
            "normalization": ps.meta.get("normalization")}

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(xt))
        loss_sum, px = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, grads = nn.loss_and_grads(net_cfg, w, xt[b], yt[b])
            nn.adam_step(w, grads, state, cfg.learning_rate)
            loss_sum += loss * len(b)
            px += len(b)
        train_loss = loss_sum / px
        val_loss = evaluate_loss(net_cfg, w, xv, yv, cfg.eval_batch)
        saved = val_loss < best
        if saved:
            best = val_loss
            best_path = nn.save_checkpoint(ckpt_dir, net_cfg, w, epoch=epoch, val_loss=val_loss, **meta)
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0, saved))
        log.info("epoch %d train %.5f val %.5f%s", epoch, train_loss, val_loss, " *" if saved else "")
        history.write_csv(out / "history.csv")  # rewritten each epoch so partial runs leave a log

    history.write_csv(out / "history.csv")
    return best_path, history
