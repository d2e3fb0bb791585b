"""Dihedral augmentation of square image/mask patch pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import Raster
from .sampler import PatchItem, PatchSet
from .vector import Mask

# each entry: (k quarter turns counter-clockwise, then flip axis or None)
TRANSFORMS = {
    "identity": (0, None),
    "rot90_k1": (1, None),
    "rot90_k2": (2, None),
    "rot90_k3": (3, None),
    "flip_h": (0, "h"),
    "flip_v": (0, "v"),
    "flip_h_rot90_k1": (1, "h"),
    "flip_v_rot90_k1": (1, "v"),
}
TRANSFORM_POOL = tuple(t for t in TRANSFORMS if t != "identity")
INVERSE = {
    "identity": "identity",
    "rot90_k1": "rot90_k3",
    "rot90_k2": "rot90_k2",
    "rot90_k3": "rot90_k1",
    "flip_h": "flip_h",
    "flip_v": "flip_v",
    "flip_h_rot90_k1": "flip_h_rot90_k1",
    "flip_v_rot90_k1": "flip_v_rot90_k1",
}


@dataclass(frozen=True)
class AugmentSpec:
    copies_per_patch: int = 2
    seed: int = 0
    transform_pool: tuple[str, ...] = TRANSFORM_POOL

    def __post_init__(self):
        if self.copies_per_patch < 0:
            raise ValueError("copies_per_patch must be >= 0")
        unknown = set(self.transform_pool) - set(TRANSFORM_POOL)
        if unknown:
            raise ValueError(f"unknown or identity transforms in pool: {sorted(unknown)}")
        if self.copies_per_patch > len(self.transform_pool):
            raise ValueError(
                f"copies_per_patch={self.copies_per_patch} exceeds pool size {len(self.transform_pool)}")


def transform_array(a: np.ndarray, t: str) -> np.ndarray:
    """Apply transform ``t`` to the last two axes of ``a``."""
    if t not in TRANSFORMS:
        raise ValueError(f"unknown transform {t!r}")
    k, flip = TRANSFORMS[t]
    if k and a.shape[-1] != a.shape[-2]:
        raise ValueError(f"rotation needs a square patch, got {a.shape[-2:]}")
    out = np.rot90(a, k, axes=(-2, -1))
    if flip == "h":
        out = out[..., ::-1]
    elif flip == "v":
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def apply_transform(image: Raster, mask: Mask, t: str) -> tuple[Raster, Mask]:
    if image.data.shape[-2:] != mask.data.shape:
        raise ValueError("image and mask dims differ")
    return (
        Raster(transform_array(image.data, t), image.transform, image.nodata, image.crs),
        Mask(transform_array(mask.data, t), mask.transform),
    )


def augment_dataset(ps: PatchSet, spec: AugmentSpec) -> PatchSet:
    """Originals first, then ``copies_per_patch`` distinct transformed copies of each."""
    if len(ps) == 0:
        raise ValueError("cannot augment an empty PatchSet")
    pool = list(spec.transform_pool)
    copies = []
    for i, it in enumerate(ps.items):
        rng = np.random.default_rng([spec.seed, i])
        for j in rng.choice(len(pool), size=spec.copies_per_patch, replace=False):
            t = pool[j]
            img, msk = apply_transform(it.image, it.mask, t)
            copies.append(PatchItem(img, msk, it.window, t))
    meta = dict(ps.meta)
    meta["augment"] = {"copies_per_patch": spec.copies_per_patch, "seed": spec.seed,
                       "transform_pool": pool}
    return PatchSet(list(ps.items) + copies, ps.patch_size, ps.channels, meta)
