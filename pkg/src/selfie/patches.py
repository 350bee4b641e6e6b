"""Images -> augmented patch grids, mask plans, and pretrain batches.

All randomness flows through RngStream children so batches are a pure
function of (root seed, step); distractor candidates for each image are
always that image's own masked patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE
from .errors import ConfigError
from .rng import RngStream


@dataclass
class PatchSet:
    """Non-overlapping ps x ps patches of one image in row-major grid order."""

    image_id: int
    patches: list[np.ndarray]
    locations: list[tuple[int, int]]
    grid_shape: tuple[int, int]


@dataclass
class MaskPlan:
    """Partition of grid locations into encoder-visible and decoder-masked."""

    encoder_locs: list[tuple[int, int]]
    decoder_locs: list[tuple[int, int]]
    keep_fraction: float


@dataclass
class PretrainBatch:
    """Fixed-shape batch: every image contributes ne visible + nd masked patches.

    ``images`` holds the augmented images so that reassembling patches at
    their locations can be checked (and rendered) bit-exactly.
    """

    encoder_patches: np.ndarray    # (B, ne, ps, ps, C)
    decoder_patches: np.ndarray    # (B, nd, ps, ps, C)
    encoder_locations: np.ndarray  # (B, ne, 2) int
    decoder_locations: np.ndarray  # (B, nd, 2) int
    images: np.ndarray             # (B, H, W, C) after augmentation
    grid_shape: tuple[int, int]


def extract_patch_grid(image: np.ndarray, ps: int, image_id: int = 0) -> PatchSet:
    """Cut an H x W x C image into a grid of ps x ps patches."""
    h, w = image.shape[0], image.shape[1]
    if ps <= 0 or h % ps or w % ps:
        raise ConfigError(f"patch size {ps} does not divide image {h}x{w} evenly")
    rows, cols = h // ps, w // ps
    patches, locations = [], []
    for r in range(rows):
        for c in range(cols):
            patches.append(image[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps])
            locations.append((r, c))
    return PatchSet(image_id, patches, locations, (rows, cols))


def augment_pad_crop(image: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on every side, then crop a random original-size window."""
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return image
    h, w = image.shape[0], image.shape[1]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return np.ascontiguousarray(padded[top:top + h, left:left + w])


def mask_counts(grid_shape: tuple[int, int], p: float) -> tuple[int, int]:
    """(ne, nd): visible and masked patch counts for keep-fraction p."""
    g = grid_shape[0] * grid_shape[1]
    if not 0.0 < p < 1.0:
        raise ConfigError(f"keep fraction p must be in (0, 1), got {p}")
    ne = int(np.floor(p * g + 0.5))
    nd = g - ne
    if nd < 2:
        raise ConfigError(f"mask plan leaves {nd} decoder patches for grid {grid_shape}, "
                          f"p={p}; need >= 2 (use a smaller p or a larger grid)")
    if ne < 1:
        raise ConfigError(f"mask plan leaves no visible patches for grid {grid_shape}, p={p}")
    return ne, nd


def sample_mask_plan(grid_shape: tuple[int, int], p: float,
                     rng: np.random.Generator) -> MaskPlan:
    """Route a uniformly random round(p*G) of the grid to the encoder."""
    rows, cols = grid_shape
    ne, _ = mask_counts(grid_shape, p)
    order = rng.permutation(rows * cols)
    locs = [(int(i) // cols, int(i) % cols) for i in order]
    return MaskPlan(encoder_locs=locs[:ne], decoder_locs=locs[ne:], keep_fraction=p)


def _gather(image: np.ndarray, locs: list[tuple[int, int]], ps: int) -> np.ndarray:
    return np.stack([image[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] for r, c in locs])


def build_pretrain_batch(images: list[np.ndarray], ps: int, p: float,
                         rng: RngStream, pad: int = 0) -> PretrainBatch:
    """Augment, grid, and mask a batch of same-shape images.

    ne/nd are functions of (grid, p) alone, so every image in the batch
    yields the same tensor shapes; mask locations are drawn independently
    per image from ``rng.child("mask", i)``.
    """
    if not images:
        raise ConfigError("build_pretrain_batch needs at least one image")
    h, w = images[0].shape[0], images[0].shape[1]
    if h % ps or w % ps:
        raise ConfigError(f"patch size {ps} does not divide image {h}x{w} evenly")
    grid_shape = (h // ps, w // ps)
    mask_counts(grid_shape, p)

    aug, enc_p, dec_p, enc_l, dec_l = [], [], [], [], []
    for i, image in enumerate(images):
        if image.shape != images[0].shape:
            raise ConfigError(f"batch images must share a shape: image {i} has "
                              f"{image.shape}, image 0 has {images[0].shape}")
        img = augment_pad_crop(np.asarray(image, dtype=DTYPE), pad,
                               rng.child("aug", i).generator())
        plan = sample_mask_plan(grid_shape, p, rng.child("mask", i).generator())
        aug.append(img)
        enc_p.append(_gather(img, plan.encoder_locs, ps))
        dec_p.append(_gather(img, plan.decoder_locs, ps))
        enc_l.append(plan.encoder_locs)
        dec_l.append(plan.decoder_locs)

    return PretrainBatch(
        encoder_patches=np.stack(enc_p),
        decoder_patches=np.stack(dec_p),
        encoder_locations=np.asarray(enc_l, dtype=np.int64),
        decoder_locations=np.asarray(dec_l, dtype=np.int64),
        images=np.stack(aug),
        grid_shape=grid_shape,
    )


def reassemble(batch: PretrainBatch, ps: int) -> np.ndarray:
    """Place every patch back at its grid location; inverse of the split."""
    out = np.zeros_like(batch.images)
    for b in range(out.shape[0]):
        for patches, locs in ((batch.encoder_patches, batch.encoder_locations),
                              (batch.decoder_patches, batch.decoder_locations)):
            for k in range(patches.shape[1]):
                r, c = locs[b, k]
                out[b, r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] = patches[b, k]
    return out


def image_to_grid(images: np.ndarray, ps: int) -> tuple[np.ndarray, np.ndarray]:
    """Split (B,H,W,C) into ((B,G,ps,ps,C), (G,2) locations), row-major."""
    b, h, w, c = images.shape
    if h % ps or w % ps:
        raise ConfigError(f"patch size {ps} does not divide image {h}x{w} evenly")
    rows, cols = h // ps, w // ps
    g = images.reshape(b, rows, ps, cols, ps, c).transpose(0, 1, 3, 2, 4, 5)
    patches = np.ascontiguousarray(g.reshape(b, rows * cols, ps, ps, c))
    locs = np.asarray([(r, cc) for r in range(rows) for cc in range(cols)], dtype=np.int64)
    return patches, locs
