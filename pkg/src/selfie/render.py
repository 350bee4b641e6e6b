"""Jigsaw visualization: place each masked patch at its predicted slot and
draw a white border when the prediction is correct, red when it is wrong.

Output is binary PPM (P6), readable by common viewers and convertible with
any image tool.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .autodiff import EVAL
from .config import ExperimentConfig
from .contrastive import predict_assignment
from .data import unit_to_bytes
from .errors import ConfigError, ShapeError
from .model import pretrain_forward
from .params import ParamStore
from .patches import PretrainBatch, sample_mask_plan
from .rng import RngStream

WHITE = np.array([255, 255, 255], dtype=np.uint8)
RED = np.array([255, 0, 0], dtype=np.uint8)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary PPM: (H, W, 3) uint8."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"PPM needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _to_rgb_bytes(image: np.ndarray) -> np.ndarray:
    b = unit_to_bytes(image)
    if b.shape[-1] == 3:
        return b
    if b.shape[-1] == 1:
        return np.repeat(b, 3, axis=-1)
    return b[..., :3]


def compose_jigsaw(image: np.ndarray, decoder_patches: np.ndarray,
                   decoder_locs: np.ndarray, assignment: np.ndarray,
                   ps: int) -> np.ndarray:
    """One rendered frame: visible pixels as-is, masked slots filled with the
    assigned patch, border colored by correctness."""
    canvas = _to_rgb_bytes(image).copy()
    for i in range(len(assignment)):
        r, c = decoder_locs[i]
        patch = _to_rgb_bytes(decoder_patches[assignment[i]])
        ys, xs = r * ps, c * ps
        canvas[ys:ys + ps, xs:xs + ps] = patch
        color = WHITE if assignment[i] == i else RED
        canvas[ys, xs:xs + ps] = color
        canvas[ys + ps - 1, xs:xs + ps] = color
        canvas[ys:ys + ps, xs] = color
        canvas[ys:ys + ps, xs + ps - 1] = color
    return canvas


def render_jigsaw(store: Optional[ParamStore], cfg: ExperimentConfig,
                  images: np.ndarray, out_dir: str, tag: str = "jigsaw",
                  assignments: Optional[np.ndarray] = None
                  ) -> tuple[list[str], float]:
    """Render every image; returns (paths, fraction of correct assignments).

    Masked locations are drawn once from the config seed and shared by all
    images and repeat renders. ``assignments`` overrides the model's
    predictions ((B, nd) candidate indices); with it, ``store`` may be None.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ShapeError(f"render_jigsaw expects (B, H, W, C), got {images.shape}")
    if images.shape[1] % cfg.ps or images.shape[2] % cfg.ps:
        raise ConfigError(f"ps={cfg.ps} does not divide {images.shape[1]}x"
                          f"{images.shape[2]} render images")
    # one mask plan drawn from the config seed, shared by every image and
    # every repeat render
    ps = cfg.ps
    grid = (images.shape[1] // ps, images.shape[2] // ps)
    plan = sample_mask_plan(grid, cfg.p,
                            RngStream.from_seed(cfg.seed).child("render").generator())
    n = len(images)

    def gather(locs):
        return np.stack([[img[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps]
                          for r, c in locs] for img in images])

    batch = PretrainBatch(
        encoder_patches=gather(plan.encoder_locs),
        decoder_patches=gather(plan.decoder_locs),
        encoder_locations=np.tile(np.asarray(plan.encoder_locs, dtype=np.int64),
                                  (n, 1, 1)),
        decoder_locations=np.tile(np.asarray(plan.decoder_locs, dtype=np.int64),
                                  (n, 1, 1)),
        images=images,
        grid_shape=grid,
    )
    fixed_locs = batch.decoder_locations[0]

    if assignments is None:
        if store is None:
            raise ConfigError("render_jigsaw needs a model unless assignments are given")
        _, scores, _ = pretrain_forward(store, cfg.model_config(), batch, EVAL)
        assignments, _ = predict_assignment(scores)
    else:
        assignments = np.asarray(assignments)
        if assignments.shape != (len(images), len(fixed_locs)):
            raise ShapeError(f"assignments must be {(len(images), len(fixed_locs))}, "
                             f"got {assignments.shape}")

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for b in range(len(images)):
        frame = compose_jigsaw(batch.images[b], batch.decoder_patches[b],
                               fixed_locs, assignments[b], cfg.ps)
        path = os.path.join(out_dir, f"{tag}_{b:03d}.ppm")
        write_ppm(path, frame)
        paths.append(path)
    correct = float((assignments == np.arange(len(fixed_locs))).mean())
    return paths, correct
