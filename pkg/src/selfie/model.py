"""Complete models: the pretraining encoder-decoder and the two finetune
classifiers (standard 4-group convnet, and the hybrid that keeps attention
pooling on top of P).

Parameter names and role tags are identical across models wherever weights
are meant to transfer, so block-wise transfer is a name-keyed copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (AttentionConfig, init_attention_pool,
                        init_positional_table, pool_summarize, positional_table,
                        project_features)
from .autodiff import (Tensor, add, as_tensor, conv2d, matmul, narrow,
                       spatial_avg_pool)
from .contrastive import (ContrastiveScores, build_queries, contrastive_logits,
                          contrastive_loss)
from .encoder import (PatchNetConfig, add_bn, add_groups, bn_relu,
                      encode_patches, forward_groups, he_normal,
                      init_patch_network)
from .errors import ConfigError, ShapeError
from .params import ParamStore
from .patches import PretrainBatch, image_to_grid
from .rng import RngStream

STANDARD = "standard"
HYBRID = "hybrid"


@dataclass
class ModelConfig:
    """The pretraining model: P + attention pooling + positional tables."""

    patch_net: PatchNetConfig = field(default_factory=PatchNetConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    grid_shape: tuple[int, int] = (4, 4)
    positional_mode: str = "flat"  # "flat" for small grids, "factorized" for large
    encoder_positions: bool = True


@dataclass
class ClassifierConfig:
    """The finetune model; ``mode`` picks the head architecture."""

    patch_net: PatchNetConfig = field(default_factory=PatchNetConfig)
    classes: int = 10
    mode: str = STANDARD
    group4_blocks: int = 2
    group4_channels: int = 128
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    grid_shape: tuple[int, int] = (4, 4)
    positional_mode: str = "flat"
    encoder_positions: bool = True

    def __post_init__(self):
        if self.mode not in (STANDARD, HYBRID):
            raise ConfigError(f"unknown classifier mode {self.mode!r}")
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")


def init_pretrain_model(cfg: ModelConfig, rng: RngStream) -> ParamStore:
    store = init_patch_network(cfg.patch_net, rng)
    init_attention_pool(store, rng, cfg.attention, cfg.patch_net.feature_dim)
    init_positional_table(store, rng, cfg.grid_shape, cfg.attention.hidden,
                          cfg.positional_mode)
    return store


def pretrain_forward(store: ParamStore, cfg: ModelConfig, batch: PretrainBatch,
                     mode: str, rng: Optional[RngStream] = None
                     ) -> tuple[Tensor, ContrastiveScores, Tensor]:
    """Full pretraining pass: encode both patch sets jointly with the shared
    P (one forward, so BN statistics pool over visible and masked patches),
    summarize the visible ones, score the masked ones. Returns (loss,
    scores, u)."""
    if batch.grid_shape != cfg.grid_shape:
        raise ShapeError(f"batch grid {batch.grid_shape} != model grid {cfg.grid_shape}")
    b, ne = batch.encoder_patches.shape[:2]
    nd = batch.decoder_patches.shape[1]
    table = positional_table(store, cfg.grid_shape, cfg.positional_mode)

    all_patches = np.concatenate([batch.encoder_patches, batch.decoder_patches], axis=1)
    h = encode_patches(all_patches, store, cfg.patch_net, mode)
    h_enc = narrow(h, 1, 0, ne)
    h_dec = project_features(store, narrow(h, 1, ne, nd))

    u = pool_summarize(h_enc, batch.encoder_locations, store, cfg.attention,
                       table if cfg.encoder_positions else None, mode,
                       rng.child("pool") if rng is not None else None)
    v = build_queries(u, batch.decoder_locations, table)
    scores = contrastive_logits(v, h_dec)
    return contrastive_loss(scores), scores, u


def init_classifier(cfg: ClassifierConfig, rng: RngStream) -> ParamStore:
    store = ParamStore()
    pn = cfg.patch_net
    store.add("stem/conv/w",
              he_normal(rng.child("stem"), (3, 3, pn.in_channels, pn.stem_channels)),
              "stem")
    add_groups(store, rng, pn.stem_channels, pn.block_counts, pn.group_channels)

    if cfg.mode == STANDARD:
        add_groups(store, rng, pn.feature_dim, (cfg.group4_blocks,),
                   (cfg.group4_channels,), first_group=4)
        add_bn(store, "group4/post_bn", cfg.group4_channels, "group4")
        head_in = cfg.group4_channels
    else:
        add_bn(store, "group3/post_bn", pn.feature_dim, "group3")
        init_attention_pool(store, rng, cfg.attention, pn.feature_dim)
        init_positional_table(store, rng, cfg.grid_shape, cfg.attention.hidden,
                              cfg.positional_mode)
        head_in = cfg.attention.hidden

    store.add("head/fc/w", he_normal(rng.child("head"), (head_in, cfg.classes)), "head")
    store.add("head/fc/b", np.zeros(cfg.classes), "head", decay=False)
    return store


def classifier_forward(store: ParamStore, cfg: ClassifierConfig,
                       images: np.ndarray, mode: str,
                       rng: Optional[RngStream] = None) -> Tensor:
    """(B, H, W, C) images -> (B, classes) logits."""
    if cfg.mode == STANDARD:
        x = as_tensor(images)
        pn = cfg.patch_net
        y = conv2d(x, store["stem/conv/w"], stride=1, pad="same")
        y = forward_groups(y, store, pn.block_counts, pn.group_channels,
                           pn.stem_channels, mode)
        y = forward_groups(y, store, (cfg.group4_blocks,), (cfg.group4_channels,),
                           pn.feature_dim, mode, first_group=4)
        y = bn_relu(y, store, "group4/post_bn", mode)
        feats = spatial_avg_pool(y)
    else:
        patches, locs = image_to_grid(np.asarray(images), cfg.patch_net.ps)
        if (patches.shape[1] != cfg.grid_shape[0] * cfg.grid_shape[1]):
            raise ShapeError(f"image grid {patches.shape[1]} patches != config grid "
                             f"{cfg.grid_shape}")
        h = encode_patches(patches, store, cfg.patch_net, mode)
        table = positional_table(store, cfg.grid_shape, cfg.positional_mode)
        feats = pool_summarize(h, locs, store, cfg.attention,
                               table if cfg.encoder_positions else None, mode,
                               rng.child("pool") if rng is not None else None)
    return add(matmul(feats, store["head/fc/w"]), store["head/fc/b"])
