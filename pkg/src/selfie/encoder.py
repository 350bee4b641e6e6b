"""The patch processing network P: a pre-activation residual net.

Three bottleneck block groups at desk-scale widths; every patch is mapped
independently to one feature vector by spatial average pooling after the
final activation. Group builders are reusable so the downstream classifier
can append a fourth group with identical block anatomy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (BatchNormState, Tensor, add, as_tensor, batch_norm,
                       conv2d, relu, reshape, spatial_avg_pool)
from .errors import ConfigError, ShapeError
from .params import ParamStore
from .rng import RngStream


@dataclass
class PatchNetConfig:
    """Shape of P. ``feature_dim`` always equals the last group's width."""

    stem_channels: int = 16
    block_counts: tuple[int, ...] = (2, 2, 2)
    group_channels: tuple[int, ...] = (16, 32, 64)
    ps: int = 8
    in_channels: int = 3

    def __post_init__(self):
        self.block_counts = tuple(int(n) for n in self.block_counts)
        self.group_channels = tuple(int(c) for c in self.group_channels)
        if len(self.block_counts) != 3 or len(self.group_channels) != 3:
            raise ConfigError("patch network uses exactly 3 block groups")
        if min((self.stem_channels, self.ps, self.in_channels) + self.block_counts
               + self.group_channels) <= 0:
            raise ConfigError("patch network dimensions must be positive")

    @property
    def feature_dim(self) -> int:
        return self.group_channels[-1]


def he_normal(rng: RngStream, shape: tuple[int, ...]) -> np.ndarray:
    """He-normal init for conv/FC kernels: std = sqrt(2 / fan_in)."""
    fan_in = int(np.prod(shape[:-1]))
    std = math.sqrt(2.0 / fan_in)
    return (rng.generator().standard_normal(shape) * std).astype(np.float32)


def add_bn(store: ParamStore, name: str, channels: int, role: str) -> None:
    """Affine BN parameters plus running statistics, all checkpointable."""
    store.add(f"{name}/gamma", np.ones(channels), role, decay=False)
    store.add(f"{name}/beta", np.zeros(channels), role, decay=False)
    store.add(f"{name}/mean", np.zeros(channels), role, trainable=False, decay=False)
    store.add(f"{name}/var", np.ones(channels), role, trainable=False, decay=False)
    store.add(f"{name}/count", np.zeros(1), role, trainable=False, decay=False)


def bn_state(store: ParamStore, name: str) -> BatchNormState:
    return BatchNormState(store[f"{name}/mean"], store[f"{name}/var"],
                          store[f"{name}/count"])


def bn_relu(x: Tensor, store: ParamStore, name: str, mode: str) -> Tensor:
    out = batch_norm(x, store[f"{name}/gamma"], store[f"{name}/beta"],
                     bn_state(store, name), mode)
    return relu(out)


def _block_plan(first_group: int, counts, channels, in_ch: int):
    """Yield (prefix, role, in_ch, out_ch, stride) for every residual block."""
    for gi, (count, out_ch) in enumerate(zip(counts, channels), start=first_group):
        for b in range(count):
            stride = 2 if (gi > 1 and b == 0) else 1
            yield f"group{gi}/block{b}", f"group{gi}", in_ch, out_ch, stride
            in_ch = out_ch


def add_groups(store: ParamStore, rng: RngStream, in_ch: int,
               counts, channels, first_group: int = 1) -> int:
    """Add bottleneck block groups; returns the final channel count."""
    for prefix, role, cin, cout, stride in _block_plan(first_group, counts, channels, in_ch):
        mid = max(cout // 4, 1)
        add_bn(store, f"{prefix}/bn1", cin, role)
        if stride != 1 or cin != cout:
            store.add(f"{prefix}/proj/w", he_normal(rng.child(prefix, "proj"),
                                                    (1, 1, cin, cout)), role)
        store.add(f"{prefix}/conv1/w", he_normal(rng.child(prefix, "conv1"),
                                                 (1, 1, cin, mid)), role)
        add_bn(store, f"{prefix}/bn2", mid, role)
        store.add(f"{prefix}/conv2/w", he_normal(rng.child(prefix, "conv2"),
                                                 (3, 3, mid, mid)), role)
        add_bn(store, f"{prefix}/bn3", mid, role)
        store.add(f"{prefix}/conv3/w", he_normal(rng.child(prefix, "conv3"),
                                                 (1, 1, mid, cout)), role)
    return channels[-1] if len(channels) else in_ch


def forward_groups(x: Tensor, store: ParamStore, counts, channels,
                   in_ch: int, mode: str, first_group: int = 1) -> Tensor:
    for prefix, _, cin, cout, stride in _block_plan(first_group, counts, channels, in_ch):
        z = bn_relu(x, store, f"{prefix}/bn1", mode)
        if f"{prefix}/proj/w" in store:
            shortcut = conv2d(z, store[f"{prefix}/proj/w"], stride=stride, pad="same")
        else:
            shortcut = x
        y = conv2d(z, store[f"{prefix}/conv1/w"], stride=1, pad="same")
        y = bn_relu(y, store, f"{prefix}/bn2", mode)
        y = conv2d(y, store[f"{prefix}/conv2/w"], stride=stride, pad="same")
        y = bn_relu(y, store, f"{prefix}/bn3", mode)
        y = conv2d(y, store[f"{prefix}/conv3/w"], stride=1, pad="same")
        x = add(y, shortcut)
    return x


def init_patch_network(config: PatchNetConfig, rng: RngStream,
                       store: ParamStore | None = None) -> ParamStore:
    """Parameters of P: stem conv, groups 1-3, and the post-group norm."""
    store = store if store is not None else ParamStore()
    in_ch = config.stem_channels
    store.add("stem/conv/w",
              he_normal(rng.child("stem"), (3, 3, config.in_channels, in_ch)), "stem")
    add_groups(store, rng, in_ch, config.block_counts, config.group_channels)
    add_bn(store, "group3/post_bn", config.feature_dim, "group3")
    return store


def forward_patch_network(x: Tensor, store: ParamStore, config: PatchNetConfig,
                          mode: str) -> Tensor:
    """(N, ps, ps, C) pixels -> (N, d) pooled features."""
    y = conv2d(x, store["stem/conv/w"], stride=1, pad="same")
    y = forward_groups(y, store, config.block_counts, config.group_channels,
                       config.stem_channels, mode)
    y = bn_relu(y, store, "group3/post_bn", mode)
    return spatial_avg_pool(y)


def encode_patches(patches, store: ParamStore, config: PatchNetConfig,
                   mode: str) -> Tensor:
    """(B, n, ps, ps, C) patches -> (B, n, d) features, patches independent.

    The (B, n) axes are flattened into one batch axis, so batch-norm
    statistics during training pool over all B*n patch instances.
    """
    x = as_tensor(patches)
    if x.ndim != 5:
        raise ShapeError(f"encode_patches expects (B, n, ps, ps, C), got {x.shape}")
    b, n, ph, pw, c = x.shape
    if ph != config.ps or pw != config.ps:
        raise ShapeError(f"patch size {ph}x{pw} does not match config ps={config.ps}")
    flat = reshape(x, (b * n, ph, pw, c))
    feats = forward_patch_network(flat, store, config, mode)
    return reshape(feats, (b, n, config.feature_dim))
