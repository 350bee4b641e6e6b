"""Attention pooling A: transformer blocks over patch features plus a
learned seed token u0, and the positional-embedding tables.

The factorized table stores one row vector per grid row and one per grid
column (R + C learned vectors instead of R*C); position (r, c) is their sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (TRAIN, Tensor, add, broadcast_to, concat, dropout,
                       embedding_lookup, gelu, layer_norm, matmul, mul,
                       narrow, reshape, softmax, transpose)
from .errors import ConfigError, ShapeError
from .params import ParamStore
from .rng import RngStream

INIT_STD = 0.02  # normal-init scale for attention/FC weights and embeddings


@dataclass
class AttentionConfig:
    n_blocks: int = 2
    hidden: int = 128
    intermediate: int = 80
    heads: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if min(self.n_blocks, self.hidden, self.intermediate, self.heads) <= 0:
            raise ConfigError("attention dimensions must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class PositionalTable:
    """Either factorized (row + col vectors) or flat (one vector per cell)."""

    mode: str  # "factorized" | "flat"
    grid_shape: tuple[int, int]
    row: Optional[Tensor] = None
    col: Optional[Tensor] = None
    flat: Optional[Tensor] = None


def _normal(rng: RngStream, shape) -> np.ndarray:
    return (rng.generator().standard_normal(shape) * INIT_STD).astype(np.float32)


def init_positional_table(store: ParamStore, rng: RngStream,
                          grid_shape: tuple[int, int], hidden: int,
                          mode: str = "factorized") -> PositionalTable:
    rows, cols = grid_shape
    if mode == "factorized":
        store.add("embed/row", _normal(rng.child("embed", "row"), (rows, hidden)), "embed")
        store.add("embed/col", _normal(rng.child("embed", "col"), (cols, hidden)), "embed")
    elif mode == "flat":
        store.add("embed/flat", _normal(rng.child("embed", "flat"),
                                        (rows * cols, hidden)), "embed")
    else:
        raise ConfigError(f"unknown positional mode {mode!r}")
    return positional_table(store, grid_shape, mode)


def positional_table(store: ParamStore, grid_shape: tuple[int, int],
                     mode: str) -> PositionalTable:
    """View over the store's embedding parameters (post-init or post-load)."""
    if mode == "factorized":
        return PositionalTable(mode, grid_shape, row=store["embed/row"],
                               col=store["embed/col"])
    if mode == "flat":
        return PositionalTable(mode, grid_shape, flat=store["embed/flat"])
    raise ConfigError(f"unknown positional mode {mode!r}")


def position_embedding(locs: np.ndarray, table: PositionalTable) -> Tensor:
    """(.., 2) int grid coordinates -> (.., hidden) embeddings."""
    locs = np.asarray(locs)
    if locs.shape[-1] != 2:
        raise ShapeError(f"locations must end in a (row, col) axis, got {locs.shape}")
    r, c = locs[..., 0], locs[..., 1]
    if table.mode == "factorized":
        return add(embedding_lookup(table.row, r), embedding_lookup(table.col, c))
    rows, cols = table.grid_shape
    if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
        raise IndexError(f"location outside {rows}x{cols} grid")
    return embedding_lookup(table.flat, r * cols + c)


def init_attention_pool(store: ParamStore, rng: RngStream, cfg: AttentionConfig,
                        feature_dim: int) -> None:
    """u0, the d->hidden input projection (when needed), and all blocks."""
    h, inter = cfg.hidden, cfg.intermediate
    store.add("pool/u0", _normal(rng.child("pool", "u0"), (1, h)), "pool")
    if feature_dim != h:
        store.add("pool/in_proj/w", _normal(rng.child("pool", "in_proj"),
                                            (feature_dim, h)), "pool")
        store.add("pool/in_proj/b", np.zeros(h), "pool", decay=False)
    for i in range(cfg.n_blocks):
        p = f"pool/block{i}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}/attn/{name}", _normal(rng.child(p, name), (h, h)), "pool")
            store.add(f"{p}/attn/{name[1]}b", np.zeros(h), "pool", decay=False)
        store.add(f"{p}/fc1/w", _normal(rng.child(p, "fc1"), (h, inter)), "pool")
        store.add(f"{p}/fc1/b", np.zeros(inter), "pool", decay=False)
        store.add(f"{p}/fc2/w", _normal(rng.child(p, "fc2"), (inter, h)), "pool")
        store.add(f"{p}/fc2/b", np.zeros(h), "pool", decay=False)
        store.add(f"{p}/ln/gamma", np.ones(h), "pool", decay=False)
        store.add(f"{p}/ln/beta", np.zeros(h), "pool", decay=False)


def project_features(store: ParamStore, h: Tensor) -> Tensor:
    """Apply the shared d->hidden projection when one exists."""
    if "pool/in_proj/w" not in store:
        return h
    return add(matmul(h, store["pool/in_proj/w"]), store["pool/in_proj/b"])


def _linear(store: ParamStore, x: Tensor, w: str, b: str) -> Tensor:
    return add(matmul(x, store[w]), store[b])


def _drop_gen(rng: Optional[RngStream], label: str, mode: str, rate: float):
    if mode != TRAIN or rate == 0.0 or rng is None:
        return None
    return rng.child(label).generator()


def attention_block(x: Tensor, store: ParamStore, cfg: AttentionConfig,
                    prefix: str, mode: str, rng: Optional[RngStream] = None,
                    attn_out: Optional[list] = None) -> Tensor:
    """One block, ordered exactly: self-attention -> FC up -> GeLU -> FC down
    -> dropout -> residual from block input -> layer norm.

    ``attn_out`` (when given) receives the post-softmax attention weights.
    """
    b, t, hidden = x.shape
    if hidden != cfg.hidden:
        raise ShapeError(f"block input width {hidden} != config hidden {cfg.hidden}")
    heads, dh = cfg.heads, cfg.hidden // cfg.heads

    def split_heads(y):
        return transpose(reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(store, x, f"{prefix}/attn/wq", f"{prefix}/attn/qb"))
    k = split_heads(_linear(store, x, f"{prefix}/attn/wk", f"{prefix}/attn/kb"))
    v = split_heads(_linear(store, x, f"{prefix}/attn/wv", f"{prefix}/attn/vb"))

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores)
    if attn_out is not None:
        attn_out.append(weights.data.copy())
    weights = dropout(weights, cfg.dropout_rate, mode,
                      _drop_gen(rng, "attn_drop", mode, cfg.dropout_rate))
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, t, cfg.hidden))
    attn = _linear(store, ctx, f"{prefix}/attn/wo", f"{prefix}/attn/ob")

    f = gelu(_linear(store, attn, f"{prefix}/fc1/w", f"{prefix}/fc1/b"))
    f = _linear(store, f, f"{prefix}/fc2/w", f"{prefix}/fc2/b")
    f = dropout(f, cfg.dropout_rate, mode,
                _drop_gen(rng, "out_drop", mode, cfg.dropout_rate))
    return layer_norm(add(x, f), store[f"{prefix}/ln/gamma"], store[f"{prefix}/ln/beta"])


def pool_summarize(h: Tensor, locs: Optional[np.ndarray], store: ParamStore,
                   cfg: AttentionConfig, table: Optional[PositionalTable],
                   mode: str, rng: Optional[RngStream] = None) -> Tensor:
    """(B, n, d) patch features -> (B, hidden) summary u.

    Prepends u0, adds positional embeddings to the patch tokens when a table
    is given, runs the blocks, and returns the output at u0's slot.
    """
    b, n, _ = h.shape
    x = project_features(store, h)
    if table is not None:
        if locs is None:
            raise ShapeError("positional table given but no locations")
        locs = np.asarray(locs)
        if locs.shape[-2] != n:
            raise ShapeError(f"{locs.shape[-2]} locations for {n} patch tokens")
        x = add(x, position_embedding(locs, table))
    u0 = broadcast_to(reshape(store["pool/u0"], (1, 1, cfg.hidden)), (b, 1, cfg.hidden))
    tokens = concat([u0, x], axis=1)
    for i in range(cfg.n_blocks):
        block_rng = rng.child(f"block{i}") if rng is not None else None
        tokens = attention_block(tokens, store, cfg, f"pool/block{i}", mode, block_rng)
    return reshape(narrow(tokens, 1, 0, 1), (b, cfg.hidden))
