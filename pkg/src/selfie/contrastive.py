"""Location-seeded queries, intra-image candidate scoring, and the
contrastive classification loss.

Each masked location i yields a query v_i = u + pos(loc_i); candidates are
exclusively the same image's masked patches, and the correct answer for
query i is candidate i (the patch cut from that location).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul, reshape, softmax_cross_entropy, transpose
from .attention import PositionalTable, position_embedding
from .errors import ShapeError


@dataclass
class ContrastiveScores:
    """logits[b, i, j] = v_i . h_j within image b; target assignment is i -> i."""

    logits: Tensor  # (B, nd, nd)

    @property
    def nd(self) -> int:
        return self.logits.shape[1]


def build_queries(u: Tensor, decoder_locs: np.ndarray,
                  table: PositionalTable) -> Tensor:
    """(B, hidden) summaries + (B, nd, 2) locations -> (B, nd, hidden) queries."""
    b, hidden = u.shape
    locs = np.asarray(decoder_locs)
    if locs.ndim != 3 or locs.shape[0] != b:
        raise ShapeError(f"decoder locations must be (B, nd, 2), got {locs.shape}")
    pos = position_embedding(locs, table)
    return add(reshape(u, (b, 1, hidden)), pos)


def contrastive_logits(v: Tensor, h_dec: Tensor) -> ContrastiveScores:
    """Dot products of every query against every same-image candidate."""
    if v.ndim != 3 or h_dec.ndim != 3:
        raise ShapeError(f"queries and candidates must be (B, nd, hidden), got "
                         f"{v.shape} and {h_dec.shape}")
    if v.shape[-1] != h_dec.shape[-1]:
        raise ShapeError(f"query width {v.shape[-1]} != candidate width {h_dec.shape[-1]}")
    if h_dec.shape[1] < 2:
        raise ShapeError(f"need >= 2 candidates, got {h_dec.shape[1]}")
    return ContrastiveScores(matmul(v, transpose(h_dec, (0, 2, 1))))


def contrastive_loss(scores: ContrastiveScores) -> Tensor:
    """Mean softmax cross-entropy over all B*nd rows with target j = i."""
    b, nd, _ = scores.logits.shape
    flat = reshape(scores.logits, (b * nd, nd))
    targets = np.tile(np.arange(nd), b)
    return softmax_cross_entropy(flat, targets)


def predict_assignment(scores: ContrastiveScores) -> tuple[np.ndarray, float]:
    """Per-row argmax (ties -> lowest index) and the pretext accuracy."""
    logits = scores.logits.data
    assignment = np.argmax(logits, axis=-1)
    correct = assignment == np.arange(scores.nd)
    return assignment, float(correct.mean())
