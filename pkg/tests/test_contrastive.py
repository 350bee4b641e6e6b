"""Query construction, intra-image logits, and the contrastive loss."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from selfie.attention import init_positional_table
from selfie.autodiff import Tape, Tensor, backward
from selfie.contrastive import (ContrastiveScores, build_queries,
                                contrastive_logits, contrastive_loss,
                                predict_assignment)
from selfie.errors import ShapeError
from selfie.params import ParamStore
from selfie.rng import RngStream


def table_for(grid, hidden, seed=0, mode="factorized"):
    store = ParamStore()
    return init_positional_table(store, RngStream.from_seed(seed), grid,
                                 hidden, mode=mode)


def scores_of(arr):
    return ContrastiveScores(Tensor(np.asarray(arr, dtype=np.float32)))


class TestBuildQueries:
    def test_shape(self):
        table = table_for((4, 4), 8)
        u = Tensor(np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32))
        locs = np.tile(np.array([[[0, 0], [1, 2], [3, 3]]]), (3, 1, 1))
        assert build_queries(u, locs, table).shape == (3, 3, 8)

    def test_zero_table_queries_equal_summary(self):
        table = table_for((4, 4), 8)
        table.row.data[:] = 0.0
        table.col.data[:] = 0.0
        u = Tensor(np.random.default_rng(1).normal(size=(2, 8)).astype(np.float32))
        locs = np.zeros((2, 3, 2), dtype=int)
        v = build_queries(u, locs, table).data
        for i in range(3):
            npt.assert_array_equal(v[:, i], u.data)

    def test_query_differences_are_position_differences(self):
        # v_i - v_j depends only on the two locations, never on u
        table = table_for((4, 4), 8, seed=2)
        u = Tensor(np.random.default_rng(2).normal(size=(1, 8)).astype(np.float32))
        locs = np.array([[[1, 3], [2, 0]]])
        v = build_queries(u, locs, table).data
        expect = (table.row.data[1] + table.col.data[3]
                  - table.row.data[2] - table.col.data[0])
        npt.assert_allclose(v[0, 0] - v[0, 1], expect, atol=1e-6)

    def test_bad_location_rank(self):
        table = table_for((4, 4), 8)
        u = Tensor(np.zeros((2, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            build_queries(u, np.zeros((3, 2), dtype=int), table)


class TestContrastiveLogits:
    def test_hand_example(self):
        v = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]], dtype=np.float32))
        h = Tensor(np.array([[[2.0, 0.0], [0.0, 3.0]]], dtype=np.float32))
        scores = contrastive_logits(v, h)
        npt.assert_array_equal(scores.logits.data,
                               [[[2.0, 0.0], [0.0, 3.0]]])
        assert scores.nd == 2

    def test_orthonormal_rows_identity_assignment(self):
        v = Tensor(np.eye(4, dtype=np.float32)[None])
        scores = contrastive_logits(v, v)
        assignment, acc = predict_assignment(scores)
        npt.assert_array_equal(assignment, [[0, 1, 2, 3]])
        assert acc == 1.0

    def test_scaling_preserves_assignment(self):
        gen = np.random.default_rng(3)
        v = Tensor(gen.normal(size=(2, 4, 8)).astype(np.float32))
        h = Tensor(gen.normal(size=(2, 4, 8)).astype(np.float32))
        base = contrastive_logits(v, h)
        scaled = contrastive_logits(Tensor(v.data * 3.0), h)
        npt.assert_allclose(scaled.logits.data, base.logits.data * 3.0,
                            rtol=1e-5)
        npt.assert_array_equal(predict_assignment(scaled)[0],
                               predict_assignment(base)[0])

    def test_single_candidate_rejected(self):
        v = Tensor(np.zeros((1, 1, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            contrastive_logits(v, v)

    def test_width_mismatch(self):
        v = Tensor(np.zeros((1, 2, 4), dtype=np.float32))
        h = Tensor(np.zeros((1, 2, 6), dtype=np.float32))
        with pytest.raises(ShapeError):
            contrastive_logits(v, h)


class TestContrastiveLoss:
    def test_uniform_logits_ln_nd(self):
        for nd in (2, 4, 8):
            loss = contrastive_loss(scores_of(np.zeros((3, nd, nd))))
            npt.assert_allclose(float(loss.data), math.log(nd), atol=1e-5)

    def test_strong_diagonal_near_zero(self):
        logits = np.zeros((2, 4, 4), dtype=np.float32)
        logits[:, np.arange(4), np.arange(4)] = 1000.0
        loss = contrastive_loss(scores_of(logits))
        assert float(loss.data) < 1e-5

    def test_matches_per_row_softmax_oracle(self):
        gen = np.random.default_rng(4)
        logits = gen.normal(size=(2, 3, 3)).astype(np.float32)
        loss = float(contrastive_loss(scores_of(logits)).data)
        rows = logits.reshape(6, 3).astype(np.float64)
        shifted = rows - rows.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expect = -logp[np.arange(6), np.tile(np.arange(3), 2)].mean()
        npt.assert_allclose(loss, expect, rtol=1e-6)

    def test_joint_permutation_symmetry(self):
        gen = np.random.default_rng(5)
        logits = gen.normal(size=(2, 4, 4)).astype(np.float32)
        perm = np.array([2, 0, 3, 1])
        base = float(contrastive_loss(scores_of(logits)).data)
        permuted = float(contrastive_loss(
            scores_of(logits[:, perm][:, :, perm])).data)
        npt.assert_allclose(permuted, base, rtol=1e-6)

    def test_logit_gradient_rows_sum_to_zero(self):
        # softmax CE gradient per row is (p - onehot), which sums to zero
        logits = Tensor(np.random.default_rng(6).normal(size=(2, 3, 3))
                        .astype(np.float32), requires_grad=True)
        tape = Tape()
        with tape:
            loss = contrastive_loss(ContrastiveScores(logits))
        backward(loss, tape)
        npt.assert_allclose(logits.grad.sum(axis=-1), 0.0, atol=1e-6)

    def test_diagonal_gradient_negative(self):
        logits = Tensor(np.zeros((1, 3, 3), dtype=np.float32),
                        requires_grad=True)
        tape = Tape()
        with tape:
            loss = contrastive_loss(ContrastiveScores(logits))
        backward(loss, tape)
        diag = logits.grad[0, np.arange(3), np.arange(3)]
        assert np.all(diag < 0)
        off = logits.grad[0][~np.eye(3, dtype=bool)]
        assert np.all(off > 0)


class TestPredictAssignment:
    def test_anti_diagonal_scores_zero_accuracy(self):
        logits = np.zeros((1, 2, 2), dtype=np.float32)
        logits[0, 0, 1] = 5.0
        logits[0, 1, 0] = 5.0
        assignment, acc = predict_assignment(scores_of(logits))
        npt.assert_array_equal(assignment, [[1, 0]])
        assert acc == 0.0

    def test_ties_take_lowest_index(self):
        assignment, acc = predict_assignment(scores_of(np.zeros((1, 3, 3))))
        npt.assert_array_equal(assignment, [[0, 0, 0]])
        npt.assert_allclose(acc, 1.0 / 3.0)

    def test_random_scores_quarter_accuracy(self):
        gen = np.random.default_rng(7)
        accs = [predict_assignment(scores_of(
            gen.normal(size=(1, 4, 4)).astype(np.float32)))[1]
            for _ in range(1000)]
        assert abs(np.mean(accs) - 0.25) < 0.03

    def test_accuracy_counts_matches(self):
        logits = np.zeros((2, 3, 3), dtype=np.float32)
        logits[0, np.arange(3), np.arange(3)] = 1.0  # image 0 all correct
        logits[1, :, 0] = 1.0  # image 1 predicts 0 everywhere: one correct
        _, acc = predict_assignment(scores_of(logits))
        npt.assert_allclose(acc, 4.0 / 6.0)
