import math

import numpy as np
import pytest

from trialign.alignloss import (
    AlignedBatch,
    NegativeMask,
    batch_similarity,
    contrastive_loss,
    contrastive_loss_grad,
    per_anchor_terms,
)
from trialign.errors import DimensionMismatch, ValidationError


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_batch(rng, n, d, text_present=None):
    hp, ht, hi = (unit_rows(rng.normal(size=(n, d))) for _ in range(3))
    return AlignedBatch(hp, ht, hi, text_present=text_present)


def random_mask(rng, n, p=0.3):
    excluded = rng.random((n, n)) < p
    np.fill_diagonal(excluded, False)
    return NegativeMask(excluded)


def scalar_oracle(batch, tau, mask, text_present=None):
    """Naive per-anchor, per-term recomputation of the loss with plain floats."""
    n = batch.n
    present = (
        [True] * n if text_present is None else [bool(x) for x in text_present]
    )
    hp = [list(map(float, row)) for row in batch.hp]
    ht = [list(map(float, row)) for row in batch.ht]
    hi = [list(map(float, row)) for row in batch.hi]
    excluded = mask.excluded

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    def term(anchor_rows, cand_rows, i, cand_ok):
        pos = math.exp(dot(anchor_rows[i], cand_rows[i]) / tau)
        denom = 0.0
        for j in range(n):
            if j == i:
                denom += pos
            elif cand_ok[j] and not excluded[i][j]:
                denom += math.exp(dot(anchor_rows[i], cand_rows[j]) / tau)
        return -math.log(pos / denom)

    total = 0.0
    count = 0
    for i in range(n):
        if present[i]:
            total += term(hp, ht, i, present)  # shape anchor vs texts
            total += term(ht, hp, i, [True] * n)  # text anchor vs shapes
            count += 2
        total += term(hp, hi, i, [True] * n)
        total += term(hi, hp, i, [True] * n)
        count += 2
    return total / count


class TestWorkedValues:
    def test_single_row_batch_is_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            batch = random_batch(rng, 1, 4)
            assert contrastive_loss(batch, 0.37, NegativeMask.empty(1)) == 0.0

    def test_orthonormal_pair_value(self):
        h = np.eye(2)
        batch = AlignedBatch(h, h.copy(), h.copy())
        loss = contrastive_loss(batch, 1.0, NegativeMask.empty(2))
        assert abs(loss - math.log(1.0 + math.exp(-1.0))) <= 1e-12

    def test_full_mask_gives_zero(self):
        h = np.eye(2)
        batch = AlignedBatch(h, h.copy(), h.copy())
        mask = NegativeMask(np.array([[False, True], [True, False]]))
        assert contrastive_loss(batch, 1.0, mask) == 0.0

    def test_tau_must_be_positive(self):
        batch = random_batch(np.random.default_rng(1), 2, 3)
        with pytest.raises(ValidationError):
            contrastive_loss(batch, 0.0, NegativeMask.empty(2))

    def test_non_unit_rows_rejected(self):
        bad = np.array([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(ValidationError):
            AlignedBatch(bad, np.eye(2), np.eye(2))


class TestOracleEquivalence:
    def test_vectorized_equals_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for n in range(1, 9):
            for trial in range(3):
                batch = random_batch(rng, n, int(rng.integers(2, 9)))
                mask = random_mask(rng, n)
                tau = float(rng.uniform(0.05, 2.0))
                got = contrastive_loss(batch, tau, mask)
                want = scalar_oracle(batch, tau, mask)
                assert abs(got - want) <= 1e-10

    def test_oracle_equivalence_with_textless_rows(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            n = int(rng.integers(2, 7))
            present = rng.random(n) < 0.7
            ht = unit_rows(rng.normal(size=(n, 5)))
            batch = AlignedBatch(
                unit_rows(rng.normal(size=(n, 5))),
                ht,
                unit_rows(rng.normal(size=(n, 5))),
                text_present=present,
            )
            mask = random_mask(rng, n)
            tau = 0.5
            got = contrastive_loss(batch, tau, mask)
            want = scalar_oracle(batch, tau, mask, text_present=present)
            assert abs(got - want) <= 1e-10

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        n, d = 6, 4
        batch = random_batch(rng, n, d)
        mask = random_mask(rng, n)
        base = contrastive_loss(batch, 0.3, mask)
        for _ in range(5):
            perm = rng.permutation(n)
            permuted = AlignedBatch(batch.hp[perm], batch.ht[perm], batch.hi[perm])
            pmask = NegativeMask(mask.excluded[np.ix_(perm, perm)])
            assert abs(contrastive_loss(permuted, 0.3, pmask) - base) <= 1e-12

    def test_masking_never_increases_per_anchor_terms(self):
        rng = np.random.default_rng(5)
        n = 6
        batch = random_batch(rng, n, 8)
        empty = per_anchor_terms(batch, 0.4, NegativeMask.empty(n))
        for trial in range(10):
            mask = random_mask(rng, n, p=0.4)
            masked = per_anchor_terms(batch, 0.4, mask)
            assert np.all(masked <= empty + 1e-12)


class TestGradients:
    def test_single_row_gradients_zero(self):
        batch = random_batch(np.random.default_rng(6), 1, 4)
        d_hp, d_ht, d_hi, d_lt = contrastive_loss_grad(batch, 0.7, NegativeMask.empty(1))
        assert not d_hp.any() and not d_ht.any() and not d_hi.any()
        assert d_lt == 0.0

    def test_fully_masked_gradients_zero(self):
        h = np.eye(3)
        batch = AlignedBatch(h, h.copy(), h.copy())
        mask = NegativeMask(~np.eye(3, dtype=bool))
        d_hp, d_ht, d_hi, d_lt = contrastive_loss_grad(batch, 1.0, mask)
        assert not d_hp.any() and not d_ht.any() and not d_hi.any()
        assert d_lt == 0.0

    def _finite_difference_check(self, batch, tau, mask, text_present=None):
        d_hp, d_ht, d_hi, d_lt = contrastive_loss_grad(batch, tau, mask)
        eps = 1e-6

        def loss_of(hp, ht, hi, t):
            b = AlignedBatch.__new__(AlignedBatch)
            b.hp, b.ht, b.hi = hp, ht, hi
            b.text_present = (
                np.ones(hp.shape[0], dtype=bool) if text_present is None else text_present
            )
            return contrastive_loss(b, t, mask)

        blocks = {"hp": batch.hp, "ht": batch.ht, "hi": batch.hi}
        grads = {"hp": d_hp, "ht": d_ht, "hi": d_hi}
        worst = 0.0
        for key in blocks:
            mat = blocks[key]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    plus = {k: v.copy() for k, v in blocks.items()}
                    minus = {k: v.copy() for k, v in blocks.items()}
                    plus[key][i, j] += eps
                    minus[key][i, j] -= eps
                    fd = (
                        loss_of(plus["hp"], plus["ht"], plus["hi"], tau)
                        - loss_of(minus["hp"], minus["ht"], minus["hi"], tau)
                    ) / (2 * eps)
                    got = grads[key][i, j]
                    worst = max(worst, abs(fd - got) / max(abs(fd), abs(got), 1e-7))
        lt = math.log(tau)
        fd_lt = (
            loss_of(batch.hp, batch.ht, batch.hi, math.exp(lt + eps))
            - loss_of(batch.hp, batch.ht, batch.hi, math.exp(lt - eps))
        ) / (2 * eps)
        worst_lt = abs(fd_lt - d_lt) / max(abs(fd_lt), abs(d_lt), 1e-7)
        return worst, worst_lt

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        batch = random_batch(rng, 4, 8)
        mask = random_mask(rng, 4)
        worst, worst_lt = self._finite_difference_check(batch, 0.4, mask)
        assert worst <= 1e-6
        assert worst_lt <= 1e-6

    def test_gradients_with_textless_rows(self):
        rng = np.random.default_rng(8)
        present = np.array([True, False, True, True])
        batch = random_batch(rng, 4, 6, text_present=present)
        mask = random_mask(rng, 4)
        d_hp, d_ht, d_hi, _ = contrastive_loss_grad(batch, 0.6, mask)
        assert not d_ht[1].any()  # absent text row gets zero gradient
        worst, worst_lt = self._finite_difference_check(
            batch, 0.6, mask, text_present=present
        )
        assert worst <= 1e-6
        assert worst_lt <= 1e-6

    def test_masked_entries_receive_no_contribution(self):
        # gradients w.r.t. a masked-out candidate row must not include the
        # masked term: compare against the empty-mask gradient difference
        rng = np.random.default_rng(9)
        n, d = 3, 5
        batch = random_batch(rng, n, d)
        mask = NegativeMask(
            np.array([[False, True, False], [False, False, False], [False, False, False]])
        )
        eps = 1e-6
        # finite differences on ht[1] under the mask: d loss / d ht[1] must be
        # independent of the (0, 1) pairing in the shape-anchored text term
        _, d_ht, _, _ = contrastive_loss_grad(batch, 0.5, mask)
        for j in range(d):
            ht_plus, ht_minus = batch.ht.copy(), batch.ht.copy()
            ht_plus[1, j] += eps
            ht_minus[1, j] -= eps
            bp = AlignedBatch.__new__(AlignedBatch)
            bp.hp, bp.ht, bp.hi = batch.hp, ht_plus, batch.hi
            bp.text_present = np.ones(n, dtype=bool)
            bm = AlignedBatch.__new__(AlignedBatch)
            bm.hp, bm.ht, bm.hi = batch.hp, ht_minus, batch.hi
            bm.text_present = np.ones(n, dtype=bool)
            fd = (contrastive_loss(bp, 0.5, mask) - contrastive_loss(bm, 0.5, mask)) / (2 * eps)
            assert abs(fd - d_ht[1, j]) <= 1e-6


class TestBatchSimilarity:
    def test_identity_pattern(self):
        logits = batch_similarity(np.eye(3), np.eye(3), 1.0)
        np.testing.assert_allclose(logits, np.eye(3), atol=1e-15)

    def test_halving_tau_doubles_logits(self):
        rng = np.random.default_rng(10)
        a = unit_rows(rng.normal(size=(4, 6)))
        b = unit_rows(rng.normal(size=(4, 6)))
        np.testing.assert_allclose(
            batch_similarity(a, b, 0.5), 2.0 * batch_similarity(a, b, 1.0), atol=1e-12
        )

    def test_matches_double_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        tau = 0.7
        logits = batch_similarity(a, b, tau)
        for i in range(3):
            for j in range(3):
                want = sum(a[i, k] * b[j, k] for k in range(4)) / tau
                assert abs(logits[i, j] - want) <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            batch_similarity(np.eye(3), np.ones((3, 4)), 1.0)

    def test_mask_diagonal_rejected(self):
        bad = np.zeros((2, 2), dtype=bool)
        bad[0, 0] = True
        with pytest.raises(ValidationError):
            NegativeMask(bad)
