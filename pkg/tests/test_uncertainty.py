import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesfed.errors import InvalidArgumentError
from bayesfed.uncertainty import (DEFAULT_FRACTIONS, dataset_nll, decompose_variance,
                                  mean_probability, nll, normalized_entropy,
                                  normalized_entropy_batch, retention_curve, summarize,
                                  variance_traces_batch)


def random_blocks(rng, n, m, c):
    return rng.dirichlet(np.full(c, 0.5), size=(n, m))


class TestMeanProbability:
    def test_single_row(self):
        assert list(mean_probability([[0.2, 0.8]])) == [0.2, 0.8]

    def test_symmetric_pair(self):
        assert list(mean_probability([[1, 0], [0, 1]])) == [0.5, 0.5]

    def test_rows_must_be_simplex(self):
        with pytest.raises(InvalidArgumentError):
            mean_probability([[0.5, 0.6]])


class TestEntropy:
    def test_uniform(self):
        assert normalized_entropy(np.full(10, 0.1)) == pytest.approx(1.0, abs=1e-15)

    def test_one_hot(self):
        assert normalized_entropy([0.0, 1.0, 0.0]) == 0.0

    def test_binary(self):
        expected = (-0.25 * math.log(0.25) - 0.75 * math.log(0.75)) / math.log(2)
        assert normalized_entropy([0.25, 0.75]) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.8113, abs=1e-4)

    def test_bounds_on_random_simplex(self):
        p = np.random.default_rng(0).dirichlet(np.full(7, 0.3), size=10_000)
        h = normalized_entropy_batch(p)
        assert np.all((h >= 0) & (h <= 1))


class TestDecomposition:
    def test_pure_disagreement(self):
        aleatoric, epistemic = decompose_variance([[1, 0], [0, 1]])
        assert np.array_equal(aleatoric, np.zeros((2, 2)))
        assert np.array_equal(epistemic, [[0.25, -0.25], [-0.25, 0.25]])
        assert np.trace(epistemic) == 0.5

    def test_single_row_has_no_epistemic(self):
        _, epistemic = decompose_variance([[0.3, 0.7]])
        assert np.array_equal(epistemic, np.zeros((2, 2)))

    def test_one_hot_rows_have_no_aleatoric(self):
        aleatoric, _ = decompose_variance([[0, 1, 0], [0, 1, 0]])
        assert np.array_equal(aleatoric, np.zeros((3, 3)))

    def test_matches_per_sample_definition(self):
        rng = np.random.default_rng(1)
        block = random_blocks(rng, 1, 6, 4)[0]
        p_bar = block.mean(axis=0)
        # definition: mean of diag(p) - p p^T, and mean of (p - p_bar)(p - p_bar)^T
        al = sum(np.diag(p) - np.outer(p, p) for p in block) / 6
        ep = sum(np.outer(p - p_bar, p - p_bar) for p in block) / 6
        a, e = decompose_variance(block)
        np.testing.assert_allclose(a, al, atol=1e-15)
        np.testing.assert_allclose(e, ep, atol=1e-15)

    def test_total_variance_identity(self):
        rng = np.random.default_rng(2)
        block = random_blocks(rng, 1, 9, 5)[0]
        a, e = decompose_variance(block)
        p_bar = block.mean(axis=0)
        np.testing.assert_allclose(a + e, np.diag(p_bar) - np.outer(p_bar, p_bar), atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_symmetric_psd(self, m, c, seed):
        block = random_blocks(np.random.default_rng(seed), 1, m, c)[0]
        for mat in decompose_variance(block):
            assert np.allclose(mat, mat.T, atol=1e-15)
            assert np.linalg.eigvalsh(mat).min() >= -1e-9

    def test_batch_traces_agree(self):
        rng = np.random.default_rng(3)
        blocks = random_blocks(rng, 8, 5, 3)
        al, ep = variance_traces_batch(blocks)
        for i in range(8):
            a, e = decompose_variance(blocks[i])
            assert al[i] == pytest.approx(np.trace(a), abs=1e-14)
            assert ep[i] == pytest.approx(np.trace(e), abs=1e-14)

    def test_summarize(self):
        rec = summarize([[0.2, 0.8], [0.8, 0.2]])
        assert rec.predicted_class == 0  # tie at 0.5 goes to the lower index
        assert rec.entropy_norm == pytest.approx(1.0, abs=1e-15)
        assert rec.epistemic_trace == pytest.approx(0.18, abs=1e-15)


class TestNLL:
    def test_one_hot(self):
        assert nll([0.0, 1.0], 1) == 0.0

    def test_half(self):
        assert nll([0.5, 0.5], 0) == pytest.approx(math.log(2), abs=1e-15)

    def test_uniform_ten(self):
        assert nll(np.full(10, 0.1), 3) == pytest.approx(math.log(10), abs=1e-14)

    def test_zero_probability_is_finite(self):
        assert nll([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))

    def test_dataset_mean(self):
        p = np.array([[0.5, 0.5], [0.25, 0.75]])
        assert dataset_nll(p, np.array([0, 1])) == pytest.approx(
            (math.log(2) - math.log(0.75)) / 2, abs=1e-15)


class TestRetention:
    def test_default_fractions(self):
        assert DEFAULT_FRACTIONS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0)

    def test_full_retention_is_accuracy(self):
        correct = [True, False, True, True]
        assert retention_curve([0.1, 0.5, 0.2, 0.9], correct, [1.0]) == [(1.0, 0.75)]

    def test_errors_ranked_last(self):
        correct = np.array([True] * 8 + [False] * 2)
        scores = np.where(correct, 0.1, 0.9)
        curve = dict(retention_curve(scores, correct))
        assert curve[0.8] == 1.0 and curve[0.5] == 1.0 and curve[1.0] == 0.8

    def test_constant_scores_flat(self):
        correct = [True, False] * 20
        for _, acc in retention_curve(np.zeros(40), correct):
            assert acc == pytest.approx(0.5, abs=0.03)

    def test_tie_break_by_index(self):
        curve = retention_curve([0.0, 0.0, 0.0, 0.0], [True, True, False, False], [0.5])
        assert curve == [(0.5, 1.0)]

    def test_keep_count_rounding(self):
        # (1 - 0.95) * 40 is 2.0000000000000018 in binary; exactly 2 are discarded
        correct = np.array([True] * 38 + [False] * 2)
        assert retention_curve(np.arange(40.0), correct, [0.95]) == [(0.95, 1.0)]

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            retention_curve([], [])
        with pytest.raises(InvalidArgumentError):
            retention_curve([0.1], [True], [0.0])

    def test_non_increasing_for_calibrated_scores(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(size=500)
        correct = rng.uniform(size=500) > scores  # higher score, more likely wrong
        accs = [a for _, a in retention_curve(scores, correct)]
        assert all(x >= y - 0.02 for x, y in zip(accs, accs[1:]))
