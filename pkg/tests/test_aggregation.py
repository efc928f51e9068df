import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgt.aggregation import (ZeroNormWarning, aggregate_global_nodes, aggregate_params,
                               align_and_score, cosine_matrix, personalized_weights,
                               similarity_matrix)


def brute_force_score(mu_i, mu_j):
    a = mu_i / np.linalg.norm(mu_i, axis=1, keepdims=True)
    b = mu_j / np.linalg.norm(mu_j, axis=1, keepdims=True)
    cos = a @ b.T
    n = len(a)
    return max(np.mean([cos[r, p[r]] for r in range(n)]) for p in itertools.permutations(range(n)))


class TestAlign:
    def test_permutation_recovered(self):
        rng = np.random.default_rng(0)
        mu = rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        found, score = align_and_score(mu, mu[perm])
        assert score == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(mu[perm][found], mu)

    def test_antipodal(self):
        mu = np.random.default_rng(1).standard_normal((1, 3))
        assert align_and_score(mu, -mu)[1] == pytest.approx(-1.0, abs=1e-12)
        collinear = np.array([[1.0], [2.0], [0.5]]) * mu
        assert align_and_score(collinear, -collinear)[1] == pytest.approx(-1.0, abs=1e-12)

    def test_negated_spread_rows_above_minus_one(self):
        # with several directions the matching can pair a row with another row's negation
        mu = np.eye(3)
        assert align_and_score(mu, -mu)[1] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("n_g", range(1, 8))
    def test_matches_brute_force(self, n_g):
        rng = np.random.default_rng(n_g)
        for _ in range(10):
            a, b = rng.standard_normal((n_g, 3)), rng.standard_normal((n_g, 3))
            assert align_and_score(a, b)[1] == pytest.approx(brute_force_score(a, b), abs=1e-12)

    def test_zero_row(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.warns(ZeroNormWarning):
            _, score = align_and_score(a, a)
        assert score == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            align_and_score(np.ones((2, 3)), np.ones((3, 3)))

    def test_cosine_bounds(self):
        c = cosine_matrix(np.random.default_rng(0).standard_normal((5, 2)), np.ones((3, 2)))
        assert c.shape == (5, 3) and np.all(np.abs(c) <= 1)


class TestSimilarity:
    def test_single_client(self):
        np.testing.assert_array_equal(similarity_matrix([np.ones((3, 2))]).values, [[1.0]])

    def test_identical(self):
        mu = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(similarity_matrix([mu] * 3).values, np.ones((3, 3)), atol=1e-12)

    def test_invariants(self):
        rng = np.random.default_rng(2)
        sim = similarity_matrix([rng.standard_normal((4, 5)) for _ in range(5)])
        s = sim.values
        np.testing.assert_array_equal(s, s.T)
        np.testing.assert_array_equal(np.diag(s), 1.0)
        assert np.all(np.abs(s) <= 1)
        # alignments in both directions are inverse permutations
        for i, j in itertools.permutations(range(5), 2):
            np.testing.assert_array_equal(sim.alignments[i][j][sim.alignments[j][i]], np.arange(4))

    def test_two_block_structure(self):
        rng = np.random.default_rng(5)
        base = [rng.standard_normal((4, 8)) for _ in range(2)]
        mus = [base[c // 2][rng.permutation(4)] + 0.3 * rng.standard_normal((4, 8)) for c in range(4)]
        s = similarity_matrix(mus).values
        within = np.mean([s[0, 1], s[2, 3]])
        cross = np.mean([s[0, 2], s[0, 3], s[1, 2], s[1, 3]])
        assert within > cross + 0.2


class TestWeights:
    def test_uniform(self):
        np.testing.assert_allclose(personalized_weights(np.full(4, 0.3)), 0.25)

    def test_scalar_example(self):
        alpha = personalized_weights(np.array([1.0, 0.0]), 5.0)
        e5 = math.exp(5)
        np.testing.assert_allclose(alpha, [e5 / (e5 + 1), 1 / (e5 + 1)], atol=1e-15)
        np.testing.assert_allclose(alpha, [0.99331, 0.00669], atol=1e-5)

    def test_tiny_tau_uniform(self):
        s = np.random.default_rng(0).uniform(-1, 1, 6)
        np.testing.assert_allclose(personalized_weights(s, 1e-8), 1 / 6, atol=1e-6)

    def test_stable(self):
        alpha = personalized_weights(np.array([1000.0, 999.0]), 5.0)
        assert np.all(np.isfinite(alpha))

    @settings(max_examples=50, deadline=None)
    @given(s=st.lists(st.floats(-1, 1), min_size=2, max_size=8), bump=st.floats(0.01, 1.0),
           j=st.integers(0, 7), tau=st.floats(0.1, 20))
    def test_row_stochastic_and_monotone(self, s, bump, j, tau):
        s = np.array(s)
        j %= s.size
        alpha = personalized_weights(s, tau)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(alpha > 0)
        raised = s.copy()
        raised[j] += bump
        assert personalized_weights(raised, tau)[j] > alpha[j]


class TestAggregate:
    def test_hand_arithmetic(self):
        assert aggregate_params([np.array([4.0]), np.array([8.0])], [0.25, 0.75])[0] == 7.0

    def test_one_hot_and_identical(self):
        thetas = [np.arange(3.0) * k for k in range(3)]
        np.testing.assert_array_equal(aggregate_params(thetas, [0, 1, 0]), thetas[1])
        same = [np.array([0.1, 0.7, -3.3])] * 3
        np.testing.assert_allclose(aggregate_params(same, [0.2, 0.3, 0.5]), same[0], rtol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_params([np.ones(2), np.ones(3)], [0.5, 0.5])
        with pytest.raises(ValueError):
            aggregate_params([np.ones(2)], [0.5, 0.5])

    def test_permuted_nodes_restored(self):
        rng = np.random.default_rng(0)
        mu = rng.standard_normal((5, 3))
        perm = rng.permutation(5)
        sim = similarity_matrix([mu, mu[perm]])
        out = aggregate_global_nodes([mu, mu[perm]], [sim.alignments[0][0], sim.alignments[0][1]], [0.5, 0.5])
        np.testing.assert_allclose(out, mu, atol=1e-15)

    def test_one_dimensional_hand_alignment(self):
        # in one dimension every nonzero row has cosine +-1, so the matching is given by hand
        mu_i, mu_j = np.array([[0.0], [10.0]]), np.array([[9.0], [1.0]])
        out = aggregate_global_nodes([mu_i, mu_j], [np.arange(2), np.array([1, 0])], [0.5, 0.5])
        np.testing.assert_allclose(out, [[0.5], [9.5]])

    def test_two_dimensional_alignment(self):
        mu_i = np.array([[1.0, 0.1], [0.1, 10.0]])
        mu_j = np.array([[0.5, 9.0], [1.2, 0.0]])
        perm, _ = align_and_score(mu_i, mu_j)
        np.testing.assert_array_equal(perm, [1, 0])
        out = aggregate_global_nodes([mu_i, mu_j], [np.arange(2), perm], [0.5, 0.5])
        np.testing.assert_allclose(out, [[1.1, 0.05], [0.3, 9.5]])
