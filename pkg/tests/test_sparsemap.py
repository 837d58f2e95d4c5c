import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crest.sparsemap import (BudgetFactor, binarize, budget_tokens, enumerate_vertices,
                             frank_wolfe_reference, map_oracle, project_budget, sparsemap,
                             sparsemap_backward, transitions, vertex_score)


def brute_force_map(scores, factor):
    """Exhaustive argmax; ties go to fewer ones, then the lexicographically larger mask."""
    best, best_key = None, None
    for bits in itertools.product((1, 0), repeat=factor.n):
        z = np.array(bits)
        if z.sum() > factor.k:
            continue
        key = (round(vertex_score(scores, z, factor.transition_penalty), 9), -int(z.sum()))
        if best_key is None or key > best_key:
            best, best_key = z, key
    return best


def check_solution(sol, k):
    coef = sol.coefficients
    assert np.all(coef >= 0)
    np.testing.assert_allclose(coef.sum(), 1.0, atol=1e-6)
    recon = np.stack(sol.active_vertices, axis=1) @ coef
    np.testing.assert_allclose(sol.marginals, recon, atol=1e-6)
    assert sol.marginals.sum() <= k + 1e-6
    assert all(v.sum() <= k for v in sol.active_vertices)


class TestBudget:
    @pytest.mark.parametrize("B,n,k", [(0.3, 10, 3), (0.1, 10, 1), (1.0, 7, 7), (0.5, 4, 2),
                                       (0.01, 5, 1), (0.25, 9, 3)])
    def test_budget_tokens(self, B, n, k):
        assert budget_tokens(B, n) == k

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            budget_tokens(0.0, 5)
        with pytest.raises(ValueError):
            BudgetFactor(3, 4)
        with pytest.raises(ValueError):
            BudgetFactor(3, 1, transition_penalty=-1)


class TestMapOracle:
    def test_top_k_positive(self):
        z = map_oracle([0.3, -0.2, 0.5], BudgetFactor(3, 2))
        np.testing.assert_array_equal(z, [1, 0, 1])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_all_negative(self, k):
        z = map_oracle([-0.1, -2.0, -0.3], BudgetFactor(3, k))
        np.testing.assert_array_equal(z, [0, 0, 0])

    def test_contiguity_bridges_small_gap(self):
        z = map_oracle([1.0, -0.05, 1.0], BudgetFactor(3, 3, 0.2))
        np.testing.assert_array_equal(z, [1, 1, 1])
        np.testing.assert_array_equal(z, brute_force_map(np.array([1.0, -0.05, 1.0]), BudgetFactor(3, 3, 0.2)))

    def test_agrees_with_enumeration_no_penalty(self):
        rng = np.random.default_rng(0)
        for n in range(1, 13):
            for _ in range(5):
                k = int(rng.integers(1, n + 1))
                s = rng.normal(size=n)
                f = BudgetFactor(n, k)
                np.testing.assert_array_equal(map_oracle(s, f), brute_force_map(s, f))

    def test_agrees_with_enumeration_with_penalty(self):
        rng = np.random.default_rng(1)
        for n in range(1, 10):
            for _ in range(5):
                k = int(rng.integers(1, n + 1))
                s = rng.normal(size=n)
                f = BudgetFactor(n, k, float(rng.uniform(0.05, 0.8)))
                z = map_oracle(s, f)
                ref = brute_force_map(s, f)
                assert vertex_score(s, z, f.transition_penalty) == pytest.approx(
                    vertex_score(s, ref, f.transition_penalty), abs=1e-9)
                assert z.sum() <= k

    def test_rejects_bad_scores(self):
        with pytest.raises(ValueError):
            map_oracle([1.0, 2.0], BudgetFactor(3, 1))
        with pytest.raises(ValueError):
            map_oracle([1.0, np.nan], BudgetFactor(2, 1))

    def test_transitions(self):
        assert transitions(np.array([0, 1, 1, 0, 1])) == 3
        assert transitions(np.array([1, 1])) == 0


class TestSparsemapForward:
    def test_uniform_scores_split_evenly(self):
        sol = sparsemap(np.ones(4), BudgetFactor(4, 2))
        np.testing.assert_allclose(sol.marginals, [0.5] * 4, atol=1e-6)
        check_solution(sol, 2)

    def test_box_clipped_point(self):
        sol = sparsemap(np.array([5.0, 4.0, -1.0, -2.0]), BudgetFactor(4, 2))
        np.testing.assert_allclose(sol.marginals, [1, 1, 0, 0], atol=1e-6)

    def test_zero_scores(self):
        sol = sparsemap(np.zeros(5), BudgetFactor(5, 2))
        np.testing.assert_array_equal(sol.marginals, np.zeros(5))
        assert len(sol.active_vertices) == 1
        np.testing.assert_array_equal(sol.active_vertices[0], np.zeros(5))

    def test_matches_projection_no_penalty(self):
        rng = np.random.default_rng(3)
        for n in range(2, 13):
            for _ in range(10):
                k = int(rng.integers(1, n))
                theta = rng.normal(size=n) * 1.5
                sol = sparsemap(theta, BudgetFactor(n, k))
                assert sol.converged
                np.testing.assert_allclose(sol.marginals, project_budget(theta, k), atol=1e-4)
                check_solution(sol, k)

    def test_matches_frank_wolfe_with_penalty(self):
        rng = np.random.default_rng(4)
        for n in range(2, 9):
            k = int(rng.integers(1, n))
            theta = rng.normal(size=n)
            f = BudgetFactor(n, k, 0.3)
            sol = sparsemap(theta, f)
            np.testing.assert_allclose(sol.marginals, frank_wolfe_reference(theta, f), atol=1e-3)
            check_solution(sol, k)

    def test_non_converged_flag(self):
        theta = np.random.default_rng(5).normal(size=10)
        sol = sparsemap(theta, BudgetFactor(10, 5), max_iter=1)
        assert not sol.converged
        check_solution(sol, 5)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            sparsemap(np.ones(3), BudgetFactor(3, 1), max_iter=0)


class TestProjectionOracle:
    def test_projection_values(self):
        np.testing.assert_allclose(project_budget([1, 1, 1, 1], 2), [0.5] * 4, atol=1e-9)
        np.testing.assert_allclose(project_budget([0.2, -1, 0.4], 2), [0.2, 0, 0.4])

    def test_enumerate_vertices(self):
        V = enumerate_vertices(4, 2)
        assert len(V) == 1 + 4 + 6
        assert V.sum(axis=1).max() == 2


class TestBackward:
    def test_zero_upstream(self):
        sol = sparsemap(np.ones(4), BudgetFactor(4, 2))
        np.testing.assert_array_equal(sparsemap_backward(sol, np.zeros(4)), np.zeros(4))

    def test_single_vertex_is_locally_constant(self):
        sol = sparsemap(np.array([5.0, 4.0, -1.0, -2.0]), BudgetFactor(4, 2))
        assert len(sol.active_vertices) == 1
        g = sparsemap_backward(sol, np.array([0.3, -1.0, 2.0, 0.7]))
        np.testing.assert_allclose(g, np.zeros(4), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences_uniform(self, seed):
        rng = np.random.default_rng(seed)
        theta = np.ones(4)
        f = BudgetFactor(4, 2)
        up = rng.normal(size=4)
        g = sparsemap_backward(sparsemap(theta, f), up)
        h = 1e-4
        num = np.empty(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            num[i] = (up @ sparsemap(theta + e, f).marginals - up @ sparsemap(theta - e, f).marginals) / (2 * h)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        assert rel.max() < 1e-2

    def test_finite_differences_with_penalty(self):
        theta = np.array([0.9, 0.4, 0.6, -0.2, 0.8])
        f = BudgetFactor(5, 2, 0.1)
        up = np.array([1.0, -0.5, 0.25, 2.0, -1.5])
        g = sparsemap_backward(sparsemap(theta, f), up)
        h = 1e-5
        num = np.array([(up @ sparsemap(theta + h * e, f).marginals
                         - up @ sparsemap(theta - h * e, f).marginals) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(g, num, atol=1e-5)


class TestBinarize:
    def test_ties_to_lower_index(self):
        np.testing.assert_array_equal(binarize([0.5, 0.5, 0.5, 0.5], 2), [1, 1, 0, 0])

    def test_zero_entries_excluded(self):
        np.testing.assert_array_equal(binarize([0.0, 0.7, 0.0], 2), [0, 1, 0])


scores_strategy = st.integers(2, 10).flatmap(
    lambda n: st.tuples(st.lists(st.floats(-3, 3, allow_nan=False), min_size=n, max_size=n),
                        st.integers(1, n), st.sampled_from([0.0, 1e-4, 0.2])))


class TestInvariants:
    @settings(max_examples=150, deadline=None)
    @given(scores_strategy)
    def test_solution_invariants(self, case):
        s, k, c = case
        theta = np.array(s)
        sol = sparsemap(theta, BudgetFactor(len(s), k, c))
        check_solution(sol, k)
        assert np.all(sol.marginals >= -1e-9) and np.all(sol.marginals <= 1 + 1e-9)
        assert binarize(sol.marginals, k).sum() <= k

    @settings(max_examples=100, deadline=None)
    @given(scores_strategy)
    def test_projection_equivalence(self, case):
        s, k, _ = case
        theta = np.array(s)
        sol = sparsemap(theta, BudgetFactor(len(s), k))
        np.testing.assert_allclose(sol.marginals, project_budget(theta, k), atol=1e-4)
