import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from connectome_id.connectome import GroupMatrix, feature_pairs, group_from_time_series
from connectome_id.errors import DomainError, RankError, ShapeError
from connectome_id.ingest import SynthConfig, TimeSeriesMatrix, generate_synthetic_cohort
from connectome_id.sketch import (
    FeatureSelection, column_space_basis, l2_row_probabilities, leverage_scores, load_selection,
    principal_features, restrict_features, row_sample, save_selection, top_indices,
)


def projection_diagonal(a):
    """Oracle: diag(A (A^T A)^-1 A^T) via a linear solve, no SVD involved."""
    return np.einsum("ij,ji->i", a, np.linalg.solve(a.T @ a, a.T))


def _gm(a):
    m = a.shape[0]
    return GroupMatrix(a, [str(k) for k in range(a.shape[1])], np.zeros((m, 2), dtype=int), 0)


class TestColumnSpaceBasis:
    def test_already_orthonormal(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        u, sigma = column_space_basis(a)
        assert u.shape == (3, 2)
        np.testing.assert_allclose(np.abs(u), a, atol=1e-15)

    def test_proportional_columns(self, rng):
        c = rng.standard_normal(6)
        u, _ = column_space_basis(np.column_stack([c, -2.5 * c]))
        assert u.shape[1] == 1

    def test_projection_oracle_200x20(self):
        a = np.random.default_rng(200).standard_normal((200, 20))
        u, _ = column_space_basis(a)
        oracle = a @ np.linalg.solve(a.T @ a, a.T)
        assert np.max(np.abs(u @ u.T - oracle)) < 1e-8
        np.testing.assert_allclose(u.T @ u, np.eye(20), atol=1e-8)
        assert np.linalg.norm(a - u @ (u.T @ a)) / np.linalg.norm(a) < 1e-8

    def test_zero_matrix(self):
        with pytest.raises(RankError):
            column_space_basis(np.zeros((5, 2)))

    def test_wide_matrix(self):
        with pytest.raises(ShapeError):
            column_space_basis(np.ones((2, 5)))

    def test_rank_argument(self, rng):
        u, sigma = column_space_basis(rng.standard_normal((30, 6)), rank=2)
        assert u.shape == (30, 2) and sigma.shape == (2,)


class TestLeverage:
    def test_orthonormal_rows(self):
        prof = leverage_scores(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
        np.testing.assert_allclose(prof.scores, [1, 1, 0], atol=1e-15)
        np.testing.assert_allclose(prof.probabilities, [0.5, 0.5, 0], atol=1e-15)
        assert prof.rank == 2

    def test_column_scaling(self):
        prof = leverage_scores(np.array([[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(prof.scores, [1, 1, 0], atol=1e-15)

    def test_oracle_50x10(self):
        a = np.random.default_rng(50).standard_normal((50, 10))
        prof = leverage_scores(a)
        assert np.max(np.abs(prof.scores - projection_diagonal(a))) < 1e-8

    def test_rank_deficient_sum(self, rng):
        a = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 8))
        prof = leverage_scores(a)
        assert prof.rank == 3
        assert abs(prof.scores.sum() - 3) < 1e-8

    @given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(0, 30))
    def test_bounds_and_trace(self, seed, n, extra):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n + extra, n))
        prof = leverage_scores(a)
        assert abs(prof.scores.sum() - prof.rank) < 1e-8
        assert np.all(prof.scores >= 0) and np.all(prof.scores <= 1 + 1e-10)
        assert abs(prof.probabilities.sum() - 1) < 1e-12

    @given(st.integers(0, 2**32 - 1))
    def test_invariant_under_column_mixing(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((30, 5))
        g = rng.standard_normal((5, 5))
        assume(np.linalg.cond(g) < 1e6)
        np.testing.assert_allclose(leverage_scores(a @ g).scores, leverage_scores(a).scores, atol=1e-8)

    def test_group_matrix_input(self, rng):
        a = rng.standard_normal((20, 4))
        np.testing.assert_array_equal(leverage_scores(_gm(a)).scores, leverage_scores(a).scores)


class TestL2Probabilities:
    def test_hand_example(self):
        np.testing.assert_allclose(l2_row_probabilities(np.array([[1.0, 0.0], [0.0, 2.0]])), [0.2, 0.8])

    def test_equal_rows(self):
        np.testing.assert_allclose(l2_row_probabilities(np.ones((4, 3))), 0.25)

    def test_direct_oracle(self):
        a = np.random.default_rng(100).standard_normal((100, 5))
        direct = np.array([sum(v * v for v in row) for row in a.tolist()])
        p = l2_row_probabilities(a)
        assert np.max(np.abs(p - direct / direct.sum())) < 1e-14
        assert abs(p.sum() - 1) < 1e-12

    def test_zero(self):
        with pytest.raises(DomainError):
            l2_row_probabilities(np.zeros((3, 3)))


class TestRowSample:
    def test_forced_draws(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        sk = row_sample(a, 3, np.array([1.0, 0.0, 0.0]), seed=0)
        np.testing.assert_allclose(sk.rows, np.tile(a[0] / np.sqrt(3), (3, 1)))
        np.testing.assert_array_equal(sk.sampled_indices, [0, 0, 0])

    def test_rows_match_rescaled_sources(self, rng):
        a = rng.standard_normal((20, 3))
        p = l2_row_probabilities(a)
        sk = row_sample(a, 15, p, seed=4)
        assert sk.s == 15
        np.testing.assert_array_equal(sk.rows, a[sk.sampled_indices] * sk.rescale_factors[:, None])
        np.testing.assert_allclose(sk.rescale_factors, 1 / np.sqrt(15 * p[sk.sampled_indices]))

    def test_deterministic(self, rng):
        a = rng.standard_normal((20, 3))
        p = leverage_scores(a).probabilities
        x, y = row_sample(a, 7, p, 9), row_sample(a, 7, p, 9)
        assert x.rows.tobytes() == y.rows.tobytes()

    def test_never_draws_zero_mass(self):
        a = np.arange(12.0).reshape(6, 2)
        p = np.array([0.0, 0.5, 0.0, 0.5, 0.0, 0.0])
        for seed in range(50):
            assert set(row_sample(a, 5, p, seed).sampled_indices) <= {1, 3}

    @pytest.mark.parametrize("s,p", [(0, [1.0, 0.0]), (1.5, [1.0, 0.0]), (2, [0.6, 0.6]), (2, [-0.5, 1.5])])
    def test_preconditions(self, s, p):
        with pytest.raises(DomainError):
            row_sample(np.ones((2, 2)), s, np.array(p), 0)

    def test_relative_error_bound(self):
        # Rank-k leverage sampling with s = ceil(k ln k / eps^2) rows should give
        # ||A - A S^+ S||_F <= (1 + eps) ||A - A_k||_F in at least 95% of trials.
        hits, trials = 0, 100
        for k, eps in [(3, 0.5), (4, 0.7)]:
            s = math.ceil(k * math.log(k) / eps**2)
            for seed in range(trials // 2):
                rng = np.random.default_rng(seed)
                a = rng.standard_normal((300, k)) @ rng.standard_normal((k, 40))
                a += 0.1 * rng.standard_normal(a.shape)
                sk = row_sample(a, s, leverage_scores(a, rank=k).probabilities, seed + 1000).rows
                err = np.linalg.norm(a - a @ np.linalg.pinv(sk) @ sk)
                sigma = np.linalg.svd(a, compute_uv=False)
                hits += err <= (1 + eps) * np.sqrt(np.sum(sigma[k:] ** 2))
        assert hits >= 0.95 * trials


class TestPrincipalFeatures:
    def test_tie_break(self):
        np.testing.assert_array_equal(top_indices([0.2, 0.9, 0.9, 0.1], 2), [1, 2])

    def test_all_features(self, rng):
        a = rng.standard_normal((12, 3))
        sel = principal_features(a, 12)
        scores = leverage_scores(a).scores
        assert sorted(sel.indices.tolist()) == list(range(12))
        assert np.all(np.diff(scores[sel.indices]) <= 0)

    @pytest.mark.parametrize("t", [0, 13, 2.5])
    def test_t_range(self, rng, t):
        with pytest.raises(DomainError):
            principal_features(rng.standard_normal((12, 3)), t)

    def test_planted_rows_recovered(self):
        rng = np.random.default_rng(10)
        a = 0.05 * rng.standard_normal((400, 20))
        a[:10] += 3.0 * rng.standard_normal((10, 20))
        sel = principal_features(a, 10)
        assert len(set(sel.indices.tolist()) & set(range(10))) >= 9

    def test_planted_signature_regions_in_synthetic_cohort(self):
        cfg = SynthConfig(n_subjects=40, n_regions=30, n_timepoints=200, signature_regions=8, seed=2)
        cohort = generate_synthetic_cohort(cfg)
        gm = group_from_time_series(cohort.scans(1, "rest"))
        sel = principal_features(gm, 20)
        inside = [(i < 8 and j < 8) for i, j in gm.feature_ids[sel.indices]]
        assert np.mean(inside) >= 0.9

    def test_deterministic(self, rng):
        a = rng.standard_normal((50, 6))
        assert np.array_equal(principal_features(a, 7).indices, principal_features(a, 7).indices)

    def test_rank_error_propagates(self):
        with pytest.raises(RankError):
            principal_features(np.zeros((5, 2)), 2)


class TestFeatureSelection:
    def test_invariants(self):
        with pytest.raises(DomainError):
            FeatureSelection([1, 1], [0.5, 0.4])
        with pytest.raises(DomainError):
            FeatureSelection([1, 2], [0.4, 0.5])
        with pytest.raises(DomainError):
            FeatureSelection([-1], [0.4])
        assert FeatureSelection([3, 1], [0.5, 0.5]).t == 2

    def test_csv_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((10, 3))
        sel = principal_features(a, 4, source_group="g1")
        save_selection(sel, feature_pairs(5), tmp_path / "sel.csv")
        back = load_selection(tmp_path / "sel.csv")
        np.testing.assert_array_equal(back.indices, sel.indices)
        assert back.scores.tobytes() == sel.scores.tobytes()
        header = (tmp_path / "sel.csv").read_text().splitlines()[0]
        assert header == "feature_index,region_i,region_j,leverage_score"


class TestRestrict:
    def _group(self, rng, n=4, regions=6):
        return group_from_time_series([TimeSeriesMatrix(rng.standard_normal((regions, 30))) for _ in range(n)])

    def test_identity(self, rng):
        gm = self._group(rng)
        sel = FeatureSelection(np.arange(gm.n_features), np.zeros(gm.n_features))
        np.testing.assert_array_equal(restrict_features(gm, sel).a, gm.a)

    def test_single_row(self, rng):
        gm = self._group(rng)
        out = restrict_features(gm, FeatureSelection([7], [1.0]))
        np.testing.assert_array_equal(out.a, gm.a[[7]])
        np.testing.assert_array_equal(out.feature_ids, gm.feature_ids[[7]])

    def test_alignment_across_groups(self, rng):
        g1, g2 = self._group(rng), self._group(rng)
        sel = principal_features(g1, 5)
        r1, r2 = restrict_features(g1, sel), restrict_features(g2, sel)
        np.testing.assert_array_equal(r1.feature_ids, r2.feature_ids)
        np.testing.assert_array_equal(r2.a, g2.a[sel.indices])

    def test_out_of_range(self, rng):
        gm = self._group(rng)
        with pytest.raises(IndexError):
            restrict_features(gm, FeatureSelection([gm.n_features], [1.0]))
