import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from connectome_id.connectome import (
    Connectome, GroupMatrix, bandpass_filter, build_group_matrix, collapse_to_regions,
    correlation_matrix, feature_pairs, global_signal_regression, group_from_time_series,
    load_group_matrix, n_features_for, region_time_series, save_group_matrix, unvectorize,
    vectorize_upper, zscore_rows,
)
from connectome_id.errors import AtlasError, DegenerateRowError, DomainError, FormatError, ShapeError
from connectome_id.ingest import AtlasLabeling, TimeSeriesMatrix


def _ts(x, tr=0.72, kind="region"):
    return TimeSeriesMatrix(np.asarray(x, dtype=float), tr, kind)


def _sinusoid(freq_bin, T=1000, tr=0.72):
    # frequency exactly on a DFT bin: k / (T * tr)
    t = np.arange(T)
    return np.sin(2 * np.pi * freq_bin * t / T), freq_bin / (T * tr)


class TestConnectomeType:
    def test_valid(self):
        c = Connectome(np.array([[1.0, 0.3], [0.3, 1.0]]))
        assert c.region_count == 2

    @pytest.mark.parametrize("m", [
        [[1.0, 0.3], [0.2, 1.0]],
        [[0.9, 0.3], [0.3, 1.0]],
        [[1.0, 1.3], [1.3, 1.0]],
    ])
    def test_invalid(self, m):
        with pytest.raises(FormatError):
            Connectome(np.array(m))


class TestBandpass:
    def test_in_band_sinusoid_passes(self):
        x, f = _sinusoid(36)  # 36 / 720 s = 0.05 Hz
        assert f == pytest.approx(0.05)
        out = bandpass_filter(_ts([x, 2 * x]), 0.008, 0.1).values
        assert np.linalg.norm(out[0] - x) / np.linalg.norm(x) < 1e-8

    def test_out_of_band_sinusoid_rejected(self):
        x, f = _sinusoid(288)  # 0.4 Hz
        assert f == pytest.approx(0.4)
        out = bandpass_filter(_ts([x, x]), 0.008, 0.1).values
        assert np.linalg.norm(out[0]) < 1e-8

    def test_white_noise_power_fraction(self):
        T, tr = 16384, 0.72
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, T))
        out = bandpass_filter(_ts(x, tr), 0.008, 0.1).values
        nyquist = 1 / (2 * tr)
        expected = (0.1 - 0.008) / nyquist
        ratio = np.sum(out**2, axis=1) / np.sum(x**2, axis=1)
        assert np.all(np.abs(ratio - expected) < 0.1 * expected)

    def test_full_band_identity(self, rng):
        x = rng.standard_normal((3, 101))
        out = bandpass_filter(_ts(x), 0.0, 1 / (2 * 0.72)).values
        np.testing.assert_allclose(out, x, atol=1e-10)

    def test_dc_removed_when_low_positive(self, rng):
        x = rng.standard_normal((2, 200)) + 5.0
        out = bandpass_filter(_ts(x), 0.01, 0.2).values
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)

    @pytest.mark.parametrize("band", [(0.1, 0.1), (0.2, 0.1), (0.0, 0.8), (-0.1, 0.1)])
    def test_domain(self, band):
        with pytest.raises(DomainError):
            bandpass_filter(_ts(np.ones((2, 10))), *band)


class TestGlobalSignalRegression:
    def test_identical_rows_vanish(self, rng):
        row = rng.standard_normal(50)
        out = global_signal_regression(_ts([row, row, row])).values
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_rows_orthogonal_to_global_signal_unchanged(self):
        # Zero-mean rows orthogonal to the supplied global signal are already residuals.
        T = 64
        t = np.arange(T)
        g = np.cos(2 * np.pi * 3 * t / T) + 2.0
        rows = np.array([np.sin(2 * np.pi * 5 * t / T), np.cos(2 * np.pi * 7 * t / T)])
        out = global_signal_regression(_ts(rows), global_signal=g).values
        np.testing.assert_allclose(out, rows, atol=1e-12)

    def test_residual_uncorrelated_with_mean(self, rng):
        x = rng.standard_normal((10, 500))
        out = global_signal_regression(_ts(x)).values
        g = x.mean(axis=0)
        for row in out:
            assert abs(np.corrcoef(row, g)[0, 1]) < 1e-10

    def test_flat_global_signal(self):
        x = np.array([[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]])
        with pytest.raises(DomainError):
            global_signal_regression(_ts(x))


class TestCollapse:
    def test_two_voxels_one_region(self):
        # a lone region would break the two-row minimum, so a second region rides along
        v, w, u = np.array([1.0, 2.0, 5.0]), np.array([3.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
        out = collapse_to_regions(_ts([v, w, u], kind="voxel"), AtlasLabeling(np.array([1, 1, 2]), 2))
        np.testing.assert_array_equal(out.values[0], (v + w) / 2)
        np.testing.assert_array_equal(out.values[1], u)

    def test_identity_labeling(self, rng):
        x = rng.standard_normal((5, 9))
        out = collapse_to_regions(_ts(x, kind="voxel"), AtlasLabeling(np.arange(1, 6), 5))
        np.testing.assert_array_equal(out.values, x)
        assert out.row_kind == "region"

    def test_brute_force_100_voxels(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((100, 30))
        labels = np.concatenate([np.arange(1, 8), rng.integers(1, 8, 93)])
        out = collapse_to_regions(_ts(x, kind="voxel"), AtlasLabeling(labels, 7)).values
        for r in range(7):
            rows = [x[k] for k in range(100) if labels[k] == r + 1]
            expected = sum(rows) / len(rows)
            assert np.max(np.abs(out[r] - expected)) < 1e-14

    def test_empty_region(self):
        with pytest.raises(AtlasError):
            collapse_to_regions(_ts(np.ones((3, 4)), kind="voxel"), AtlasLabeling(np.array([1, 1, 3]), 3))

    def test_label_count_mismatch(self):
        with pytest.raises(AtlasError):
            collapse_to_regions(_ts(np.ones((3, 4)), kind="voxel"), AtlasLabeling(np.array([1, 2]), 2))

    @given(st.permutations(list(range(6))))
    def test_voxel_permutation_within_regions(self, perm):
        x = np.random.default_rng(2).standard_normal((6, 8))
        labels = np.array([1, 1, 1, 2, 2, 2])
        # only permutations that keep every voxel inside its region are relevant
        perm = np.array(perm)
        within = np.concatenate([np.sort(perm[perm < 3]), 3 + np.sort(perm[perm >= 3] - 3)])
        shuffled = np.concatenate([perm[perm < 3], perm[perm >= 3]])
        a = collapse_to_regions(_ts(x[within], kind="voxel"), AtlasLabeling(labels, 2)).values
        b = collapse_to_regions(_ts(x[shuffled], kind="voxel"), AtlasLabeling(labels, 2)).values
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_region_time_series_zscores_voxels(self, rng):
        x = rng.standard_normal((4, 20)) * np.array([[1.0], [100.0], [1.0], [1.0]])
        atlas = AtlasLabeling(np.array([1, 1, 2, 2]), 2)
        out = region_time_series(_ts(x, kind="voxel"), atlas).values
        z = zscore_rows(_ts(x)).values
        np.testing.assert_allclose(out[0], (z[0] + z[1]) / 2)


class TestCorrelation:
    def test_self_and_negation(self, rng):
        x = rng.standard_normal(30)
        c = correlation_matrix(_ts([x, -x, 2 * x + 1])).corr
        assert c[0, 0] == 1.0
        assert c[0, 1] == pytest.approx(-1.0, abs=1e-15)
        assert c[0, 2] == pytest.approx(1.0, abs=1e-15)

    def test_three_point_rows(self):
        c = correlation_matrix(_ts([[1, 2, 3], [1, 2, 4]])).corr
        # hand evaluation: deviations (-1,0,1) and (-4,-1,5)/3, r = 3 / (sqrt(2) * sqrt(42) / 3)
        assert c[0, 1] == pytest.approx(9 / np.sqrt(84), abs=1e-14)
        assert c[0, 1] == pytest.approx(0.98198050606, abs=1e-10)

    def test_symmetric_unit_diagonal(self, rng):
        c = correlation_matrix(_ts(rng.standard_normal((12, 40)))).corr
        assert np.array_equal(c, c.T)
        assert np.all(np.diag(c) == 1.0)
        assert np.all(np.abs(c) <= 1.0)

    def test_matches_numpy(self, rng):
        x = rng.standard_normal((8, 50))
        np.testing.assert_allclose(correlation_matrix(_ts(x)).corr, np.corrcoef(x), atol=1e-14)

    def test_degenerate_abort(self):
        x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [0.0, 1.0, 0.0]])
        with pytest.raises(DegenerateRowError) as info:
            correlation_matrix(_ts(x))
        assert info.value.rows == [1]

    def test_degenerate_zero(self):
        x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [0.0, 1.0, 0.0]])
        c = correlation_matrix(_ts(x), degenerate="zero").corr
        assert c[1, 0] == c[1, 2] == 0.0
        assert c[1, 1] == 1.0

    @given(
        st.floats(0.01, 100), st.floats(-50, 50),
        st.integers(0, 3), st.integers(0, 2**32 - 1),
    )
    def test_affine_invariance(self, scale, shift, row, seed):
        x = np.random.default_rng(seed).standard_normal((4, 25))
        y = x.copy()
        y[row] = scale * y[row] + shift
        a = correlation_matrix(_ts(x)).corr
        b = correlation_matrix(_ts(y)).corr
        assert np.max(np.abs(a - b)) < 1e-12


class TestVectorize:
    def test_order_3x3(self):
        a, b, c = 0.1, 0.2, 0.3
        m = Connectome(np.array([[1, a, b], [a, 1, c], [b, c, 1]]))
        np.testing.assert_array_equal(vectorize_upper(m), [a, b, c])

    @pytest.mark.parametrize("regions,length", [(360, 64620), (116, 6670)])
    def test_lengths(self, regions, length):
        assert n_features_for(regions) == length
        assert vectorize_upper(Connectome(np.eye(regions))).shape == (length,)

    def test_pairs_column_major(self):
        np.testing.assert_array_equal(feature_pairs(4), [[0, 1], [0, 2], [1, 2], [0, 3], [1, 3], [2, 3]])

    @given(hnp.arrays(np.float64, 10, elements=st.floats(-1, 1)))
    def test_unvectorize_round_trip(self, v):
        m = unvectorize(v, 5)
        np.testing.assert_array_equal(vectorize_upper(Connectome(m)), v)

    def test_unvectorize_length(self):
        with pytest.raises(ShapeError):
            unvectorize(np.zeros(4), 4)


class TestGroupMatrix:
    def test_single_scan(self, rng):
        c = correlation_matrix(_ts(rng.standard_normal((6, 20))))
        gm = build_group_matrix([c])
        assert gm.shape == (15, 1)
        np.testing.assert_array_equal(gm.a[:, 0], vectorize_upper(c))

    def test_identical_scans(self, rng):
        c = correlation_matrix(_ts(rng.standard_normal((6, 20))))
        gm = build_group_matrix([c, c])
        np.testing.assert_array_equal(gm.a[:, 0], gm.a[:, 1])

    def test_mixed_region_counts(self):
        with pytest.raises(ShapeError):
            build_group_matrix([Connectome(np.eye(3)), Connectome(np.eye(4))])

    def test_empty(self):
        with pytest.raises(ShapeError):
            build_group_matrix([])

    def test_100_scans_of_360_regions(self):
        rng = np.random.default_rng(0)
        scans = [correlation_matrix(_ts(rng.standard_normal((360, 40)))) for _ in range(100)]
        gm = build_group_matrix(scans)
        assert gm.shape == (64620, 100)
        assert gm.feature_ids.shape == (64620, 2)

    def test_column_ids_and_take(self, rng):
        series = [_ts(rng.standard_normal((5, 12))) for _ in range(3)]
        gm = group_from_time_series(series, ["a", "b", "c"])
        sub = gm.take_columns([2, 0])
        assert sub.column_ids == ("c", "a")
        np.testing.assert_array_equal(sub.a, gm.a[:, [2, 0]])

    def test_feature_id_mismatch(self):
        with pytest.raises(ShapeError):
            GroupMatrix(np.zeros((3, 2)), ["a", "b"], np.zeros((2, 2)), 3)

    @pytest.mark.parametrize("name", ["g.cnid", "g.csv"])
    def test_save_load(self, tmp_path, rng, name):
        series = [_ts(rng.standard_normal((5, 12))) for _ in range(3)]
        gm = group_from_time_series(series, ["a", "b", "c"])
        save_group_matrix(gm, tmp_path / name)
        back = load_group_matrix(tmp_path / name)
        assert back.a.tobytes() == gm.a.tobytes()
        assert back.column_ids == gm.column_ids
        np.testing.assert_array_equal(back.feature_ids, gm.feature_ids)
        assert json.loads((tmp_path / f"{name}.meta.json").read_text())["region_count"] == 5
