"""Functional connectomes from region time series, and group matrices.

A connectome is the region x region Pearson correlation matrix of one scan.
Its strictly-upper triangle, read column by column, is the scan's feature
vector; stacking feature vectors of many scans column-wise gives a group
matrix (features x scans).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AtlasError, DegenerateRowError, DomainError, FormatError, ShapeError
from .ingest import AtlasLabeling, TimeSeriesMatrix, load_matrix, save_matrix


@dataclass(frozen=True)
class Connectome:
    corr: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corr, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeError(f"connectome must be square, got {c.shape}")
        if not np.array_equal(c, c.T):
            raise FormatError("connectome is not symmetric")
        if not np.all(np.diag(c) == 1.0):
            raise FormatError("connectome diagonal must be exactly 1")
        if np.any(np.abs(c) > 1.0):
            raise FormatError("connectome entries must lie in [-1, 1]")
        object.__setattr__(self, "corr", c)

    @property
    def region_count(self) -> int:
        return self.corr.shape[0]


@dataclass(frozen=True)
class GroupMatrix:
    """Vectorized connectomes, one column per scan.

    ``feature_ids`` holds the (i, j) region pair of every row, 0-based.
    """

    a: np.ndarray
    column_ids: tuple
    feature_ids: np.ndarray
    region_count: int

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"group matrix must be 2-D, got {a.shape}")
        fid = np.asarray(self.feature_ids, dtype=np.int64).reshape(-1, 2)
        if fid.shape[0] != a.shape[0]:
            raise ShapeError(f"{fid.shape[0]} feature ids for {a.shape[0]} rows")
        if len(self.column_ids) != a.shape[1]:
            raise ShapeError(f"{len(self.column_ids)} column ids for {a.shape[1]} columns")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "feature_ids", fid)
        object.__setattr__(self, "column_ids", tuple(self.column_ids))

    @property
    def shape(self):
        return self.a.shape

    @property
    def n_features(self) -> int:
        return self.a.shape[0]

    @property
    def n_columns(self) -> int:
        return self.a.shape[1]

    def take_columns(self, idx) -> "GroupMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupMatrix(self.a[:, idx], [self.column_ids[k] for k in idx],
                           self.feature_ids, self.region_count)


def n_features_for(region_count: int) -> int:
    return region_count * (region_count - 1) // 2


def pair_indices(region_count: int):
    """Row and column index arrays of the strictly-upper triangle, ordered by column then row."""
    j, i = np.tril_indices(region_count, -1)
    return i, j


def feature_pairs(region_count: int) -> np.ndarray:
    i, j = pair_indices(region_count)
    return np.column_stack([i, j])


def zscore_rows(ts: TimeSeriesMatrix) -> TimeSeriesMatrix:
    """Standardize every row to zero mean and unit (population) variance.

    Constant rows are centered but left unscaled.
    """
    x = ts.values
    centered = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    sd[sd == 0] = 1.0
    return ts.with_values(centered / sd)


def bandpass_filter(ts: TimeSeriesMatrix, low_hz: float = 0.008, high_hz: float = 0.1) -> TimeSeriesMatrix:
    """Keep only discrete Fourier bins with frequency in ``[low_hz, high_hz]``.

    The filter is an ideal mask applied to the real FFT of each row, so the
    DC bin survives only when ``low_hz == 0``.
    """
    nyquist = 1.0 / (2.0 * ts.tr_seconds)
    if not 0 <= low_hz < high_hz:
        raise DomainError(f"need 0 <= low_hz < high_hz, got [{low_hz}, {high_hz}]")
    if high_hz > nyquist * (1 + 1e-12):
        raise DomainError(f"high_hz {high_hz} exceeds the Nyquist frequency {nyquist}")
    T = ts.n_timepoints
    freqs = np.fft.rfftfreq(T, d=ts.tr_seconds)
    keep = (freqs >= low_hz) & (freqs <= high_hz * (1 + 1e-12))
    spectrum = np.fft.rfft(ts.values, axis=1)
    spectrum[:, ~keep] = 0
    return ts.with_values(np.fft.irfft(spectrum, n=T, axis=1))


def global_signal_regression(ts: TimeSeriesMatrix, global_signal=None) -> TimeSeriesMatrix:
    """Replace each row by its residual after regressing on [1, global signal].

    The global signal defaults to the across-row mean time series; a
    precomputed one may be passed instead.
    """
    x = ts.values
    g = x.mean(axis=0) if global_signal is None else np.asarray(global_signal, dtype=np.float64)
    if g.shape != (ts.n_timepoints,):
        raise ShapeError(f"global signal has shape {g.shape}, expected ({ts.n_timepoints},)")
    gc = g - g.mean()
    ss = gc @ gc
    if ss == 0 or ss <= 1e-24 * (g @ g):
        raise DomainError("global mean signal has zero variance")
    xc = x - x.mean(axis=1, keepdims=True)
    beta = xc @ gc / ss
    return ts.with_values(xc - np.outer(beta, gc))


def collapse_to_regions(ts: TimeSeriesMatrix, atlas: AtlasLabeling) -> TimeSeriesMatrix:
    """Average voxel rows sharing a label into one row per region (label r -> row r-1)."""
    labels = atlas.labels
    if labels.shape[0] != ts.n_rows:
        raise AtlasError(f"{labels.shape[0]} labels for {ts.n_rows} voxel rows")
    if labels.min() < 1 or labels.max() > atlas.region_count:
        raise AtlasError(f"labels must lie in [1, {atlas.region_count}]")
    counts = np.bincount(labels - 1, minlength=atlas.region_count)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise AtlasError(f"regions without voxels: {(empty + 1).tolist()}")
    sums = np.zeros((atlas.region_count, ts.n_timepoints))
    np.add.at(sums, labels - 1, ts.values)
    return ts.with_values(sums / counts[:, None], row_kind="region")


def region_time_series(ts: TimeSeriesMatrix, atlas: AtlasLabeling, zscore_voxels=True) -> TimeSeriesMatrix:
    """Voxel to region series; by default voxels are z-scored before averaging."""
    if zscore_voxels:
        ts = zscore_rows(ts)
    return collapse_to_regions(ts, atlas)


def correlation_matrix(ts: TimeSeriesMatrix, degenerate="abort") -> Connectome:
    """Pearson correlation between all pairs of rows.

    Parameters
    ----------
    ts : TimeSeriesMatrix
        Region x time signal.
    degenerate : {"abort", "zero"}
        What to do with zero-variance rows. ``"abort"`` raises
        :class:`DegenerateRowError`; ``"zero"`` sets their correlations with
        every other row to 0.

    Returns
    -------
    Connectome
        Symmetric matrix with an exact unit diagonal.
    """
    if degenerate not in ("abort", "zero"):
        raise DomainError(f"degenerate must be 'abort' or 'zero', got {degenerate!r}")
    x = ts.values
    xc = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.mean(xc**2, axis=1))
    scale = np.max(np.abs(x), axis=1)
    bad = (sd == 0) | (sd <= 1e-13 * scale)
    if np.any(bad) and degenerate == "abort":
        raise DegenerateRowError(np.flatnonzero(bad))
    z = np.zeros_like(xc)
    z[~bad] = xc[~bad] / sd[~bad, None]
    corr = (z @ z.T) / ts.n_timepoints
    corr = (corr + corr.T) / 2
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return Connectome(corr)


def vectorize_upper(c: Connectome) -> np.ndarray:
    i, j = pair_indices(c.region_count)
    return c.corr[i, j].copy()


def unvectorize(values, region_count: int) -> np.ndarray:
    """Symmetric matrix with unit diagonal from a feature vector."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n_features_for(region_count),):
        raise ShapeError(f"expected {n_features_for(region_count)} features, got {values.shape}")
    out = np.eye(region_count)
    i, j = pair_indices(region_count)
    out[i, j] = values
    out[j, i] = values
    return out


def build_group_matrix(scans, column_ids=None) -> GroupMatrix:
    """Stack the feature vectors of ``scans`` (Connectomes) as columns, in order."""
    scans = list(scans)
    if not scans:
        raise ShapeError("cannot build a group matrix from zero scans")
    sizes = {c.region_count for c in scans}
    if len(sizes) > 1:
        raise ShapeError(f"scans mix region counts {sorted(sizes)}")
    n = sizes.pop()
    if column_ids is None:
        column_ids = [str(k) for k in range(len(scans))]
    a = np.column_stack([vectorize_upper(c) for c in scans])
    return GroupMatrix(a, column_ids, feature_pairs(n), n)


def group_from_time_series(series, column_ids=None, degenerate="abort") -> GroupMatrix:
    return build_group_matrix([correlation_matrix(ts, degenerate) for ts in series], column_ids)


def save_feature_ids(gm: GroupMatrix, path) -> None:
    """Sidecar CSV listing the region pair of every group-matrix row."""
    with open(path, "w") as fh:
        fh.write("feature_index,region_i,region_j\n")
        for k, (i, j) in enumerate(gm.feature_ids):
            fh.write(f"{k},{i},{j}\n")


def load_feature_ids(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return data[:, 1:3]


def save_group_matrix(gm: GroupMatrix, path, format=None) -> None:
    """Group matrix plus ``<path>.features.csv`` and ``<path>.meta.json`` sidecars."""
    save_matrix(gm.a, path, format)
    save_feature_ids(gm, f"{path}.features.csv")
    with open(f"{path}.meta.json", "w") as fh:
        json.dump({"region_count": gm.region_count, "column_ids": list(gm.column_ids)}, fh, indent=1)
        fh.write("\n")


def load_group_matrix(path, format=None) -> GroupMatrix:
    a = load_matrix(path, format)
    fid = load_feature_ids(f"{path}.features.csv")
    with open(f"{path}.meta.json") as fh:
        meta = json.load(fh)
    return GroupMatrix(a, meta["column_ids"], fid, int(meta["region_count"]))


__all__ = [
    "Connectome", "GroupMatrix", "bandpass_filter", "build_group_matrix", "collapse_to_regions",
    "correlation_matrix", "feature_pairs", "global_signal_regression",
    "group_from_time_series", "load_group_matrix", "n_features_for", "pair_indices",
    "region_time_series", "save_group_matrix", "unvectorize", "vectorize_upper", "zscore_rows",
]
