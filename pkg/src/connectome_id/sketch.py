"""Leverage scores, randomized row sampling and principal-feature selection.

For a group matrix ``A`` (features x scans) with orthonormal column-space
basis ``U``, the leverage score of feature ``i`` is ``||U[i]||^2``, the
diagonal of the projection ``U U^T``. Scores sum to the rank of ``A`` and lie
in [0, 1]. The deterministic attack keeps the ``t`` features with the largest
scores; the randomized sampler is kept for checking sketching error bounds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .connectome import GroupMatrix
from .errors import DomainError, RankError, ShapeError

RANK_TOL = 1e-10
DEFAULT_TOP_FEATURES = 100


@dataclass(frozen=True)
class LeverageProfile:
    scores: np.ndarray
    probabilities: np.ndarray
    rank: int


@dataclass(frozen=True)
class FeatureSelection:
    """Feature indices in order of decreasing leverage, with their scores."""

    indices: np.ndarray
    scores: np.ndarray
    source_group: str = ""

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        sc = np.asarray(self.scores, dtype=np.float64)
        if idx.ndim != 1 or idx.size == 0 or sc.shape != idx.shape:
            raise ShapeError("selection needs matching, non-empty index and score vectors")
        if np.unique(idx).size != idx.size:
            raise DomainError("selected feature indices must be distinct")
        if np.any(idx < 0):
            raise DomainError("feature indices must be non-negative")
        if np.any(np.diff(sc) > 0):
            raise DomainError("selection scores must be non-increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", sc)

    @property
    def t(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class SketchMatrix:
    rows: np.ndarray
    sampled_indices: np.ndarray
    rescale_factors: np.ndarray

    @property
    def s(self) -> int:
        return self.rows.shape[0]


def _matrix(a) -> np.ndarray:
    m = a.a if isinstance(a, GroupMatrix) else np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def column_space_basis(a, tol=RANK_TOL, rank=None):
    """Orthonormal basis of the column space from the thin SVD.

    Singular directions with ``sigma < tol * sigma_max`` are dropped. With
    ``rank`` given, only the leading ``rank`` left singular vectors are kept.

    Returns
    -------
    U : ndarray, shape (m, r)
    sigma : ndarray, shape (r,)
    """
    m = _matrix(a)
    if m.shape[0] < m.shape[1]:
        raise ShapeError(f"need at least as many features as columns, got {m.shape}")
    if not np.any(m):
        raise RankError("the zero matrix has no column space")
    u, sigma, _ = np.linalg.svd(m, full_matrices=False)
    r = int(np.sum(sigma >= tol * sigma[0]))
    if rank is not None:
        if rank < 1:
            raise DomainError(f"rank must be positive, got {rank}")
        r = min(r, int(rank))
    return u[:, :r], sigma[:r]


def leverage_scores(a, tol=RANK_TOL, rank=None) -> LeverageProfile:
    """Leverage scores ``l_i = ||U_i||^2`` and sampling probabilities ``l / sum(l)``.

    ``rank`` restricts ``U`` to the top singular directions, which gives the
    rank-k leverage scores used in relative-error sampling.
    """
    u, _ = column_space_basis(a, tol, rank)
    scores = np.einsum("ij,ij->i", u, u)
    return LeverageProfile(scores, scores / scores.sum(), u.shape[1])


def l2_row_probabilities(a) -> np.ndarray:
    """Squared row norms divided by the squared Frobenius norm."""
    m = _matrix(a)
    norms = np.einsum("ij,ij->i", m, m)
    total = norms.sum()
    if total == 0:
        raise DomainError("row probabilities are undefined for the zero matrix")
    return norms / total


def row_sample(a, s: int, p, seed) -> SketchMatrix:
    """Draw ``s`` rows i.i.d. from ``p`` and rescale each by ``1/sqrt(s p_i)``.

    With this rescaling ``E[S^T S] = A^T A`` for the sketch ``S``.
    """
    m = _matrix(a)
    p = np.asarray(p, dtype=np.float64)
    if int(s) != s or s < 1:
        raise DomainError(f"sample count must be a positive integer, got {s}")
    if p.shape != (m.shape[0],):
        raise ShapeError(f"probability vector has shape {p.shape}, expected ({m.shape[0]},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("p must be a probability vector summing to 1")
    rng = np.random.default_rng(seed)
    # inverse-CDF draws; searchsorted on the cumulative sum never lands on a zero-mass row
    cdf = np.cumsum(p)
    cdf[-1] = max(cdf[-1], 1.0)
    idx = np.searchsorted(cdf, rng.random(int(s)), side="right")
    idx = np.minimum(idx, m.shape[0] - 1)
    chosen = p[idx]
    if np.any(chosen == 0):
        raise DomainError("sampler drew a row with zero probability")
    factors = 1.0 / np.sqrt(s * chosen)
    return SketchMatrix(m[idx] * factors[:, None], idx, factors)


def top_indices(scores, t: int) -> np.ndarray:
    """Indices of the ``t`` largest scores; equal scores keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    if int(t) != t or not 1 <= t <= scores.size:
        raise DomainError(f"t must lie in [1, {scores.size}], got {t}")
    order = np.argsort(-scores, kind="stable")
    return order[: int(t)]


def principal_features(a, t: int = DEFAULT_TOP_FEATURES, source_group="", tol=RANK_TOL) -> FeatureSelection:
    """Deterministically keep the ``t`` features with the highest leverage."""
    prof = leverage_scores(a, tol)
    idx = top_indices(prof.scores, t)
    return FeatureSelection(idx, prof.scores[idx], source_group)


def restrict_features(a: GroupMatrix, sel: FeatureSelection) -> GroupMatrix:
    """Rows of ``a`` listed in ``sel``, in selection order, feature ids carried along."""
    if np.any(sel.indices >= a.n_features):
        bad = sel.indices[sel.indices >= a.n_features]
        raise IndexError(f"feature indices out of range for {a.n_features} features: {bad.tolist()}")
    return GroupMatrix(a.a[sel.indices], a.column_ids, a.feature_ids[sel.indices], a.region_count)


def save_selection(sel: FeatureSelection, feature_ids, path) -> None:
    """CSV with columns feature_index, region_i, region_j, leverage_score."""
    feature_ids = np.asarray(feature_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_index", "region_i", "region_j", "leverage_score"])
        for k, score in zip(sel.indices, sel.scores):
            i, j = feature_ids[k]
            w.writerow([int(k), int(i), int(j), "%.17g" % score])


def load_selection(path, source_group="") -> FeatureSelection:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: empty feature selection")
    return FeatureSelection(
        [int(r["feature_index"]) for r in rows],
        [float(r["leverage_score"]) for r in rows],
        source_group,
    )
