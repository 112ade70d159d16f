"""Matching anonymous scans to reference scans by connectome similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .connectome import GroupMatrix
from .errors import DegenerateColumnError, ShapeError
from .sketch import DEFAULT_TOP_FEATURES, principal_features, restrict_features


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pearson similarity of reference scans (rows) against target scans (columns)."""

    sim: np.ndarray
    row_ids: tuple = ()
    col_ids: tuple = ()


@dataclass(frozen=True)
class MatchResult:
    assignment: np.ndarray
    accuracy: float | None = None
    margin: np.ndarray | None = None
    correct: np.ndarray | None = None


def _as_matrix(g):
    return g.a if isinstance(g, GroupMatrix) else np.asarray(g, dtype=np.float64)


def _ids(g, n):
    return tuple(g.column_ids) if isinstance(g, GroupMatrix) else tuple(str(k) for k in range(n))


def _standardize_columns(x, which):
    xc = x - x.mean(axis=0)
    sd = np.sqrt(np.mean(xc**2, axis=0))
    bad = (sd == 0) | (sd <= 1e-13 * np.max(np.abs(x), axis=0))
    if np.any(bad):
        raise DegenerateColumnError(np.flatnonzero(bad), f"{which} columns with zero variance: "
                                    f"{np.flatnonzero(bad).tolist()}")
    return xc / sd


def cross_similarity(ref, target) -> SimilarityMatrix:
    """Pearson correlation across features between every ref and target column."""
    a, b = _as_matrix(ref), _as_matrix(target)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"feature counts differ: {a.shape} vs {b.shape}")
    za = _standardize_columns(a, "reference")
    zb = _standardize_columns(b, "target")
    sim = np.clip(za.T @ zb / a.shape[0], -1.0, 1.0)
    return SimilarityMatrix(sim, _ids(ref, a.shape[1]), _ids(target, b.shape[1]))


def match_subjects(s, truth=None) -> MatchResult:
    """Assign each reference row to its most similar target column.

    Rows are matched independently (several rows may pick the same column).
    Ties go to the lowest column index. When ``truth`` (target index for
    every reference row) is given, accuracy and the per-row margin, the true
    match's similarity minus the best competing one, are reported.
    """
    sim = s.sim if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise ShapeError("similarity matrix must be non-empty and 2-D")
    assignment = np.argmax(sim, axis=1)
    if truth is None:
        return MatchResult(assignment)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (sim.shape[0],):
        raise ShapeError(f"truth has shape {truth.shape}, expected ({sim.shape[0]},)")
    correct = assignment == truth
    rows = np.arange(sim.shape[0])
    true_sim = sim[rows, truth]
    if sim.shape[1] > 1:
        others = sim.copy()
        others[rows, truth] = -np.inf
        margin = true_sim - others.max(axis=1)
    else:
        margin = np.full(sim.shape[0], np.inf)
    return MatchResult(assignment, float(correct.mean()), margin, correct)


def identify(ref: GroupMatrix, target: GroupMatrix, truth, t=DEFAULT_TOP_FEATURES, selection=None):
    """Select features on ``ref``, restrict both groups, match, return the MatchResult."""
    if selection is None:
        selection = principal_features(ref, min(t, ref.n_features))
    sim = cross_similarity(restrict_features(ref, selection), restrict_features(target, selection))
    return match_subjects(sim, truth)


def identifiability_matrix(groups_ref, groups_target, t=DEFAULT_TOP_FEATURES, truth=None):
    """Accuracy for every (reference task, target task) pair.

    Parameters
    ----------
    groups_ref, groups_target : dict
        Task label -> GroupMatrix. Every group holds the same subjects; the
        reference groups share one column order and so do the targets.
    t : int
        Number of features, selected on each reference task's group.
    truth : array_like, optional
        Target column index for every reference column; identity if omitted.

    Returns
    -------
    tasks : list
        Row/column labels, in the order of ``groups_ref``.
    acc : ndarray, shape (tasks, tasks)
        Row = de-anonymized reference task, column = anonymous target task.
    """
    tasks = list(groups_ref)
    missing = [k for k in tasks if k not in groups_target]
    if missing:
        raise ShapeError(f"target groups lack tasks {missing}")
    n = groups_ref[tasks[0]].n_columns
    truth = np.arange(n) if truth is None else np.asarray(truth)
    acc = np.zeros((len(tasks), len(tasks)))
    for r, task_a in enumerate(tasks):
        ref = groups_ref[task_a]
        sel = principal_features(ref, min(t, ref.n_features), source_group=str(task_a))
        ref_red = restrict_features(ref, sel)
        for c, task_b in enumerate(tasks):
            target = restrict_features(groups_target[task_b], sel)
            acc[r, c] = match_subjects(cross_similarity(ref_red, target), truth).accuracy
    return tasks, acc
