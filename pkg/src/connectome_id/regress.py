"""Predicting task performance from leverage-selected connectome features.

The regressor is linear. Its default loss is epsilon-insensitive (linear
support-vector regression) with an L2 penalty; a squared-loss ridge is
available as a baseline and has a closed-form solution to check against.
Features and target are standardized on the training set and the fitted
model is mapped back to the original units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .connectome import GroupMatrix, group_from_time_series
from .errors import ConvergenceError, DomainError, ShapeError
from .sketch import principal_features, restrict_features

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        return lambda f: f

LOSSES = ("epsilon_insensitive", "squared")
GAP_CHECK = 1e-4


@dataclass
class RegressionModel:
    weights: np.ndarray
    intercept: float
    regularization: float
    loss: str
    epsilon: float
    objective: float = float("nan")
    iterations: int = 0


@dataclass
class ExperimentReport:
    train_nrmse_mean: float
    train_nrmse_std: float
    test_nrmse_mean: float
    test_nrmse_std: float
    repeats: int
    split: tuple
    task: str = ""
    train_nrmse: np.ndarray = field(default=None, repr=False)
    test_nrmse: np.ndarray = field(default=None, repr=False)
    selections: list = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "task": self.task,
            "train_nrmse_mean": self.train_nrmse_mean,
            "train_nrmse_std": self.train_nrmse_std,
            "test_nrmse_mean": self.test_nrmse_mean,
            "test_nrmse_std": self.test_nrmse_std,
            "repeats": self.repeats,
            "n_train": self.split[0],
            "n_test": self.split[1],
        }


def _samples(x) -> np.ndarray:
    """Features x samples (group-matrix layout) to samples x features."""
    m = x.a if isinstance(x, GroupMatrix) else np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    return m.T


def _standardize(v, axis=0):
    mean = v.mean(axis=axis)
    scale = v.std(axis=axis)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def squared_objective(X, y, w, b, lam):
    r = y - X @ w - b
    return 0.5 * np.mean(r**2) + 0.5 * lam * (w @ w)


def epsilon_objective(X, y, w, b, lam, eps):
    r = np.abs(y - X @ w - b)
    return np.mean(np.maximum(r - eps, 0.0)) + 0.5 * lam * (w @ w)


def _ridge_closed(X, y, lam):
    n, d = X.shape
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    if lam > 0:
        w = np.linalg.solve(Xc.T @ Xc / n + lam * np.eye(d), Xc.T @ yc / n)
    else:
        w = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    return w, ym - xm @ w


def _ridge_iterative(X, y, lam, tol, max_iter):
    """Accelerated gradient descent on the ridge objective (intercept unpenalized).

    Stops once the gradient certifies a relative suboptimality below ``tol``
    (via strong convexity), or, when the problem is not strongly convex, once
    the relative objective change drops below ``tol``.
    """
    n, d = X.shape
    Z = np.column_stack([X, np.ones(n)])
    H = Z.T @ Z / n
    H[:d, :d] += lam * np.eye(d)
    eig = np.linalg.eigvalsh(H)
    L, mu = eig[-1], max(eig[0], 0.0)
    theta = np.zeros(d + 1)
    prev = theta.copy()
    zy = Z.T @ y / n
    f_old = np.inf
    for it in range(1, max_iter + 1):
        v = theta + (it - 1) / (it + 2) * (theta - prev)
        grad = H @ v - zy
        prev, theta = theta, v - grad / L
        f = squared_objective(X, y, theta[:d], theta[d], lam)
        if f > f_old:
            # restart momentum when the objective goes up
            prev = theta.copy()
        g = H @ theta - zy
        scale = max(abs(f), 1e-300)
        if mu > 1e-12 * L:
            if (g @ g) / (2 * mu) <= tol * scale:
                return theta[:d], theta[d], f, it
        elif abs(f_old - f) <= tol * scale:
            return theta[:d], theta[d], f, it
        f_old = f
    raise ConvergenceError("ridge gradient descent did not converge", objective=f, iterations=max_iter)


@njit(cache=True)
def _svr_epochs(Z, y, C, eps, tol, max_iter):
    n, k = Z.shape
    qdiag = np.zeros(n)
    for i in range(n):
        qdiag[i] = Z[i] @ Z[i]
    beta = np.zeros(n)
    w = np.zeros(k)
    primal = np.inf
    for epoch in range(1, max_iter + 1):
        previous = primal
        for i in range(n):
            if qdiag[i] == 0.0:
                continue
            z = beta[i] - (Z[i] @ w - y[i]) / qdiag[i]
            b = max(abs(z) - eps / qdiag[i], 0.0)
            if z < 0:
                b = -b
            b = min(max(b, -C), C)
            if b != beta[i]:
                w += (b - beta[i]) * Z[i]
                beta[i] = b
        # resynchronize w with beta so rounding drift cannot stall the gap
        w = Z.T @ beta
        hinge = 0.0
        for i in range(n):
            hinge += max(abs(y[i] - Z[i] @ w) - eps, 0.0)
        ww = w @ w
        primal = 0.5 * ww + C * hinge
        dual = -0.5 * ww + y @ beta - eps * np.abs(beta).sum()
        scale = max(abs(primal), 1e-300)
        if abs(previous - primal) <= tol * scale and primal - dual <= GAP_CHECK * scale:
            return w, epoch, primal
    return w, -1, primal


def _svr_dual_cd(X, y, lam, eps, tol, max_iter):
    """Dual coordinate descent for L2-regularized epsilon-insensitive regression.

    Works on ``1/2 ||w||^2 + C sum max(0, |y - w.x| - eps)`` with
    ``C = 1/(lam n)``, which is the mean-loss objective divided by ``lam``. The
    intercept is the weight of an appended constant feature (so it carries a
    small penalty). Samples are visited in index order. The loop stops when
    an epoch changes the primal objective by less than ``tol`` relative and
    the duality gap is below ``GAP_CHECK`` relative; the dual is degenerate
    when samples outnumber features, so the gap itself closes slowly.
    """
    n, d = X.shape
    Z = np.ascontiguousarray(np.column_stack([X, np.ones(n)]))
    w, epochs, primal = _svr_epochs(Z, np.ascontiguousarray(y), 1.0 / (lam * n), eps, tol, max_iter)
    if epochs < 0:
        raise ConvergenceError(
            "epsilon-insensitive dual coordinate descent did not converge",
            primal=primal, iterations=max_iter,
        )
    return w[:d], w[d], epochs


def fit_regressor(x_train, y_train, loss="epsilon_insensitive", regularization=1e-2,
                  epsilon=0.1, solver="iterative", tol=1e-8, max_iter=100_000) -> RegressionModel:
    """Fit a linear model to samples stored as the columns of ``x_train``.

    Parameters
    ----------
    x_train : GroupMatrix or ndarray, shape (features, samples)
    y_train : ndarray, shape (samples,)
    loss : {"epsilon_insensitive", "squared"}
    regularization : float
        L2 penalty ``lam``; the objective is mean loss + ``lam/2 ||w||^2`` in
        standardized units.
    epsilon : float
        Insensitive-zone half width, in standardized target units.
    solver : {"iterative", "closed"}
        ``"closed"`` solves the normal equations (squared loss only).

    Returns
    -------
    RegressionModel
        Weights and intercept in original units; ``objective`` is the
        attained standardized objective.
    """
    if loss not in LOSSES:
        raise DomainError(f"loss must be one of {LOSSES}, got {loss!r}")
    if regularization < 0 or epsilon < 0:
        raise DomainError("regularization and epsilon must be non-negative")
    X = _samples(x_train)
    y = np.asarray(y_train, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{y.shape} targets for {X.shape[0]} samples")
    if X.shape[0] < 2:
        raise DomainError("need at least two training samples")
    if np.ptp(y) == 0:
        # nothing to explain; skip the solver so the weights are exactly zero
        return RegressionModel(np.zeros(X.shape[1]), float(y[0]), regularization, loss, epsilon, 0.0, 0)
    xm, xs = _standardize(X)
    ym, ys = _standardize(y)
    Xs, yz = (X - xm) / xs, (y - ym) / ys

    if loss == "squared":
        if solver == "closed":
            w, b = _ridge_closed(Xs, yz, regularization)
            iters = 0
        else:
            w, b, _, iters = _ridge_iterative(Xs, yz, regularization, tol, max_iter)
        objective = squared_objective(Xs, yz, w, b, regularization)
    else:
        if solver != "iterative":
            raise DomainError("epsilon-insensitive loss has no closed-form solver")
        if regularization == 0:
            raise DomainError("epsilon-insensitive loss needs a positive regularization")
        w, b, iters = _svr_dual_cd(Xs, yz, regularization, epsilon, tol, max_iter)
        objective = epsilon_objective(Xs, yz, w, b, regularization, epsilon)

    weights = w * ys / xs
    intercept = ym + ys * b - weights @ xm
    return RegressionModel(weights, float(intercept), regularization, loss, epsilon, float(objective), iters)


def predict(model: RegressionModel, x) -> np.ndarray:
    X = _samples(x)
    if X.shape[1] != model.weights.size:
        raise ShapeError(f"model has {model.weights.size} weights, data has {X.shape[1]} features")
    return X @ model.weights + model.intercept


def nrmse(y_hat, y_true, normalizer="range") -> float:
    """Root-mean-squared error as a percentage of the target range (or mean)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_hat.shape != y_true.shape or y_true.ndim != 1 or y_true.size < 2:
        raise ShapeError("nrmse needs two equal-length vectors with at least 2 entries")
    rmse = np.sqrt(np.mean((y_hat - y_true) ** 2))
    if normalizer == "range":
        denom = y_true.max() - y_true.min()
    elif normalizer == "mean":
        denom = abs(y_true.mean())
    else:
        raise DomainError(f"normalizer must be 'range' or 'mean', got {normalizer!r}")
    if denom == 0:
        raise DomainError("target normalizer is zero (constant target)")
    return float(100.0 * rmse / denom)


def performance_data(cohort, task, session=1):
    """Group matrix and targets for subjects that have a score on ``task``."""
    subjects = [s for s in cohort.subjects if (s, task) in cohort.performance]
    if len(subjects) < 4:
        raise DomainError(f"task {task!r}: only {len(subjects)} subjects have performance scores")
    series = [cohort.sessions[(s, session, task)] for s in subjects]
    gm = group_from_time_series(series, subjects)
    y = np.array([cohort.performance[(s, task)] for s in subjects])
    return gm, y


def split_counts(n, train_fraction=0.8):
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 2), n - 2)
    return n_train, n - n_train


def run_performance_experiment(cohort, task, t=10, repeats=100, seed=0, loss="epsilon_insensitive",
                               regularization=1e-2, epsilon=0.1, train_fraction=0.8,
                               normalizer="range", data=None) -> ExperimentReport:
    """Repeated random train/test splits: select on train, fit, score both sides.

    Leverage selection sees only the training columns. Each repeat draws its
    split from its own seed stream derived from ``seed``.
    """
    gm, y = data if data is not None else performance_data(cohort, task)
    n = gm.n_columns
    n_train, n_test = split_counts(n, train_fraction)
    train_err, test_err, selections = [], [], []
    streams = np.random.SeedSequence(seed).spawn(repeats)
    for stream in streams:
        perm = np.random.default_rng(stream).permutation(n)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        train = gm.take_columns(tr)
        sel = principal_features(train, min(t, gm.n_features))
        model = fit_regressor(restrict_features(train, sel), y[tr], loss, regularization, epsilon)
        test = restrict_features(gm.take_columns(te), sel)
        train_err.append(nrmse(predict(model, restrict_features(train, sel)), y[tr], normalizer))
        test_err.append(nrmse(predict(model, test), y[te], normalizer))
        selections.append(sel.indices)
    train_err, test_err = np.array(train_err), np.array(test_err)
    return ExperimentReport(
        float(train_err.mean()), float(train_err.std()),
        float(test_err.mean()), float(test_err.std()),
        repeats, (n_train, n_test), str(task), train_err, test_err, selections,
    )


def plant_performance(cohort, task, n_features=5, noise=0.01, seed=0, center=60.0, spread=8.0):
    """Give every subject a score linear in its top-leverage features.

    The planted features are the ``n_features`` highest-leverage features of
    the task's session-1 group matrix over all subjects. The score is
    ``center + spread * z`` where ``z`` is the standardized linear combination
    (random weights) plus Gaussian noise of standard deviation ``noise``,
    clipped to [0, 100]. Returns the cohort with scores added and the indices
    of the planted features.
    """
    series = cohort.scans(1, task)
    gm = group_from_time_series(series, cohort.subjects)
    planted = principal_features(gm, n_features).indices
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    weights = rng.standard_normal(n_features)
    signal = weights @ gm.a[planted]
    z = (signal - signal.mean()) / signal.std() + noise * rng.standard_normal(gm.n_columns)
    scores = np.clip(center + spread * z, 0.0, 100.0)
    out = cohort.with_sessions(dict(cohort.sessions))
    for s, score in zip(cohort.subjects, scores):
        out.performance[(s, task)] = float(score)
    return out, planted


def random_performance(cohort, task, seed=0, center=60.0, spread=8.0):
    """Scores unrelated to the scans (null model)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(8,)))
    z = rng.standard_normal(len(cohort.subjects))
    out = cohort.with_sessions(dict(cohort.sessions))
    for s, v in zip(cohort.subjects, np.clip(center + spread * z, 0.0, 100.0)):
        out.performance[(s, task)] = float(v)
    return out
