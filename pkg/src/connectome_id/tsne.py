"""Exact t-SNE and nearest-neighbour labelling on the embedding.

Affinities in the input space are Gaussian with a per-point bandwidth fixed
by a perplexity target; in the map they use the Cauchy kernel. The map is
optimized by gradient descent with momentum on KL(P || Q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DomainError, NumericalError, ShapeError

BETA_MIN, BETA_MAX = 1e-20, 1e20
MAX_BISECTIONS = 200


def default_momentum(t: int) -> float:
    return 0.5 if t <= 250 else 0.8


@dataclass(frozen=True)
class TsneParams:
    """Optimizer settings.

    ``exaggeration`` multiplies P for the first ``exaggeration_iters``
    iterations; the default of 1 disables it. ``kernel_distance`` selects the
    input-space kernel argument: ``"sq"`` for squared Euclidean distance or
    ``"abs"`` for plain Euclidean distance.
    """

    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 100.0
    momentum_schedule: object = default_momentum
    seed: int = 0
    target_dim: int = 2
    exaggeration: float = 1.0
    exaggeration_iters: int = 0
    kernel_distance: str = "sq"
    tol: float = 1e-6

    def __post_init__(self):
        if not self.perplexity > 1:
            raise DomainError(f"perplexity must exceed 1, got {self.perplexity}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise DomainError("iterations must be a positive integer")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if int(self.target_dim) != self.target_dim or self.target_dim < 1:
            raise DomainError("target_dim must be a positive integer")
        if self.kernel_distance not in ("sq", "abs"):
            raise DomainError("kernel_distance must be 'sq' or 'abs'")


@dataclass(frozen=True)
class AffinityMatrix:
    p: np.ndarray
    kind: str = "joint"


@dataclass
class Embedding:
    y: np.ndarray
    final_kl: float
    kl_trace: np.ndarray
    sigmas: np.ndarray = field(default=None)
    perplexity: float = float("nan")


def squared_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _kernel_input(x, kernel_distance):
    d = squared_distances(x)
    return d if kernel_distance == "sq" else np.sqrt(d)


def _row_perplexity(d_row, beta):
    """Conditional distribution exp(-beta*d) over one row, and its perplexity 2^H."""
    shifted = d_row - d_row.min()
    w = np.exp(-beta * shifted)
    total = w.sum()
    p = w / total
    nz = p > 0
    entropy = -np.sum(p[nz] * np.log2(p[nz]))
    return p, 2.0**entropy


def _calibrate_row(d_row, perplexity, tol, i):
    def perp(beta):
        return _row_perplexity(d_row, beta)[1]

    beta = 1.0 / max(np.mean(d_row), 1e-300)
    beta = min(max(beta, BETA_MIN), BETA_MAX)
    value = perp(beta)
    if abs(value - perplexity) <= tol:
        return beta
    # perplexity decreases as beta grows
    if value > perplexity:
        lo = beta
        hi = beta
        while perp(hi) > perplexity:
            if hi >= BETA_MAX:
                if abs(perp(hi) - perplexity) <= tol:
                    return hi
                raise ConvergenceError(
                    f"point {i}: perplexity {perplexity} unreachable (minimum {perp(hi):.6g})",
                    point=i, achieved=perp(hi),
                )
            lo, hi = hi, min(hi * 10.0, BETA_MAX)
    else:
        lo = beta
        hi = beta
        while perp(lo) < perplexity:
            if lo <= BETA_MIN:
                if abs(perp(lo) - perplexity) <= tol:
                    return lo
                raise ConvergenceError(
                    f"point {i}: perplexity {perplexity} unreachable (maximum {perp(lo):.6g})",
                    point=i, achieved=perp(lo),
                )
            hi, lo = lo, max(lo / 10.0, BETA_MIN)
    log_lo, log_hi = np.log(lo), np.log(hi)
    for _ in range(MAX_BISECTIONS):
        mid = np.exp(0.5 * (log_lo + log_hi))
        value = perp(mid)
        if abs(value - perplexity) <= tol:
            return mid
        if value > perplexity:
            log_lo = np.log(mid)
        else:
            log_hi = np.log(mid)
    raise ConvergenceError(
        f"point {i}: bisection did not reach perplexity {perplexity} "
        f"within {MAX_BISECTIONS} steps (last {value:.10g})",
        point=i, achieved=value,
    )


def _check_perplexity(n, perplexity):
    if n < 3:
        raise DomainError(f"perplexity calibration needs at least 3 points, got {n}")
    if not 1 < perplexity <= n - 1:
        raise DomainError(f"perplexity must lie in (1, {n - 1}], got {perplexity}")


def _conditional(x, perplexity, tol, kernel_distance):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"data must be 2-D, got {x.shape}")
    n = x.shape[0]
    _check_perplexity(n, perplexity)
    d = _kernel_input(x, kernel_distance)
    p = np.zeros((n, n))
    betas = np.empty(n)
    for i in range(n):
        row = np.delete(d[i], i)
        betas[i] = _calibrate_row(row, perplexity, tol, i)
        p[i, np.arange(n) != i] = _row_perplexity(row, betas[i])[0]
    return p, betas


def calibrate_sigmas(x, perplexity, tol=1e-6, kernel_distance="sq") -> np.ndarray:
    """Per-point Gaussian bandwidths matching the requested perplexity.

    For point ``i`` the conditional ``p_{j|i}`` is proportional to
    ``exp(-d_ij / (2 sigma_i^2))`` with ``d_ij`` the squared (or plain)
    Euclidean distance; ``sigma_i`` is found by bisection so that
    ``2 ** H(P_i)`` is within ``tol`` of ``perplexity``.
    """
    _, betas = _conditional(x, perplexity, tol, kernel_distance)
    return np.sqrt(1.0 / (2.0 * betas))


def conditional_affinities(x, perplexity, tol=1e-6, kernel_distance="sq") -> AffinityMatrix:
    p, _ = _conditional(x, perplexity, tol, kernel_distance)
    return AffinityMatrix(p, "conditional")


def joint_affinities(x, perplexity, tol=1e-6, kernel_distance="sq") -> AffinityMatrix:
    """Symmetrized affinities ``(p_{j|i} + p_{i|j}) / 2n``; the matrix sums to 1."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 2:
        # a single neighbour takes all conditional mass whatever the bandwidth
        return AffinityMatrix(np.array([[0.0, 0.5], [0.5, 0.0]]))
    cond, _ = _conditional(x, perplexity, tol, kernel_distance)
    return AffinityMatrix((cond + cond.T) / (2.0 * n))


def _map_sq_distances(y):
    diff = y[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _cauchy_weights(y):
    w = 1.0 / (1.0 + _map_sq_distances(y))
    np.fill_diagonal(w, 0.0)
    return w


def low_dim_affinities(y) -> AffinityMatrix:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ShapeError(f"need at least 2 map points, got shape {y.shape}")
    w = _cauchy_weights(y)
    return AffinityMatrix(w / w.sum())


def kl_divergence(p, q) -> float:
    """``sum p_ij log(p_ij / q_ij)`` in nats; zero-mass entries of P contribute nothing."""
    p = p.p if isinstance(p, AffinityMatrix) else np.asarray(p, dtype=np.float64)
    q = q.p if isinstance(q, AffinityMatrix) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"affinity shapes differ: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise DomainError("q vanishes where p has mass")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_gradient(p, q, y) -> np.ndarray:
    """``dC/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + ||y_i - y_j||^2)``."""
    p = p.p if isinstance(p, AffinityMatrix) else np.asarray(p, dtype=np.float64)
    q = q.p if isinstance(q, AffinityMatrix) else np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = 1.0 / (1.0 + _map_sq_distances(y))
    return _gradient(p, q, w, y)


def _gradient(p, q, w, y):
    m = (p - q) * w
    np.fill_diagonal(m, 0.0)
    return 4.0 * (m.sum(axis=1)[:, None] * y - m @ y)


def tsne_embed(x, params: TsneParams = TsneParams()) -> Embedding:
    """Embed the rows of ``x``.

    ``Y`` starts from N(0, 1e-4 I) and is updated as
    ``Y <- Y - eta * grad + alpha(t) * (Y_prev - Y_prevprev)``, which descends
    the KL divergence. ``kl_trace[t-1]`` is the divergence of the map used at
    iteration ``t``; ``final_kl`` is that of the returned map.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n >= 3 and params.perplexity >= n:
        raise DomainError(f"perplexity {params.perplexity} must be below the point count {n}")
    sigmas = None
    if n == 2:
        P = joint_affinities(x, params.perplexity).p
    else:
        cond, betas = _conditional(x, params.perplexity, params.tol, params.kernel_distance)
        P = (cond + cond.T) / (2.0 * n)
        sigmas = np.sqrt(1.0 / (2.0 * betas))
    rng = np.random.default_rng(params.seed)
    y = rng.normal(0.0, 1e-2, size=(n, params.target_dim))
    y_prev = y.copy()
    trace = np.empty(params.iterations)
    # overflow shows up as a non-finite KL or map and is reported below
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, params.iterations + 1):
            w = _cauchy_weights(y)
            Q = w / w.sum()
            P_eff = P * params.exaggeration if t <= params.exaggeration_iters else P
            trace[t - 1] = kl_divergence(P, Q)
            if not np.isfinite(trace[t - 1]):
                raise NumericalError(f"KL divergence became non-finite at iteration {t}")
            grad = _gradient(P_eff, Q, w, y)
            y_next = y - params.learning_rate * grad + params.momentum_schedule(t) * (y - y_prev)
            y_prev, y = y, y_next
            if not np.all(np.isfinite(y)):
                raise NumericalError(f"map became non-finite at iteration {t}")
    final = kl_divergence(P, low_dim_affinities(y))
    if not np.isfinite(final):
        raise NumericalError("final KL divergence is non-finite")
    return Embedding(y, final, trace, sigmas, params.perplexity)


def nn_classify(embedding, labeled_idx, labels, unlabeled_idx) -> np.ndarray:
    """Label each unlabeled point with the label of its nearest labeled point.

    Distance ties go to the labeled point with the lowest index.
    """
    y = embedding.y if isinstance(embedding, Embedding) else np.asarray(embedding, dtype=np.float64)
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    unlabeled_idx = np.asarray(unlabeled_idx, dtype=np.int64)
    labels = np.asarray(labels)
    if labeled_idx.size == 0:
        raise DomainError("need at least one labeled point")
    if labels.shape[0] != labeled_idx.size:
        raise ShapeError("one label per labeled index required")
    if np.intersect1d(labeled_idx, unlabeled_idx).size:
        raise DomainError("labeled and unlabeled index sets overlap")
    order = np.argsort(labeled_idx, kind="stable")
    diff = y[unlabeled_idx][:, None, :] - y[labeled_idx[order]][None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    return labels[order][np.argmin(d, axis=1)]
