"""Exact Gaussian-process regression with an ARD squared-exponential kernel.

Hyperparameters are trained by maximising the log marginal likelihood with a
projected gradient ascent in log-parameter space. Many independent GPs that
share the same inputs (objective plus constraint or latent columns) are
trained together by :func:`fit_batch`; every (column, start) pair follows
its own optimisation path, so results do not depend on how columns are
grouped.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

JITTER = 1e-6
JITTER_MAX = 1e-2
SAMPLE_NUGGET = 1e-9
SAMPLE_NUGGET_MAX = 1e-3
LENGTHSCALE_BOUNDS = (0.005, 4.0)
SIGNAL_VARIANCE_BOUNDS = (0.05, 20.0)

_LOG_2PI = math.log(2.0 * math.pi)


class GPTrainingError(RuntimeError):
    """Hyperparameter training or kernel factorisation failed."""


class SurrogateTimeLimit(RuntimeError):
    """Batch fitting stopped because it exceeded its wall-time allowance."""

    def __init__(self, message, elapsed, columns_done, columns_total):
        super().__init__(message)
        self.elapsed = elapsed
        self.columns_done = columns_done
        self.columns_total = columns_total


@dataclass(frozen=True)
class GPHyperparameters:
    lengthscales: np.ndarray
    signal_variance: float
    noise_jitter: float = JITTER

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).ravel()
        if not (np.all(np.isfinite(ls)) and np.all(ls > 0)):
            raise ValueError("lengthscales must be positive and finite")
        if not (math.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError("signal variance must be positive and finite")
        if self.noise_jitter < 0:
            raise ValueError("jitter must be non-negative")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_log(self) -> np.ndarray:
        """``(log l_1, ..., log l_D, log s^2)`` -- the trained parameter vector."""
        return np.append(np.log(self.lengthscales), math.log(self.signal_variance))

    @classmethod
    def from_log(cls, theta, noise_jitter: float = JITTER) -> "GPHyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-1]), float(np.exp(theta[-1])), noise_jitter)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sa = np.einsum("ij,ij->i", A, A)
    sb = np.einsum("ij,ij->i", B, B)
    d2 = sa[:, None] + sb[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_matrix(A, B, lengthscales, signal_variance) -> np.ndarray:
    """Squared-exponential cross-covariance between the rows of ``A`` and ``B``."""
    ls = np.asarray(lengthscales, dtype=float)
    Az = np.atleast_2d(A) / ls
    if B is A:
        d2 = _sqdist(Az, Az)
        d2 = 0.5 * (d2 + d2.T)
        np.fill_diagonal(d2, 0.0)
    else:
        d2 = _sqdist(Az, np.atleast_2d(B) / ls)
    return signal_variance * np.exp(-0.5 * d2)


def kernel_eval(a, b, hyper: GPHyperparameters) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (hyper.dim,) or b.shape != (hyper.dim,):
        raise ValueError("input dimension does not match the lengthscales")
    r = (a - b) / hyper.lengthscales
    return hyper.signal_variance * math.exp(-0.5 * float(np.dot(r, r)))


def cholesky_with_jitter(K: np.ndarray, jitter: float, max_jitter: float = JITTER_MAX):
    """Lower Cholesky factor of ``K + jitter I``, escalating the jitter x10 on failure.

    Returns ``(L, jitter_used)``; raises :class:`GPTrainingError` once the
    jitter would exceed ``max_jitter``.
    """
    n = K.shape[0]
    jit = jitter
    while True:
        L, info = lapack.dpotrf(K + jit * np.eye(n), lower=1, clean=1, overwrite_a=1)
        if info == 0:
            return L, jit
        nxt = max(jit * 10.0, 1e-12)
        if nxt > max_jitter * (1 + 1e-9):
            cond = np.linalg.cond(K) if n <= 2000 else float("nan")
            raise GPTrainingError(
                f"kernel matrix not positive definite with jitter up to {jit:.1e} "
                f"(condition number {cond:.3e})"
            )
        jit = nxt


@dataclass(frozen=True)
class GPModel:
    """A conditioned GP. ``train_y`` is standardised; ``y_mean``/``y_std`` undo it."""

    hyper: GPHyperparameters
    train_x: np.ndarray
    train_y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter_used: float = JITTER
    log_likelihood: float = float("nan")

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]


def condition(hyper: GPHyperparameters, X, y, y_mean: float = 0.0, y_std: float = 1.0) -> GPModel:
    """Build a model from fixed hyperparameters (``y`` already standardised)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    K = kernel_matrix(X, X, hyper.lengthscales, hyper.signal_variance)
    L, jit = cholesky_with_jitter(K, hyper.noise_jitter)
    alpha = lapack.dpotrs(L, y, lower=1)[0]
    if jit != hyper.noise_jitter:
        hyper = GPHyperparameters(hyper.lengthscales, hyper.signal_variance, jit)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * len(y) * _LOG_2PI
    return GPModel(hyper, X, y, L, alpha, float(y_mean), float(y_std), jit, lml)


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------


def _batch_kernel(X, theta):
    """Per-element scaled inputs and SE kernel matrices for a parameter batch."""
    ls = np.exp(theta[:, :-1])
    s2 = np.exp(theta[:, -1])
    Z = X[None, :, :] / ls[:, None, :]
    sq = np.einsum("bnd,bnd->bn", Z, Z)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(Z, Z.transpose(0, 2, 1))
    d2 = 0.5 * (d2 + d2.transpose(0, 2, 1))
    np.maximum(d2, 0.0, out=d2)
    idx = np.arange(X.shape[0])
    d2[:, idx, idx] = 0.0
    np.multiply(d2, -0.5, out=d2)
    np.exp(d2, out=d2)
    d2 *= s2[:, None, None]
    return Z, d2


def _lml_batch(X, Y, theta, jitter, need_grad=True):
    """Log marginal likelihood (and gradient in log-parameters) for a batch.

    ``theta`` is (B, D+1), ``Y`` is (B, N). Elements whose kernel matrix
    cannot be factorised get value ``-inf`` and a zero gradient.
    """
    B, N = Y.shape
    Z, Kse = _batch_kernel(X, theta)
    vals = np.full(B, -np.inf)
    grads = np.zeros_like(theta)
    eye_j = jitter * np.eye(N)
    ok = np.zeros(B, bool)
    Kinv = np.zeros((B, N, N)) if need_grad else None
    alpha = np.zeros((B, N))
    for b in range(B):
        L, info = lapack.dpotrf(Kse[b] + eye_j, lower=1, clean=1)
        if info != 0:
            continue
        logdet = 2.0 * float(np.log(np.diag(L)).sum())
        if need_grad:
            Li, info = lapack.dpotri(L, lower=1)
            if info != 0:
                continue
            Kinv[b] = Li
        else:
            alpha[b] = lapack.dpotrs(L, Y[b], lower=1)[0]
        vals[b] = -0.5 * logdet
        ok[b] = True
    if need_grad:
        # dpotri leaves the inverse in the lower triangle; the upper one is zero.
        diag = Kinv[:, np.arange(N), np.arange(N)].copy()
        Kinv += Kinv.transpose(0, 2, 1)
        Kinv[:, np.arange(N), np.arange(N)] = diag
        alpha = np.einsum("bij,bj->bi", Kinv, Y)
    vals[ok] += -0.5 * np.einsum("bn,bn->b", Y[ok], alpha[ok]) - 0.5 * N * _LOG_2PI
    if not need_grad or not ok.any():
        return vals, grads
    sel = np.flatnonzero(ok)
    a = alpha[sel]
    W = a[:, :, None] * a[:, None, :] - Kinv[sel]
    M = W * Kse[sel]
    Zs = Z[sel]
    r = M.sum(axis=2)
    MZ = np.matmul(M, Zs)
    grads[sel, :-1] = np.einsum("bn,bnd->bd", r, Zs * Zs) - np.einsum("bnd,bnd->bd", Zs, MZ)
    grads[sel, -1] = 0.5 * M.sum(axis=(1, 2))
    return vals, grads


def log_marginal_likelihood(hyper: GPHyperparameters, trainX, trainY):
    """Return ``(value, gradient)`` of the log marginal likelihood.

    The kernel matrix includes ``hyper.noise_jitter`` on its diagonal. The
    gradient is taken with respect to ``(log l_1, ..., log l_D, log s^2)``.
    """
    X = np.atleast_2d(np.asarray(trainX, dtype=float))
    y = np.asarray(trainY, dtype=float).ravel()
    if X.shape[0] != y.size or X.shape[0] < 1:
        raise ValueError("trainX and trainY disagree in length")
    vals, grads = _lml_batch(X, y[None, :], hyper.to_log()[None, :], hyper.noise_jitter)
    if not np.isfinite(vals[0]):
        raise GPTrainingError("kernel matrix is not positive definite at these hyperparameters")
    return float(vals[0]), grads[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 4
    max_iter: int = 100
    grad_tol: float = 1e-5
    lengthscale_bounds: tuple = LENGTHSCALE_BOUNDS
    signal_variance_bounds: tuple = SIGNAL_VARIANCE_BOUNDS
    jitter: float = JITTER
    chunk_bytes: int = 256 * 2**20


DEFAULT_FIT = FitOptions()


def _log_bounds(dim, opts: FitOptions):
    lo = np.append(np.full(dim, math.log(opts.lengthscale_bounds[0])), math.log(opts.signal_variance_bounds[0]))
    hi = np.append(np.full(dim, math.log(opts.lengthscale_bounds[1])), math.log(opts.signal_variance_bounds[1]))
    return lo, hi


def start_points(dim: int, seed, opts: FitOptions = DEFAULT_FIT) -> np.ndarray:
    """Deterministic multi-start points in log-space, shared by every column.

    The first start is a fixed central guess; the others are drawn around it.
    ``n_starts=0`` still yields the central guess, used when a column has no
    warm start.
    """
    lo, hi = _log_bounds(dim, opts)
    l0 = min(opts.lengthscale_bounds[1], max(opts.lengthscale_bounds[0], 0.5 * math.sqrt(dim)))
    base = np.append(np.full(dim, math.log(l0)), 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6750]))
    starts = [base]
    for _ in range(max(opts.n_starts, 1) - 1):
        pert = np.append(rng.uniform(-1.5, 1.5, dim), rng.uniform(-1.5, 1.5))
        starts.append(base + pert)
    return np.clip(np.array(starts), lo, hi)


def _projected(grad, theta, lo, hi):
    g = grad.copy()
    g[(theta <= lo) & (g < 0)] = 0.0
    g[(theta >= hi) & (g > 0)] = 0.0
    return g


def _ascend(X, Y, theta0, lo, hi, opts: FitOptions):
    """Projected gradient ascent with Armijo backtracking, one path per row."""
    theta = theta0.copy()
    val, grad = _lml_batch(X, Y, theta, opts.jitter)
    pg = _projected(grad, theta, lo, hi)
    gnorm = np.linalg.norm(pg, axis=1)
    step = 0.5 / np.maximum(gnorm, 1e-12)
    done = ~np.isfinite(val) | (gnorm < opts.grad_tol)
    for _ in range(opts.max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        accepted = np.zeros(act.size, bool)
        new_theta = theta[act].copy()
        new_val = val[act].copy()
        for _bt in range(30):
            todo = np.flatnonzero(~accepted)
            if todo.size == 0:
                break
            rows = act[todo]
            trial = np.clip(theta[rows] + step[rows, None] * pg[rows], lo, hi)
            tv, _ = _lml_batch(X, Y[rows], trial, opts.jitter, need_grad=False)
            gain = np.einsum("bp,bp->b", pg[rows], trial - theta[rows])
            good = np.isfinite(tv) & (tv >= val[rows] + 1e-4 * gain) & (gain > 0)
            hit = todo[good]
            accepted[hit] = True
            new_theta[hit] = trial[good]
            new_val[hit] = tv[good]
            miss = rows[~good]
            step[miss] *= 0.25
            tiny = step[miss] * gnorm[miss] < 1e-10
            if tiny.any():
                done[miss[tiny]] = True
                accepted[np.isin(act, miss[tiny])] = True
        moved = act[accepted & ~done[act]]
        if moved.size == 0:
            continue
        idx = np.searchsorted(act, moved)
        theta[moved] = new_theta[idx]
        v, g = _lml_batch(X, Y[moved], theta[moved], opts.jitter)
        val[moved] = v
        pg[moved] = _projected(g, theta[moved], lo, hi)
        gnorm[moved] = np.linalg.norm(pg[moved], axis=1)
        step[moved] = np.minimum(step[moved] * 2.0, 1e3)
        done[moved] |= (gnorm[moved] < opts.grad_tol) | ~np.isfinite(v)
    return theta, val


def _standardize(y):
    mean = float(np.mean(y))
    std = float(np.std(y))
    if not np.isfinite(std) or std <= 1e-12 * max(1.0, abs(mean)):
        std = 1.0
    return (y - mean) / std, mean, std


def fit_batch(
    trainX,
    trainY,
    seed=0,
    options: Optional[FitOptions] = None,
    init: Optional[Sequence[Optional[GPHyperparameters]]] = None,
    time_limit: Optional[float] = None,
) -> list[GPModel]:
    """Fit one independent GP per column of ``trainY`` (shape N x m).

    Each column is standardised, trained from the shared multi-start points
    (plus, when ``init`` is given, a per-column warm start; columns whose
    ``init`` entry is None start from the central guess), and the start with
    the highest marginal likelihood is kept. ``time_limit`` (seconds) aborts
    with :class:`SurrogateTimeLimit` once exceeded between column chunks.
    """
    opts = options or DEFAULT_FIT
    X = np.atleast_2d(np.asarray(trainX, dtype=float))
    Y = np.asarray(trainY, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, D = X.shape
    m = Y.shape[1]
    if Y.shape[0] != N:
        raise ValueError("trainX and trainY disagree in length")
    if N < 2:
        raise ValueError("need at least two training points")
    lo, hi = _log_bounds(D, opts)
    central = start_points(D, seed, opts)
    shared = central if opts.n_starts > 0 else central[:0]
    warm = init is not None
    n_rows = len(shared) + (1 if warm else 0)
    if n_rows == 0:
        raise ValueError("n_starts=0 requires warm starts")

    stds = [_standardize(Y[:, j]) for j in range(m)]
    per_col = n_rows * N * N * 8 * 6
    chunk = max(1, int(opts.chunk_bytes // max(per_col, 1)))

    t0 = time.perf_counter()
    models: list[GPModel] = []
    for c0 in range(0, m, chunk):
        cols = range(c0, min(m, c0 + chunk))
        thetas, ys = [], []
        for j in cols:
            th = shared
            if warm:
                first = central[0] if init[j] is None else np.clip(init[j].to_log(), lo, hi)
                th = np.vstack([first[None, :], shared])
            thetas.append(th)
            ys.append(np.repeat(stds[j][0][None, :], len(th), axis=0))
        theta0 = np.vstack(thetas)
        Yb = np.vstack(ys)
        theta, val = _ascend(X, Yb, theta0, lo, hi, opts)
        for k, j in enumerate(cols):
            sl = slice(k * n_rows, (k + 1) * n_rows)
            v = np.where(np.isfinite(val[sl]), val[sl], -np.inf)
            if not np.isfinite(v).any():
                raise GPTrainingError(f"column {j}: every restart failed to factorise")
            best = int(np.argmax(v))
            hyper = GPHyperparameters.from_log(theta[sl][best], opts.jitter)
            ys_, mean, std = stds[j]
            try:
                models.append(condition(hyper, X, ys_, mean, std))
            except GPTrainingError as exc:
                raise GPTrainingError(f"column {j}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        if time_limit is not None and elapsed > time_limit and len(models) < m:
            raise SurrogateTimeLimit(
                f"fitted {len(models)} of {m} GPs in {elapsed:.1f}s (limit {time_limit:.1f}s)",
                elapsed,
                len(models),
                m,
            )
    return models


def fit(trainX, trainY, seed=0, options: Optional[FitOptions] = None, init=None) -> GPModel:
    """Fit a single GP; identical to a one-column :func:`fit_batch`."""
    y = np.asarray(trainY, dtype=float).ravel()
    return fit_batch(trainX, y[:, None], seed, options, None if init is None else [init])[0]


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def posterior(model: GPModel, queries, standardized: bool = False):
    """Posterior mean and variance at ``queries`` (M x D).

    By default values are returned in the original output units; pass
    ``standardized=True`` for the units the GP was trained in.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    h = model.hyper
    Kq = kernel_matrix(Q, model.train_x, h.lengthscales, h.signal_variance)
    mean = Kq @ model.alpha
    V = solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    var = h.signal_variance - np.einsum("ij,ij->j", V, V)
    np.maximum(var, 0.0, out=var)
    if standardized:
        return mean, var
    return mean * model.y_std + model.y_mean, var * model.y_std**2


def posterior_factor(model: GPModel, queries):
    """Standardised posterior mean and a lower factor of the joint covariance.

    A small diagonal nugget (relative to ``s^2``) is added and escalated x10
    until the covariance factorises.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    h = model.hyper
    Kq = kernel_matrix(Q, model.train_x, h.lengthscales, h.signal_variance)
    mean = Kq @ model.alpha
    V = solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    cov = kernel_matrix(Q, Q, h.lengthscales, h.signal_variance)
    cov -= V.T @ V
    try:
        L, _ = cholesky_with_jitter(
            cov, SAMPLE_NUGGET * h.signal_variance, SAMPLE_NUGGET_MAX * h.signal_variance
        )
    except GPTrainingError as exc:
        raise GPTrainingError(f"posterior covariance factorisation failed: {exc}") from exc
    return mean, L


def draw_from_factor(model: GPModel, mean, factor, rng, standardized: bool = False) -> np.ndarray:
    z = rng.standard_normal(mean.shape[0])
    s = mean + factor @ z
    return s if standardized else s * model.y_std + model.y_mean


def sample_posterior(model: GPModel, queries, count: int, seed, standardized: bool = False) -> np.ndarray:
    """``count`` joint posterior draws at ``queries``; returns (count, M)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mean, L = posterior_factor(model, queries)
    rng = np.random.default_rng(seed)
    Zn = rng.standard_normal((mean.shape[0], count))
    S = (mean[:, None] + L @ Zn).T
    return S if standardized else S * model.y_std + model.y_mean


__all__ = [
    "DEFAULT_FIT",
    "FitOptions",
    "GPHyperparameters",
    "GPModel",
    "GPTrainingError",
    "SurrogateTimeLimit",
    "cholesky_with_jitter",
    "condition",
    "draw_from_factor",
    "fit",
    "fit_batch",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "posterior",
    "posterior_factor",
    "sample_posterior",
    "start_points",
]

