"""Design-of-experiments storage, box normalisation and Latin hypercube sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

# A closed-form feasibility filter takes an (n, D) array and returns an (n,) bool mask.
Filter = Callable[[np.ndarray], np.ndarray]

REJECTION_BUDGET = 10**6


class RejectionBudgetExceeded(RuntimeError):
    """Raised when a feasibility filter accepts too few proposals."""


@dataclass(frozen=True)
class BoundsSpec:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise ValueError("lower and upper bounds differ in length")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @classmethod
    def unit(cls, dim: int) -> "BoundsSpec":
        return cls(np.zeros(dim), np.ones(dim))


def normalize(x, bounds: BoundsSpec) -> np.ndarray:
    """Affine map from problem units to ``[0, 1]^D``.

    Points outside the box are rejected rather than clipped.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != bounds.dim:
        raise ValueError(f"expected trailing dimension {bounds.dim}, got {x.shape[-1]}")
    if np.any(x < bounds.lower) or np.any(x > bounds.upper):
        raise ValueError("point lies outside the bounds")
    return (x - bounds.lower) / (bounds.upper - bounds.lower)


def denormalize(u, bounds: BoundsSpec) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != bounds.dim:
        raise ValueError(f"expected trailing dimension {bounds.dim}, got {u.shape[-1]}")
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("normalised point lies outside [0, 1]")
    return bounds.lower + u * (bounds.upper - bounds.lower)


def _filter_name(filt) -> str:
    return getattr(filt, "__name__", None) or type(filt).__name__


def lhs_sample(bounds: BoundsSpec, count: int, seed, filter: Optional[Filter] = None) -> np.ndarray:
    """Latin hypercube sample of ``count`` points inside ``bounds``.

    Each coordinate is stratified into ``count`` equal bins holding one point
    each. With a ``filter``, rejected rows are replaced by filter-passing rows
    taken from fresh hypercube draws, so stratification then holds only for
    the rows that survived the first draw.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    sampler = qmc.LatinHypercube(d=bounds.dim, seed=rng)
    u = sampler.random(count)
    x = bounds.lower + u * (bounds.upper - bounds.lower)
    if filter is None:
        return x

    ok = np.asarray(filter(x), dtype=bool)
    missing = int(np.count_nonzero(~ok))
    if missing == 0:
        return x
    budget = REJECTION_BUDGET * missing
    drawn = 0
    accepted: list[np.ndarray] = []
    n_accepted = 0
    batch = max(count, 256)
    while n_accepted < missing:
        if drawn >= budget:
            raise RejectionBudgetExceeded(
                f"filter {_filter_name(filter)!r} accepted {n_accepted} of {drawn} proposals; "
                f"needed {missing}"
            )
        prop = bounds.lower + qmc.LatinHypercube(d=bounds.dim, seed=rng).random(batch) * (
            bounds.upper - bounds.lower
        )
        drawn += batch
        keep = prop[np.asarray(filter(prop), dtype=bool)]
        accepted.append(keep)
        n_accepted += len(keep)
    x[~ok] = np.concatenate(accepted)[:missing]
    return x


def total_violation(C) -> np.ndarray:
    """Sum of positive constraint values per row (raw constraint units)."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return np.clip(C, 0.0, None).sum(axis=1)


def feasible_mask(C) -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return np.all(C <= 0.0, axis=1)


def incumbent_index(f, C) -> int:
    """Best feasible row, or the minimum-total-violation row if none is feasible.

    Ties are broken by the lowest index.
    """
    f = np.asarray(f, dtype=float)
    if f.size == 0:
        raise ValueError("no rows")
    feas = feasible_mask(C)
    if feas.any():
        score = np.where(feas, f, np.inf)
        return int(np.argmin(score))
    return int(np.argmin(total_violation(C)))


class Dataset:
    """Append-only evaluation history in normalised input space.

    Rows are never modified once appended; the ``X``, ``f`` and ``C``
    properties return read-only views.
    """

    def __init__(self, dim: int, n_constraints: int):
        self.dim = int(dim)
        self.n_constraints = int(n_constraints)
        self._X = np.empty((16, self.dim))
        self._f = np.empty(16)
        self._C = np.empty((16, self.n_constraints))
        self._n = 0
        self.eval_count = 0

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = len(self._f)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_X", "_f", "_C"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:])
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def append(self, x, f, c) -> int:
        """Append one evaluation and return its row index."""
        x = np.asarray(x, dtype=float).ravel()
        c = np.asarray(c, dtype=float).ravel()
        if x.size != self.dim or c.size != self.n_constraints:
            raise ValueError("evaluation has the wrong shape")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("design point is outside [0, 1]^D")
        if not (np.all(np.isfinite(x)) and np.isfinite(f) and np.all(np.isfinite(c))):
            raise ValueError("non-finite values cannot be stored")
        self._grow(self._n + 1)
        i = self._n
        self._X[i] = x
        self._f[i] = float(f)
        self._C[i] = c
        self._n += 1
        self.eval_count += 1
        return i

    def _view(self, arr):
        v = arr[: self._n]
        v = v.view()
        v.flags.writeable = False
        return v

    @property
    def X(self) -> np.ndarray:
        return self._view(self._X)

    @property
    def f(self) -> np.ndarray:
        return self._view(self._f)

    @property
    def C(self) -> np.ndarray:
        return self._view(self._C)

    def to_csv(self, path) -> None:
        header = (
            [f"x_{i + 1}" for i in range(self.dim)]
            + ["f"]
            + [f"c_{j + 1}" for j in range(self.n_constraints)]
        )
        rows = np.column_stack([self.X, self.f, self.C]) if self._n else np.empty((0, len(header)))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([format(v, ".17g") for v in row])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = [[float(v) for v in row] for row in reader]
        dim = sum(h.startswith("x_") for h in header)
        n_con = sum(h.startswith("c_") for h in header)
        ds = cls(dim, n_con)
        for row in data:
            ds.append(row[:dim], row[dim], row[dim + 1 :])
        return ds


def best_feasible(ds: Dataset):
    """Return ``(index, objective)`` of the best feasible row, or ``None``."""
    if len(ds) == 0:
        return None
    feas = feasible_mask(ds.C)
    if not feas.any():
        return None
    idx = int(np.argmin(np.where(feas, ds.f, np.inf)))
    return idx, float(ds.f[idx])


def reporting_incumbent(f, C) -> np.ndarray:
    """Running best-feasible objective for convergence curves.

    Evaluations made before the first feasible point take the largest
    feasible objective seen anywhere in the run. A run with no feasible
    point yields all-NaN.
    """
    f = np.asarray(f, dtype=float)
    feas = feasible_mask(C) if len(f) else np.zeros(0, bool)
    out = np.full(len(f), np.nan)
    if not feas.any():
        return out
    default = float(np.max(f[feas]))
    best = np.inf
    for i in range(len(f)):
        if feas[i] and f[i] < best:
            best = f[i]
        out[i] = best if np.isfinite(best) else default
    return out


__all__ = [
    "BoundsSpec",
    "Dataset",
    "Filter",
    "RejectionBudgetExceeded",
    "best_feasible",
    "denormalize",
    "feasible_mask",
    "incumbent_index",
    "lhs_sample",
    "normalize",
    "reporting_incumbent",
    "total_violation",
]
