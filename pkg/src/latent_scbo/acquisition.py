"""Trust-region candidate generation and constrained Thompson sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .dataset import REJECTION_BUDGET, RejectionBudgetExceeded, _filter_name
from .gp import GPModel, posterior_factor
from .latent import LatentProjection, reconstruct


def default_candidate_count(dim: int) -> int:
    return min(5000, max(2000, 200 * dim))


@dataclass(frozen=True)
class CandidateSet:
    points: np.ndarray  # (N_c, D) in [0, 1]^D
    lower: np.ndarray
    upper: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


def _perturbed(lower, upper, center, n, rng):
    D = center.size
    m = max(0, math.ceil(math.log2(max(n, 1))))
    sob = qmc.Sobol(d=D, scramble=True, seed=rng).random_base2(m)[:n]
    pert = lower + (upper - lower) * sob
    prob = min(1.0, 20.0 / D)
    mask = rng.random((n, D)) <= prob
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        mask[empty, rng.integers(0, D, size=empty.size)] = True
    return np.where(mask, pert, center[None, :])


def generate_candidates(
    lower,
    upper,
    center,
    n_candidates: int,
    seed,
    filter: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> CandidateSet:
    """Scrambled-Sobol candidates inside ``[lower, upper]``.

    Each coordinate is taken from the Sobol point with probability
    ``min(1, 20/D)`` and left at the centre value otherwise; at least one
    coordinate always moves. Filter-violating rows are replaced from fresh
    draws, with a budget of 10^6 proposals per missing row.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    center = np.asarray(center, dtype=float)
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if np.any(lower > center) or np.any(center > upper):
        raise ValueError("center must lie inside the trust-region bounds")
    rng = np.random.default_rng(seed)
    X = _perturbed(lower, upper, center, n_candidates, rng)
    if filter is not None:
        ok = np.asarray(filter(X), dtype=bool)
        missing = int(np.count_nonzero(~ok))
        if missing:
            budget = REJECTION_BUDGET * missing
            drawn, got = 0, []
            n_got = 0
            batch = max(n_candidates, 256)
            while n_got < missing:
                if drawn >= budget:
                    raise RejectionBudgetExceeded(
                        f"filter {_filter_name(filter)!r} accepted {n_got} of {drawn} "
                        f"trust-region candidates; needed {missing}"
                    )
                prop = _perturbed(lower, upper, center, batch, rng)
                drawn += batch
                keep = prop[np.asarray(filter(prop), dtype=bool)]
                got.append(keep)
                n_got += len(keep)
            X[~ok] = np.concatenate(got)[:missing]
    return CandidateSet(points=X, lower=lower, upper=upper)


def _joint_draws(model: GPModel, points, q: int, seed, stream: int) -> np.ndarray:
    """(q, N_c) joint posterior draws, in the model's output units."""
    mean, L = posterior_factor(model, points)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), stream]))
    Z = rng.standard_normal((mean.shape[0], q))
    S = mean[:, None] + L @ Z
    return (S * model.y_std + model.y_mean).T


def _select(f_draws, constraint_slot, q):
    """Sequential slot selection shared by the latent and full-space paths."""
    n = f_draws.shape[1]
    taken = np.zeros(n, bool)
    chosen = []
    for s in range(q):
        C = constraint_slot(s)
        viol = np.clip(C, 0.0, None).sum(axis=1)
        feas = (viol == 0.0) & ~taken
        if feas.any():
            score = np.where(feas, f_draws[s], np.inf)
        else:
            score = np.where(taken, np.inf, viol)
        idx = int(np.argmin(score))
        taken[idx] = True
        chosen.append(idx)
    return np.array(chosen, dtype=int)


def thompson_indices(
    obj_model: GPModel,
    models: Sequence[GPModel],
    cands: CandidateSet,
    q: int,
    seed,
    to_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Indices of the ``q`` selected candidates.

    One joint realisation per model is drawn for each slot (objective on
    stream 0, constraint model j on stream j+1). ``to_constraints`` maps the
    (N_c, m) matrix of sampled model outputs for a slot to (N_c, G)
    constraint values; it defaults to the identity.
    """
    X = cands.points
    if q < 1:
        raise ValueError("q must be >= 1")
    if q > X.shape[0]:
        raise ValueError(f"batch size q={q} exceeds the {X.shape[0]} candidates")
    f_draws = _joint_draws(obj_model, X, q, seed, 0)
    if len(models):
        draws = np.stack([_joint_draws(m, X, q, seed, j + 1) for j, m in enumerate(models)], axis=2)
    else:
        draws = np.zeros((q, X.shape[0], 0))
    conv = to_constraints or (lambda S: S)
    return _select(f_draws, lambda s: conv(draws[s]), q)


def constrained_thompson_select(
    obj_model: GPModel,
    latent_models: Sequence[GPModel],
    proj: LatentProjection,
    cands: CandidateSet,
    q: int,
    seed,
) -> np.ndarray:
    """Batch of ``q`` points chosen by constrained Thompson sampling on latent GPs.

    Sampled latent vectors are mapped back to the full constraint space
    (PCA reconstruction or kPCA pre-image) and feasibility is judged there:
    the lowest sampled objective among sampled-feasible candidates wins,
    otherwise the lowest sampled total violation.
    """
    if len(latent_models) != proj.g:
        raise ValueError(f"{len(latent_models)} latent models for a projection with g={proj.g}")
    idx = thompson_indices(obj_model, latent_models, cands, q, seed, lambda Z: reconstruct(proj, Z))
    return cands.points[idx]


def acquisition_full_space(
    obj_model: GPModel,
    constraint_models: Sequence[GPModel],
    cands: CandidateSet,
    q: int,
    seed,
) -> np.ndarray:
    """Constrained Thompson sampling with one GP per constraint."""
    idx = thompson_indices(obj_model, constraint_models, cands, q, seed)
    return cands.points[idx]


__all__ = [
    "CandidateSet",
    "acquisition_full_space",
    "constrained_thompson_select",
    "default_candidate_count",
    "generate_candidates",
    "thompson_indices",
]
