"""Benchmark problems: speed reducer, a synthetic many-constraint problem and toys.

Every problem evaluates batches ``(n, D) -> (f (n,), C (n, G))`` in problem
units with the convention ``c_j <= 0`` feasible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import BoundsSpec, Filter, lhs_sample


@dataclass(frozen=True)
class Problem:
    name: str
    bounds: BoundsSpec
    n_constraints: int
    evaluator: Callable[[np.ndarray], tuple]
    filter: Optional[Filter] = None
    known_optimum: Optional[float] = None
    # Constraint index groups for KS aggregation (default: one group).
    ks_groups: Optional[tuple] = None
    anchor: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.bounds.dim

    def evaluate_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"{self.name}: expected {self.dim} variables, got {X.shape[1]}")
        f, C = self.evaluator(X)
        return np.asarray(f, dtype=float).reshape(-1), np.asarray(C, dtype=float).reshape(len(X), -1)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("evaluate takes a single design vector")
        f, C = self.evaluate_batch(x[None, :])
        return float(f[0]), C[0]

    def groups(self) -> tuple:
        if self.ks_groups is not None:
            return self.ks_groups
        return (np.arange(self.n_constraints),)


# ---------------------------------------------------------------------------
# speed reducer
# ---------------------------------------------------------------------------

SPEED_REDUCER_OPTIMUM = 2996.3482
SPEED_REDUCER_BOUNDS = BoundsSpec(
    np.array([2.6, 0.7, 17.0, 7.3, 7.8, 2.9, 5.0]),
    np.array([3.6, 0.8, 28.0, 8.3, 8.3, 3.9, 5.5]),
)
# Best design reported in the gear-train literature (continuous tooth count).
SPEED_REDUCER_XSTAR = np.array([3.5, 0.7, 17.0, 7.3, 7.8, 3.350215, 5.286683])


def speed_reducer(x):
    """Weight of a gear box and its 11 design constraints (``c <= 0``).

    Variables: face width, tooth module, pinion teeth, two shaft lengths
    between bearings and two shaft diameters. Accepts (7,) or (n, 7).
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != 7:
        raise ValueError(f"speed reducer has 7 variables, got {X.shape[1]}")
    x1, x2, x3, x4, x5, x6, x7 = X.T
    f = (
        0.7854 * x1 * x2**2 * (3.3333 * x3**2 + 14.9334 * x3 - 43.0934)
        - 1.508 * x1 * (x6**2 + x7**2)
        + 7.4777 * (x6**3 + x7**3)
        + 0.7854 * (x4 * x6**2 + x5 * x7**2)
    )
    C = np.column_stack(
        [
            27.0 / (x1 * x2**2 * x3) - 1.0,
            397.5 / (x1 * x2**2 * x3**2) - 1.0,
            1.93 * x4**3 / (x2 * x3 * x6**4) - 1.0,
            1.93 * x5**3 / (x2 * x3 * x7**4) - 1.0,
            np.sqrt((745.0 * x4 / (x2 * x3)) ** 2 + 16.9e6) / (110.0 * x6**3) - 1.0,
            np.sqrt((745.0 * x5 / (x2 * x3)) ** 2 + 157.5e6) / (85.0 * x7**3) - 1.0,
            x2 * x3 / 40.0 - 1.0,
            5.0 * x2 / x1 - 1.0,
            x1 / (12.0 * x2) - 1.0,
            (1.5 * x6 + 1.9) / x4 - 1.0,
            (1.1 * x7 + 1.9) / x5 - 1.0,
        ]
    )
    if single:
        return float(f[0]), C[0]
    return f, C


def make_speed_reducer() -> Problem:
    return Problem(
        name="speed_reducer",
        bounds=SPEED_REDUCER_BOUNDS,
        n_constraints=11,
        evaluator=speed_reducer,
        known_optimum=SPEED_REDUCER_OPTIMUM,
    )


# ---------------------------------------------------------------------------
# toy problems
# ---------------------------------------------------------------------------


def _toy_linear(X):
    return X[:, 0] + X[:, 1], -X


def make_toy_linear() -> Problem:
    """min x1 + x2 s.t. -x1 <= 0, -x2 <= 0 on [-1, 1]^2; optimum 0 at the origin."""
    return Problem(
        name="toy_linear",
        bounds=BoundsSpec(np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
        n_constraints=2,
        evaluator=_toy_linear,
        known_optimum=0.0,
    )


# ---------------------------------------------------------------------------
# synthetic tailoring
# ---------------------------------------------------------------------------

LAM_PER_PANEL = 8
T_BOUNDS = (0.002, 0.03)
DENSITY = 1600.0


@dataclass(frozen=True)
class SyntheticTailoringConfig:
    """Panel-structured stand-in for a wing-tailoring study.

    Each panel owns ``LAM_PER_PANEL`` pseudo-lamination coordinates in
    [-1, 1] and one thickness in [0.002, 0.03], so ``D`` must be a multiple
    of ``LAM_PER_PANEL + 1``. Constraint rows come in ``n_loadcases`` equal
    blocks, each split into discipline blocks by ``block_fractions``.
    """

    D: int = 108
    G: int = 1786
    rank: int = 30
    n_loadcases: int = 2
    block_fractions: tuple = (0.48, 0.48, 0.04)
    block_names: tuple = ("strain", "buckling", "aeroelastic")
    feasible_fraction: float = 5e-5
    lamination_radius2: float = 4.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_fractions", tuple(float(v) for v in self.block_fractions))
        object.__setattr__(self, "block_names", tuple(str(v) for v in self.block_names))
        per = LAM_PER_PANEL + 1
        if self.D < per or self.D % per:
            raise ValueError(f"D must be a positive multiple of {per}")
        if self.n_loadcases < 1 or self.G % self.n_loadcases:
            raise ValueError("G must be divisible by n_loadcases")
        if not (1 <= self.rank <= self.G):
            raise ValueError("need 1 <= rank <= G")
        if self.rank < self.n_panels:
            raise ValueError("rank must be at least the number of panels")
        if len(self.block_fractions) != len(self.block_names) or min(self.block_fractions) <= 0:
            raise ValueError("block_fractions must be positive, one per block name")
        if not (0.0 < self.feasible_fraction < 1.0):
            raise ValueError("feasible_fraction must lie in (0, 1)")

    @property
    def n_panels(self) -> int:
        return self.D // (LAM_PER_PANEL + 1)

    @property
    def per_loadcase(self) -> int:
        return self.G // self.n_loadcases


def _panel_layout(n_panels):
    per = LAM_PER_PANEL + 1
    lam = np.array([[p * per + i for i in range(LAM_PER_PANEL)] for p in range(n_panels)])
    thick = np.array([p * per + LAM_PER_PANEL for p in range(n_panels)])
    return lam, thick


def _bounds(cfg: SyntheticTailoringConfig) -> BoundsSpec:
    lam, thick = _panel_layout(cfg.n_panels)
    lo = np.full(cfg.D, -1.0)
    hi = np.full(cfg.D, 1.0)
    lo[thick], hi[thick] = T_BOUNDS
    return BoundsSpec(lo, hi)


class _SmoothMap:
    """h: R^D -> R^r, inverse thicknesses followed by random smooth terms."""

    def __init__(self, cfg: SyntheticTailoringConfig, rng):
        self.lam_idx, self.thick_idx = _panel_layout(cfg.n_panels)
        self.bounds = _bounds(cfg)
        n_rand = cfg.rank - cfg.n_panels
        size = min(8, cfg.D)
        self.subsets = np.array([rng.choice(cfg.D, size=size, replace=False) for _ in range(n_rand)]).reshape(
            n_rand, size
        )
        omega = rng.uniform(-1.0, 1.0, (n_rand, size))
        # at most one full period across the unit box along any path
        self.omega = omega / np.abs(omega).sum(axis=1, keepdims=True)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, n_rand)
        self.amp = rng.uniform(0.5, 1.0, n_rand)
        self.qw = rng.uniform(0.0, 1.0, (n_rand, size))
        self.qc = rng.uniform(0.0, 1.0, (n_rand, size))

    def __call__(self, X):
        u = (X - self.bounds.lower) / (self.bounds.upper - self.bounds.lower)
        inv_t = T_BOUNDS[0] / X[:, self.thick_idx]
        if len(self.subsets) == 0:
            return inv_t
        U = u[:, self.subsets]  # (n, k, s)
        s = self.amp * np.sin(2.0 * np.pi * np.einsum("nks,ks->nk", U, self.omega) + self.phase)
        qd = np.einsum("nks,ks->nk", (U - self.qc) ** 2, self.qw) / U.shape[2]
        return np.column_stack([inv_t, s + qd])


def _lamination_filter(cfg: SyntheticTailoringConfig):
    lam_idx, _ = _panel_layout(cfg.n_panels)
    r2 = cfg.lamination_radius2

    def lamination_feasible(X):
        X = np.atleast_2d(X)
        return np.all(np.sum(X[:, lam_idx] ** 2, axis=2) <= r2, axis=1)

    return lamination_feasible


def _uniform_filtered(bounds, n, rng, filt):
    out, got = [], 0
    while got < n:
        P = bounds.lower + rng.random((max(n, 1024), bounds.dim)) * (bounds.upper - bounds.lower)
        P = P[filt(P)]
        out.append(P)
        got += len(P)
    return np.concatenate(out)[:n]


@lru_cache(maxsize=8)
def _build(cfg: SyntheticTailoringConfig):
    ss = np.random.SeedSequence([cfg.seed, 0x7A11])
    s_map, s_mix, s_lc, s_cal, s_obj = ss.spawn(5)
    rng = np.random.default_rng(s_map)
    h = _SmoothMap(cfg, rng)
    bounds = h.bounds
    filt = _lamination_filter(cfg)
    P, r = cfg.n_panels, cfg.rank
    Gl = cfg.per_loadcase

    # discipline blocks inside one loadcase
    sizes = [int(math.floor(fr / sum(cfg.block_fractions) * Gl)) for fr in cfg.block_fractions]
    sizes[-1] = Gl - sum(sizes[:-1])
    if min(sizes) < 1:
        raise ValueError("G too small for the requested discipline blocks")

    rng = np.random.default_rng(s_mix)
    B = np.zeros((Gl, r))
    primary = np.arange(Gl) % P
    B[np.arange(Gl), primary] = rng.uniform(0.6, 1.4, Gl)
    B[:, :P] += rng.uniform(0.0, 0.15, (Gl, P))
    B[:, P:] = rng.normal(0.0, 0.3, (Gl, r - P))

    rng = np.random.default_rng(s_lc)
    mixes = [B]
    for _ in range(1, cfg.n_loadcases):
        T = np.eye(r) + 0.05 * rng.standard_normal((r, r)) / math.sqrt(r)
        mixes.append(B @ T)
    M = np.vstack(mixes)  # (G, r), column space of B for every loadcase
    bias_jitter = np.concatenate(
        [np.zeros(Gl)] + [rng.uniform(0.0, 0.05, Gl) for _ in range(1, cfg.n_loadcases)]
    )

    anchor = np.zeros(cfg.D)
    anchor[h.thick_idx] = T_BOUNDS[1]
    h0 = h(anchor[None, :])[0]

    # calibrate row scales and the margin on uniform lamination-feasible draws
    rng = np.random.default_rng(s_cal)
    n_cal = int(math.ceil(5.0 / cfg.feasible_fraction))
    chunk = 5000
    first = _uniform_filtered(bounds, min(chunk, n_cal), rng, filt)
    Dh = h(first) - h0
    scale = (Dh @ M.T).std(axis=0)
    scale[scale <= 0] = 1.0
    Mn = M / scale[:, None]
    stats = [np.max(Dh @ Mn.T + bias_jitter, axis=1)]
    done = len(first)
    while done < n_cal:
        Xc = _uniform_filtered(bounds, min(chunk, n_cal - done), rng, filt)
        stats.append(np.max((h(Xc) - h0) @ Mn.T + bias_jitter, axis=1))
        done += len(Xc)
    worst = np.concatenate(stats)
    delta = float(np.quantile(worst, cfg.feasible_fraction))
    if delta < float(np.max(bias_jitter)) + 1e-9:
        raise ValueError(
            f"calibration failed: margin {delta:.3g} would leave the anchor design infeasible"
        )
    bias = -(Mn @ h0) + bias_jitter - delta

    rng = np.random.default_rng(s_obj)
    areas = rng.uniform(0.5, 2.0, P)

    groups, names = [], []
    for lc in range(cfg.n_loadcases):
        start = lc * Gl
        for name, size in zip(cfg.block_names, sizes):
            groups.append(np.arange(start, start + size))
            names.append(f"{name}_lc{lc + 1}")
            start += size

    def evaluator(X):
        lam = X[:, h.lam_idx]
        f = DENSITY * (X[:, h.thick_idx] @ areas) + 2.0 * np.mean(lam**2, axis=(1, 2))
        C = h(X) @ Mn.T + bias
        return f, C

    info = {
        "config": asdict(cfg),
        "margin": delta,
        "panel_areas": areas.tolist(),
        "ks_group_names": names,
        "block_sizes": sizes,
    }
    return bounds, evaluator, filt, tuple(groups), anchor, info


def make_synthetic_tailoring(cfg: Optional[SyntheticTailoringConfig] = None) -> Problem:
    """Build the synthetic problem: ``c(x) = M h(x) + b`` with ``h`` of size ``rank``.

    The objective is a panel-area-weighted thickness sum (a mass) plus a
    small convex penalty on the lamination coordinates. The margin in ``b``
    is set so that roughly ``feasible_fraction`` of uniform
    lamination-feasible designs satisfy every constraint, while the
    maximum-thickness design with zero lamination coordinates stays feasible.
    """
    cfg = cfg or SyntheticTailoringConfig()
    bounds, evaluator, filt, groups, anchor, info = _build(cfg)
    prob = Problem(
        name="synthetic_tailoring",
        bounds=bounds,
        n_constraints=cfg.G,
        evaluator=evaluator,
        filter=filt,
        ks_groups=groups,
        anchor=anchor.copy(),
        info=dict(info),
    )
    _, c = prob.evaluate(anchor)
    if np.any(c > 0):
        raise ValueError("calibration failed: anchor design is infeasible")
    return prob


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def _no_overrides(factory):
    def build(overrides):
        if overrides:
            raise ValueError(f"problem takes no overrides, got {sorted(overrides)}")
        return factory()

    return build


def _synthetic_from(overrides):
    names = {f.name for f in fields(SyntheticTailoringConfig)}
    bad = sorted(set(overrides) - names)
    if bad:
        raise ValueError(f"unknown synthetic_tailoring overrides {bad}; valid: {sorted(names)}")
    return make_synthetic_tailoring(SyntheticTailoringConfig(**overrides))


REGISTRY = {
    "speed_reducer": _no_overrides(make_speed_reducer),
    "synthetic_tailoring": _synthetic_from,
    "toy_linear": _no_overrides(make_toy_linear),
}


def available() -> list:
    return sorted(REGISTRY)


def registry(name: str, overrides: Optional[dict] = None) -> Problem:
    try:
        build = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; available: {', '.join(available())}") from None
    prob = build(dict(overrides or {}))
    # lets worker processes rebuild the same problem
    prob.info["overrides"] = dict(overrides or {})
    return prob


def dump(problem: Problem, outdir, n_samples: int = 416, seed: int = 0) -> dict:
    """Write the anchor design and the constraint spectrum of an LHS sample.

    Returns the paths written. The spectrum is the PCA eigenvalue list of
    ``n_samples`` filter-passing LHS rows.
    """
    from .latent import pca_fit, write_spectrum

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    X = lhs_sample(problem.bounds, n_samples, seed, problem.filter)
    _, C = problem.evaluate_batch(X)
    proj = pca_fit(C, min(n_samples, problem.n_constraints))
    paths["spectrum"] = out / f"{problem.name}_spectrum.csv"
    write_spectrum(proj, paths["spectrum"])
    if problem.anchor is not None:
        f, c = problem.evaluate(problem.anchor)
        paths["anchor"] = out / f"{problem.name}_anchor.csv"
        with open(paths["anchor"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "value"])
            for i, v in enumerate(problem.anchor, start=1):
                w.writerow([f"x_{i}", format(float(v), ".17g")])
        paths["info"] = out / f"{problem.name}_info.json"
        meta = dict(problem.info, anchor_objective=f, anchor_max_constraint=float(np.max(c)))
        paths["info"].write_text(json.dumps(meta, indent=2, default=float))
    return {k: str(v) for k, v in paths.items()}


__all__ = [
    "Problem",
    "REGISTRY",
    "SPEED_REDUCER_BOUNDS",
    "SPEED_REDUCER_OPTIMUM",
    "SPEED_REDUCER_XSTAR",
    "SyntheticTailoringConfig",
    "available",
    "dump",
    "make_speed_reducer",
    "make_synthetic_tailoring",
    "make_toy_linear",
    "registry",
    "speed_reducer",
]
