"""Trust-region constrained BO with full, latent (PCA/kPCA) or KS-aggregated
constraint surrogates, plus a random-search baseline."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .acquisition import default_candidate_count, generate_candidates, thompson_indices
from .dataset import (
    REJECTION_BUDGET,
    BoundsSpec,
    Dataset,
    RejectionBudgetExceeded,
    _filter_name,
    denormalize,
    feasible_mask,
    incumbent_index,
    lhs_sample,
    reporting_incumbent,
    total_violation,
)
from .gp import JITTER_MAX, FitOptions, GPTrainingError, fit_batch
from .latent import Truncation, fit_projection, project, reconstruct, write_spectrum
from .problems import Problem, registry
from .trust_region import TrustRegionConfig, TrustRegionState, tr_bounds, tr_update

FULL, PCA, KPCA, KS, RANDOM = "full", "pca", "kpca", "ks", "random"
MODES = (FULL, PCA, KPCA, KS, RANDOM)
REFIT_EVERY, REFIT_FIXED = "every", "fixed"

RUN_COLUMNS = ["eval", "f", "feasible", "incumbent", "violation", "tr_length", "g", "iter_time_s"]

# purpose tags for derived random streams
_DOE, _CAND, _TS, _RAND = 1, 2, 3, 4


class RunFailed(RuntimeError):
    """A run aborted; ``record`` holds everything evaluated up to the failure."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


def ks_aggregate(c, groups, rho: float = 100.0) -> np.ndarray:
    """Kreisselmeier-Steinhauser aggregate of each constraint group.

    Uses the shifted form ``max + log(sum(exp(rho (c - max)))) / rho``, which
    lies between the group maximum and ``max + ln(m)/rho``. ``c`` may be
    (G,) or (n, G); the result is (n_groups,) or (n, n_groups).
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    C2 = np.atleast_2d(c)
    out = np.empty((C2.shape[0], len(groups)))
    for k, idx in enumerate(groups):
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            raise ValueError(f"KS group {k} is empty")
        sub = C2[:, idx]
        mx = sub.max(axis=1)
        out[:, k] = mx + np.log(np.exp(rho * (sub - mx[:, None])).sum(axis=1)) / rho
    return out[0] if single else out


def check_partition(groups, n: int) -> None:
    allidx = np.concatenate([np.asarray(g, dtype=int) for g in groups]) if len(groups) else np.array([], int)
    if allidx.size != n or not np.array_equal(np.sort(allidx), np.arange(n)):
        raise ValueError(f"KS groups do not partition the {n} constraints")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

WARM_REFIT = FitOptions(n_starts=0, max_iter=30)


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for one optimisation run.

    ``fit`` trains every surrogate from scratch (multi-start) after each DoE;
    later iterations warm-start from the previous hyperparameters using
    ``refit`` (set ``refit=None`` to use ``fit`` every iteration).
    """

    mode: str = PCA
    doe_size: int = 20
    batch_size: int = 1
    budget: int = 200
    g: Optional[int] = 4
    ev_tol: Optional[float] = None
    projection_refit: str = REFIT_EVERY
    ks_rho: float = 100.0
    seed: int = 0
    tr: Optional[TrustRegionConfig] = None
    n_candidates: Optional[int] = None
    kpca_width: Optional[float] = None
    kpca_width_scale: float = 1.0
    kpca_center: bool = True
    standardize_constraints: bool = False
    fit: FitOptions = FitOptions()
    refit: Optional[FitOptions] = WARM_REFIT
    local_model: bool = True
    surrogate_time_limit: Optional[float] = None

    def __post_init__(self):
        mode = str(self.mode).lower()
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.doe_size < 2 and mode != RANDOM:
            raise ValueError("doe_size must be >= 2 for model-based modes")
        if self.doe_size < 1:
            raise ValueError("doe_size must be >= 1")
        if self.budget < self.doe_size:
            raise ValueError("budget must be >= doe_size")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.kpca_width_scale > 0:
            raise ValueError("kpca_width_scale must be positive")
        if mode == KS and not self.ks_rho > 0:
            raise ValueError("ks_rho must be positive")
        if self.projection_refit not in (REFIT_EVERY, REFIT_FIXED):
            raise ValueError("projection_refit must be 'every' or 'fixed'")
        if mode in (PCA, KPCA):
            self.truncation()  # validates
        if self.n_candidates is not None and self.n_candidates < self.batch_size:
            raise ValueError("n_candidates must be >= batch_size")

    def truncation(self) -> Truncation:
        if self.ev_tol is not None:
            return Truncation(ev_tol=float(self.ev_tol))
        if self.g is None:
            raise ValueError("latent modes need g or ev_tol")
        return Truncation(count=int(self.g))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        bad = sorted(set(d) - names)
        if bad:
            raise ValueError(f"unknown optimizer settings {bad}")
        if isinstance(d.get("tr"), dict):
            d["tr"] = TrustRegionConfig(**d["tr"])
        for key in ("fit", "refit"):
            if isinstance(d.get(key), dict):
                sub = dict(d[key])
                for b in ("lengthscale_bounds", "signal_variance_bounds"):
                    if b in sub:
                        sub[b] = tuple(sub[b])
                d[key] = FitOptions(**sub)
        return cls(**d)


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    problem: str
    mode: str
    seed: int
    config: dict
    X: np.ndarray  # normalised
    x_units: np.ndarray
    f: np.ndarray
    C: np.ndarray
    tr_length: np.ndarray
    g: np.ndarray
    iter_time: np.ndarray
    iterations: list = field(default_factory=list)
    wall_time: float = 0.0
    restart_count: int = 0
    status: str = "ok"
    error: Optional[str] = None
    spectrum: Optional[np.ndarray] = None

    @property
    def n_evals(self) -> int:
        return int(self.f.size)

    @property
    def feasible(self) -> np.ndarray:
        return feasible_mask(self.C) if self.n_evals else np.zeros(0, bool)

    @property
    def violation(self) -> np.ndarray:
        return total_violation(self.C) if self.n_evals else np.zeros(0)

    @property
    def incumbent(self) -> np.ndarray:
        return reporting_incumbent(self.f, self.C)

    def best(self):
        """``(index, f)`` of the best feasible evaluation or ``None``."""
        feas = self.feasible
        if not feas.any():
            return None
        i = int(np.argmin(np.where(feas, self.f, np.inf)))
        return i, float(self.f[i])

    def first_feasible(self) -> Optional[int]:
        """1-based evaluation count at which the first feasible point appeared."""
        idx = np.flatnonzero(self.feasible)
        return int(idx[0]) + 1 if idx.size else None

    def to_dataset(self) -> Dataset:
        ds = Dataset(self.X.shape[1], self.C.shape[1])
        for x, f, c in zip(self.X, self.f, self.C):
            ds.append(x, f, c)
        return ds

    def to_csv(self, path) -> None:
        inc = self.incumbent
        feas = self.feasible
        viol = self.violation
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUN_COLUMNS)
            for i in range(self.n_evals):
                w.writerow(
                    [
                        i + 1,
                        _fmt(self.f[i]),
                        int(feas[i]),
                        _fmt(inc[i]),
                        _fmt(viol[i]),
                        _fmt(self.tr_length[i]),
                        int(self.g[i]),
                        _fmt(self.iter_time[i]),
                    ]
                )

    def summary(self) -> dict:
        b = self.best()
        return {
            "problem": self.problem,
            "mode": self.mode,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "n_evals": self.n_evals,
            "feasible_found": b is not None,
            "best_f": None if b is None else b[1],
            "best_x": None if b is None else self.x_units[b[0]].tolist(),
            "first_feasible_eval": self.first_feasible(),
            "wall_time_s": self.wall_time,
            "restart_count": self.restart_count,
            "final_g": int(self.g[-1]) if self.n_evals else 0,
            "config": self.config,
            "iterations": self.iterations,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, default=_json_default))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def subseed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _unit_filter(problem: Problem):
    if problem.filter is None:
        return None
    bounds = problem.bounds
    pf = problem.filter

    def unit_filter(U):
        return pf(bounds.lower + np.asarray(U) * (bounds.upper - bounds.lower))

    unit_filter.__name__ = _filter_name(pf)
    return unit_filter


def _uniform_unit(n, dim, rng, filt):
    if filt is None:
        return rng.random((n, dim))
    out, got, drawn = [], 0, 0
    budget = REJECTION_BUDGET * n
    while got < n:
        if drawn >= budget:
            raise RejectionBudgetExceeded(f"filter {_filter_name(filt)!r} accepted {got} of {drawn} draws")
        P = rng.random((max(n, 256), dim))
        drawn += len(P)
        P = P[np.asarray(filt(P), dtype=bool)]
        out.append(P)
        got += len(P)
    return np.concatenate(out)[:n]


def _improved(f_old, C_old, f_new, C_new) -> bool:
    """Whether the new batch yields a new incumbent for the segment."""
    feas_old = feasible_mask(C_old)
    feas_new = feasible_mask(C_new)
    if feas_old.any():
        best = float(np.min(f_old[feas_old]))
        return bool(np.any(f_new[feas_new] < best))
    if feas_new.any():
        return True
    return bool(np.min(total_violation(C_new)) < np.min(total_violation(C_old)))


def _fit_with_retry(X, Y, seed, opts, init, time_limit):
    try:
        return fit_batch(X, Y, seed=seed, options=opts, init=init, time_limit=time_limit)
    except GPTrainingError:
        bumped = replace(opts, jitter=min(opts.jitter * 100.0, JITTER_MAX))
        return fit_batch(X, Y, seed=seed, options=bumped, init=init, time_limit=time_limit)


class _Recorder:
    def __init__(self, problem: Problem, cfg: OptimizerConfig):
        self.problem = problem
        self.cfg = cfg
        self.ds = Dataset(problem.dim, problem.n_constraints)
        self.units: list = []
        self.tr: list = []
        self.g: list = []
        self.times: list = []
        self.iterations: list = []
        self.t0 = time.perf_counter()
        self.spectrum = None
        self.restart_count = 0

    def evaluate(self, U):
        Xu = denormalize(np.clip(U, 0.0, 1.0), self.problem.bounds)
        f, C = self.problem.evaluate_batch(Xu)
        for k in range(len(U)):
            self.ds.append(U[k], f[k], C[k])
            self.units.append(Xu[k])
        return f, C

    def close_iteration(self, n_new, t_start, tr_length, g, info):
        dt = time.perf_counter() - t_start
        share = dt / max(n_new, 1)
        self.tr.extend([tr_length] * n_new)
        self.g.extend([g] * n_new)
        self.times.extend([share] * n_new)
        info = dict(info, n_new=n_new, time_s=dt, n_evals=len(self.ds))
        self.iterations.append(info)

    def record(self, status="ok", error=None) -> RunRecord:
        n = len(self.ds)
        # evaluations from an unfinished iteration get no timing share
        pad = n - len(self.times)
        tr = np.array(self.tr + [np.nan] * pad, dtype=float)
        g = np.array(self.g + [0] * pad, dtype=int)
        tt = np.array(self.times + [0.0] * pad, dtype=float)
        return RunRecord(
            problem=self.problem.name,
            mode=self.cfg.mode,
            seed=self.cfg.seed,
            config=self.cfg.to_dict(),
            X=np.array(self.ds.X),
            x_units=np.array(self.units).reshape(n, self.problem.dim),
            f=np.array(self.ds.f),
            C=np.array(self.ds.C),
            tr_length=tr,
            g=g,
            iter_time=tt,
            iterations=self.iterations,
            wall_time=time.perf_counter() - self.t0,
            restart_count=self.restart_count,
            status=status,
            error=error,
            spectrum=self.spectrum,
        )


def run(problem: Problem, config: OptimizerConfig) -> RunRecord:
    """One optimisation run; raises :class:`RunFailed` carrying the partial record."""
    cfg = config
    rec = _Recorder(problem, cfg)
    try:
        _loop(problem, cfg, rec)
    except Exception as exc:  # noqa: BLE001 - any failure aborts the run with its history
        partial = rec.record(status="failed", error=f"{type(exc).__name__}: {exc}")
        raise RunFailed(f"run aborted after {len(rec.ds)} evaluations: {exc}", partial) from exc
    return rec.record()


def _loop(problem: Problem, cfg: OptimizerConfig, rec: _Recorder) -> None:
    D, G = problem.dim, problem.n_constraints
    unit = BoundsSpec.unit(D)
    ufilt = _unit_filter(problem)
    tr_cfg = cfg.tr or TrustRegionConfig.for_problem(D, cfg.batch_size)
    n_cand = cfg.n_candidates or default_candidate_count(D)
    mode = cfg.mode
    groups = None
    if mode == KS:
        groups = problem.groups()
        check_partition(groups, G)
    latent = mode in (PCA, KPCA)
    proj_kw = {"standardize": cfg.standardize_constraints}
    if mode == KPCA:
        proj_kw.update(kernel_width=cfg.kpca_width, width_scale=cfg.kpca_width_scale, center=cfg.kpca_center)
    trunc = cfg.truncation() if latent else None
    model_tr = np.nan if mode == RANDOM else tr_cfg.length_init

    state = TrustRegionState.initial(tr_cfg)
    ds = rec.ds

    def seed_doe(segment: int):
        t = time.perf_counter()
        n = min(cfg.doe_size, cfg.budget - len(ds))
        U = lhs_sample(unit, n, subseed(cfg.seed, segment, _DOE), ufilt)
        rec.evaluate(U)
        kind = "doe" if segment == 0 else "restart"
        rec.close_iteration(n, t, model_tr, 0, {"iter": len(rec.iterations), "kind": kind,
                                                "restart_count": state.restart_count})

    seed_doe(0)
    seg_start = 0
    proj0 = fit_projection(mode, ds.C, trunc, **proj_kw) if latent and cfg.projection_refit == REFIT_FIXED else None
    warm = None
    lengthscales = None
    it = 0
    while len(ds) < cfg.budget:
        it += 1
        t_iter = time.perf_counter()
        q = min(cfg.batch_size, cfg.budget - len(ds))
        if state.restart_pending:
            state = replace(state, restart_pending=False)
            seg_start = len(ds)
            seed_doe(state.restart_count)
            warm, lengthscales = None, None
            continue
        if mode == RANDOM:
            U = _uniform_unit(q, D, np.random.default_rng([cfg.seed, it, _RAND]), ufilt)
            rec.evaluate(U)
            rec.close_iteration(q, t_iter, np.nan, 0, {"iter": len(rec.iterations), "kind": "random"})
            continue

        Xs, fs, Cs = ds.X[seg_start:], ds.f[seg_start:], ds.C[seg_start:]
        inc = incumbent_index(fs, Cs)
        center = Xs[inc]
        lo, hi = tr_bounds(state, center, np.ones(D) if lengthscales is None else lengthscales)
        inside = np.all((Xs >= lo) & (Xs <= hi), axis=1)
        if not cfg.local_model or np.count_nonzero(inside) < D + 2:
            inside[:] = True
        Xt, ft, Ct = Xs[inside], fs[inside], Cs[inside]

        conv = None
        if latent:
            if proj0 is not None:
                proj = proj0
            else:
                proj = fit_projection(mode, ds.C, trunc, **proj_kw)
            rec.spectrum = proj.spectrum
            Yc = project(proj, Ct)
            conv = lambda Z, _p=proj: reconstruct(_p, Z)  # noqa: E731
            n_con = proj.g
        elif mode == FULL:
            Yc = Ct
            n_con = G
        else:
            Yc = ks_aggregate(Ct, groups, cfg.ks_rho)
            n_con = len(groups)
        Y = np.column_stack([ft, Yc])

        t_fit = time.perf_counter()
        if warm is None or cfg.refit is None:
            models = _fit_with_retry(Xt, Y, cfg.seed, cfg.fit, None, cfg.surrogate_time_limit)
        else:
            init = [warm[j] if j < len(warm) else None for j in range(Y.shape[1])]
            models = _fit_with_retry(Xt, Y, cfg.seed, cfg.refit, init, cfg.surrogate_time_limit)
        fit_time = time.perf_counter() - t_fit
        warm = [m.hyper for m in models]
        lengthscales = models[0].hyper.lengthscales

        t_acq = time.perf_counter()
        lo, hi = tr_bounds(state, center, lengthscales)
        cands = generate_candidates(lo, hi, center, n_cand, [cfg.seed, it, _CAND], ufilt)
        idx = thompson_indices(models[0], models[1:], cands, q, subseed(cfg.seed, it, _TS), conv)
        U = cands.points[idx]
        acq_time = time.perf_counter() - t_acq

        f_new, C_new = rec.evaluate(U)
        improved = _improved(fs, Cs, f_new, C_new)
        length_used = state.length
        center_idx = seg_start + incumbent_index(ds.f[seg_start:], ds.C[seg_start:])
        state = tr_update(state, improved, center_idx)
        rec.restart_count = state.restart_count
        rec.close_iteration(
            q,
            t_iter,
            length_used,
            n_con,
            {
                "iter": len(rec.iterations),
                "kind": "model",
                "n_train": int(len(Xt)),
                "n_surrogates": int(len(models)),
                "fit_time_s": fit_time,
                "acq_time_s": acq_time,
                "improved": improved,
                "restart_count": state.restart_count,
            },
        )
    return state


# ---------------------------------------------------------------------------
# repeats and aggregation
# ---------------------------------------------------------------------------


def repeat_seed(seed: int, index: int) -> int:
    return subseed(seed, index)


def aggregate(records: Sequence[RunRecord]) -> dict:
    """Mean and (population) std of the reporting incumbent per evaluation.

    Only completed runs count. Within a run, evaluations before its first
    feasible point take that run's largest feasible objective; runs that
    never became feasible take the largest feasible objective of any run.
    """
    done = [r for r in records if r.status == "ok"]
    out = {"n_runs": len(records), "n_completed": len(done), "n_feasible": 0}
    if not done:
        out.update(eval=np.zeros(0, int), mean=np.zeros(0), std=np.zeros(0))
        return out
    n = max(r.n_evals for r in done)
    curves = []
    worst = -np.inf
    for r in done:
        c = r.incumbent
        if r.feasible.any():
            worst = max(worst, float(np.max(r.f[r.feasible])))
        if c.size < n:
            c = np.concatenate([c, np.full(n - c.size, c[-1] if c.size else np.nan)])
        curves.append(c)
    A = np.array(curves)
    out["n_feasible"] = int(sum(r.feasible.any() for r in done))
    if np.isfinite(worst):
        A = np.where(np.isnan(A), worst, A)
    out.update(eval=np.arange(1, n + 1), mean=A.mean(axis=0), std=A.std(axis=0))
    return out


def write_aggregate(agg: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval", "mean_incumbent", "std_incumbent"])
        for e, m, s in zip(agg["eval"], agg["mean"], agg["std"]):
            w.writerow([int(e), _fmt(m), _fmt(s)])


def _run_safely(problem: Problem, cfg: OptimizerConfig) -> RunRecord:
    try:
        return run(problem, cfg)
    except RunFailed as exc:
        return exc.record


def _worker(args):
    name, overrides, cfg_dict = args
    return _run_safely(registry(name, overrides), OptimizerConfig.from_dict(cfg_dict))


def run_repeats(
    problem: Problem | str,
    config: OptimizerConfig,
    repeats: int,
    workers: int = 1,
    overrides: Optional[dict] = None,
    out_dir=None,
    save_data: bool = False,
):
    """Independent runs with seeds derived from ``(config.seed, repeat)``.

    Failed runs are kept (status ``failed``) and excluded from the aggregate.
    With ``workers > 1`` the problem is rebuilt by name in each worker
    process, so it must come from the registry. With ``out_dir`` the per-run
    CSV/JSON files, spectra and the aggregate are written there.
    Returns ``(records, aggregate)``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfgs = [replace(config, seed=repeat_seed(config.seed, i)) for i in range(repeats)]
    if isinstance(problem, str):
        name = problem
        prob = registry(name, overrides) if workers <= 1 else None
    else:
        name = problem.name
        prob = problem
        overrides = problem.info.get("overrides", overrides)
    if workers <= 1:
        records = [_run_safely(prob, c) for c in cfgs]
    else:
        jobs = [(name, overrides, c.to_dict()) for c in cfgs]
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            records = list(pool.map(_worker, jobs))
    agg = aggregate(records)
    if out_dir is not None:
        write_outputs(records, agg, out_dir, save_data=save_data)
    return records, agg


def write_outputs(records, agg, out_dir, save_data: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(records):
        stem = out / f"run_{i:03d}"
        r.to_csv(f"{stem}.csv")
        r.to_json(f"{stem}.json")
        if r.spectrum is not None:
            write_spectrum(r.spectrum, f"{stem}_spectrum.csv")
        if save_data:
            r.to_dataset().to_csv(f"{stem}_data.csv")
    write_aggregate(agg, out / "aggregate.csv")
    meta = {k: agg[k] for k in ("n_runs", "n_completed", "n_feasible")}
    meta["failed"] = [i for i, r in enumerate(records) if r.status != "ok"]
    (out / "aggregate.json").write_text(json.dumps(meta, indent=2))


__all__ = [
    "FULL",
    "KPCA",
    "KS",
    "MODES",
    "OptimizerConfig",
    "PCA",
    "RANDOM",
    "REFIT_EVERY",
    "REFIT_FIXED",
    "RUN_COLUMNS",
    "RunFailed",
    "RunRecord",
    "aggregate",
    "check_partition",
    "ks_aggregate",
    "repeat_seed",
    "run",
    "run_repeats",
    "subseed",
    "write_aggregate",
    "write_outputs",
]
