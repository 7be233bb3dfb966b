"""Command-line front end: run method x repeat matrices and summarise them.

Output layout (``--out DIR``)::

    DIR/experiment.json          resolved settings
    DIR/<method>/run_000.csv     per-evaluation history
    DIR/<method>/run_000.json    run summary
    DIR/<method>/run_000_spectrum.csv   (projection modes)
    DIR/<method>/aggregate.csv   mean/std incumbent per evaluation
    DIR/summary.csv              one row per method
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import optimizer as opt
from .problems import available, dump, registry

log = logging.getLogger("latent_scbo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# Per-problem defaults; flags and --config values override them.
PRESETS = {
    "speed_reducer": dict(g=4, doe_size=20, batch_size=1, budget=200, projection_refit="fixed", kpca_width_scale=4.0),
    "synthetic_tailoring": dict(g=35, doe_size=108, batch_size=10, budget=600, projection_refit="every"),
    "toy_linear": dict(g=2, doe_size=6, batch_size=1, budget=30, projection_refit="every"),
}

# flag dest -> OptimizerConfig field
_FLAG_FIELDS = {
    "g": "g",
    "ev_tol": "ev_tol",
    "doe": "doe_size",
    "batch": "batch_size",
    "budget": "budget",
    "seed": "seed",
    "refit_projection": "projection_refit",
    "ks_rho": "ks_rho",
    "candidates": "n_candidates",
}

SUMMARY_COLUMNS = [
    "method",
    "runs",
    "successful_runs",
    "mean_best",
    "gap_pct",
    "mean_time_s",
    "time_saving_pct",
]


class ConfigError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="latent-scbo",
        description="Trust-region constrained BO with latent constraint surrogates.",
    )
    p.add_argument("--problem", help="problem name (see --list-problems)")
    p.add_argument("--method", help="comma list of full,pca,kpca,ks,random")
    p.add_argument("--g", type=int, help="latent components for pca/kpca")
    p.add_argument("--ev-tol", type=float, help="keep eigenvalues above this fraction of the largest")
    p.add_argument("--doe", type=int, help="initial LHS size")
    p.add_argument("--batch", type=int, help="points per iteration")
    p.add_argument("--budget", type=int, help="total evaluations per run")
    p.add_argument("--repeats", type=int, help="independent runs per method")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--refit-projection", choices=["every", "fixed"])
    p.add_argument("--ks-rho", type=float)
    p.add_argument("--candidates", type=int, help="candidates per iteration")
    p.add_argument("--overrides", help="JSON object of problem overrides")
    p.add_argument("--config", help="JSON file with experiment/optimizer settings (flags win)")
    p.add_argument("--workers", type=int, help="parallel repeat workers (default: logical cores)")
    p.add_argument("--save-data", action="store_true", help="also write each run's raw evaluations")
    p.add_argument("--list-problems", action="store_true")
    p.add_argument("--dump-problem", metavar="DIR", help="write the problem's spectrum/anchor and exit")
    p.add_argument("--summarize", metavar="DIR", help="(re)build DIR/summary.csv from run files and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_json_arg(text, what):
    try:
        val = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(val, dict):
        raise ConfigError(f"{what} must be a JSON object")
    return val


def resolve(args) -> dict:
    """Merge presets, the JSON config file and flags into an experiment spec."""
    file_cfg = {}
    if args.config:
        try:
            file_cfg = _load_json_arg(Path(args.config).read_text(), f"config file {args.config}")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    exp_keys = {"problem", "methods", "method", "repeats", "out", "overrides", "workers", "save_data"}
    opt_file = {k: v for k, v in file_cfg.items() if k not in exp_keys}

    problem = args.problem or file_cfg.get("problem")
    if not problem:
        raise ConfigError("--problem is required")
    methods = args.method or file_cfg.get("methods") or file_cfg.get("method")
    if not methods:
        raise ConfigError("--method is required")
    if isinstance(methods, str):
        methods = [m.strip().lower() for m in methods.split(",") if m.strip()]
    methods = [m.lower() for m in methods]
    for m in methods:
        if m not in opt.MODES:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(opt.MODES)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods must not repeat")

    overrides = file_cfg.get("overrides") or {}
    if args.overrides:
        overrides = _load_json_arg(args.overrides, "--overrides")

    settings = dict(PRESETS.get(problem, {}))
    settings.update(opt_file)
    for dest, fld in _FLAG_FIELDS.items():
        v = getattr(args, dest)
        if v is not None:
            settings[fld] = v
    if args.ev_tol is not None and args.g is None:
        settings["g"] = None
    repeats = args.repeats if args.repeats is not None else int(file_cfg.get("repeats", 1))
    if repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    workers = args.workers if args.workers is not None else file_cfg.get("workers") or os.cpu_count() or 1
    out = args.out or file_cfg.get("out")
    if not out:
        raise ConfigError("--out is required")

    configs = {}
    for m in methods:
        try:
            configs[m] = opt.OptimizerConfig.from_dict(dict(settings, mode=m))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid settings for {m}: {exc}") from exc
    return {
        "problem": problem,
        "overrides": overrides,
        "methods": methods,
        "repeats": repeats,
        "workers": int(workers),
        "out": out,
        "save_data": bool(args.save_data or file_cfg.get("save_data", False)),
        "configs": configs,
    }


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------


def _read_run_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no evaluations")
    return rows


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def summarize(out_dir) -> Path:
    """Rebuild ``summary.csv`` from the per-run CSVs under ``out_dir``.

    A run is successful when its final incumbent is finite (it found a
    feasible point). ``mean_best`` averages the final incumbent over
    successful runs; wall time is the sum of a run's ``iter_time_s``.
    """
    out = Path(out_dir)
    meta_path = out / "experiment.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    missing = []
    for m in meta["methods"]:
        for i in range(meta["repeats"]):
            p = out / m / f"run_{i:03d}.csv"
            if not p.exists():
                missing.append(str(p))
    if missing:
        raise FileNotFoundError("missing run files: " + ", ".join(missing))

    f_star = meta.get("known_optimum")
    rows = {}
    for m in meta["methods"]:
        finals, times = [], []
        for i in range(meta["repeats"]):
            data = _read_run_csv(out / m / f"run_{i:03d}.csv")
            finals.append(float(data[-1]["incumbent"]))
            times.append(math.fsum(float(r["iter_time_s"]) for r in data))
        finals = np.array(finals)
        ok = np.isfinite(finals)
        mean_best = float(np.mean(finals[ok])) if ok.any() else float("nan")
        gap = float("nan")
        if f_star is not None and ok.any() and f_star != 0:
            gap = (mean_best - f_star) / abs(f_star) * 100.0
        rows[m] = {
            "method": m,
            "runs": len(finals),
            "successful_runs": int(ok.sum()),
            "mean_best": mean_best,
            "gap_pct": gap,
            "mean_time_s": float(np.mean(times)),
        }
    t_full = rows[opt.FULL]["mean_time_s"] if opt.FULL in rows else None
    for m, r in rows.items():
        r["time_saving_pct"] = (
            (t_full - r["mean_time_s"]) / t_full * 100.0 if t_full and m != opt.FULL else float("nan")
        )
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for m in meta["methods"]:
            w.writerow([_fmt(rows[m][c]) if c != "method" else m for c in SUMMARY_COLUMNS])
    return path


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def run_experiment(spec: dict) -> int:
    problem = spec.get("problem_obj") or registry(spec["problem"], spec["overrides"])
    out = Path(spec["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "problem": spec["problem"],
        "overrides": spec["overrides"],
        "methods": spec["methods"],
        "repeats": spec["repeats"],
        "known_optimum": problem.known_optimum,
        "configs": {m: c.to_dict() for m, c in spec["configs"].items()},
    }
    (out / "experiment.json").write_text(json.dumps(meta, indent=2, default=opt._json_default))
    failed = 0
    for m in spec["methods"]:
        cfg = spec["configs"][m]
        log.info("running %s x%d on %s", m, spec["repeats"], spec["problem"])
        workers = min(spec["workers"], spec["repeats"])
        records, agg = opt.run_repeats(
            problem if workers <= 1 else spec["problem"],
            cfg,
            spec["repeats"],
            workers=workers,
            overrides=spec["overrides"],
            out_dir=out / m,
            save_data=spec["save_data"],
        )
        for i, r in enumerate(records):
            if r.status != "ok":
                failed += 1
                log.error("%s run %d failed: %s", m, i, r.error)
        log.info("%s: %d/%d runs feasible", m, agg["n_feasible"], agg["n_runs"])
    path = summarize(out)
    sys.stdout.write(path.read_text())
    return EXIT_RUNTIME if failed else EXIT_OK


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    if args.list_problems:
        for name in available():
            print(name)
        return EXIT_OK
    if args.summarize:
        try:
            sys.stdout.write(summarize(args.summarize).read_text())
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    if args.dump_problem:
        if not args.problem:
            parser.print_usage(sys.stderr)
            print("error: --dump-problem needs --problem", file=sys.stderr)
            return EXIT_CONFIG
        try:
            overrides = _load_json_arg(args.overrides, "--overrides") if args.overrides else {}
            prob = registry(args.problem, overrides)
        except (ConfigError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for k, v in dump(prob, args.dump_problem, seed=args.seed or 0).items():
            print(f"{k}: {v}")
        return EXIT_OK
    try:
        spec = resolve(args)
        spec["problem_obj"] = registry(spec["problem"], spec["overrides"])
    except (ConfigError, KeyError, ValueError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_experiment(spec)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


__all__ = ["PRESETS", "build_parser", "cli_main", "main", "resolve", "run_experiment", "summarize"]
