"""Command-line entry point: ``pflowis {run,sweep,validate,flow-demo}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import tempfile
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, parse_config
from .errors import ConfigError
from .estimator import MethodConfig
from .flow_core import LinearizedModel
from .harness import aggregate, kalman_update, run_monte_carlo, stiffness_trace
from .flow_integrate import GaussianComponent, migrate_component
from .tdoa import tdoa_jacobian, tdoa_predict

OUT_ENV = "PFLOWIS_OUT"
RUN_HEADER = ("method", "seed", "ospa", "runtime_s", "mean_ess", "mean_kappa", "n_lambda")
AGG_HEADER = ("method", "n_runs", "mean_ospa", "mean_runtime_s")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if np.isnan(x) else repr(x)


def preflight(out_dir) -> Path:
    """Create ``out_dir`` if needed and prove it is writable before any computation."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out, prefix=".write-check-"):
            pass
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable ({exc.strerror})") from exc
    return out


def output_tag(methods) -> str:
    kinds = sorted({m.method for m in methods})
    return re.sub(r"[^A-Za-z0-9_.+-]", "_", "+".join(kinds))


def emit_outputs(reports, out_dir, tag: str, seed: int, extra: dict | None = None) -> list[Path]:
    """Write the per-run CSV, the aggregate CSV and a JSON summary.

    File names carry ``tag`` and ``seed`` only, so a rerun overwrites them;
    the timestamp lives inside the summary.
    """
    out = Path(out_dir)
    runs_path = out / f"runs_{tag}_seed{seed}.csv"
    agg_path = out / f"aggregate_{tag}_seed{seed}.csv"
    summary_path = out / f"summary_{tag}_seed{seed}.json"
    rows = aggregate(reports)

    with open(runs_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RUN_HEADER)
        for r in reports:
            w.writerow([r.method, r.seed, _fmt(r.ospa), _fmt(r.runtime_s), _fmt(r.mean_ess),
                        _fmt(r.mean_kappa), r.n_lambda])
    with open(agg_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AGG_HEADER)
        for a in rows:
            w.writerow([a.method, a.n_runs, _fmt(a.mean_ospa), _fmt(a.mean_runtime_s)])

    summary = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
        "aggregate": [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(a).items()}
                      for a in rows],
        "failures": [{"method": r.method, "seed": r.seed, "error": r.error} for r in reports if r.failed],
        "runs": [{"method": r.method, "seed": r.seed, "fallbacks": r.fallbacks, "complete": r.complete,
                  "ess": [None if not np.isfinite(e) else float(e) for e in r.ess],
                  "kappa_median_per_sensor": [None if k is None else float(np.median(k)) for k in r.kappa]}
                 for r in reports if not r.failed],
    }
    if extra:
        summary.update(extra)
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return [runs_path, agg_path, summary_path]


def _select(methods, spec: str | None):
    if not spec:
        return list(methods)
    wanted = [s.strip() for s in spec.split(",") if s.strip()]
    picked = [m for m in methods if m.method in wanted or m.name in wanted]
    unknown = [s for s in wanted if not any(s in (m.method, m.name) for m in methods)]
    if unknown:
        raise ConfigError("--methods", f"no configured method matches {unknown}")
    return picked


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("--runs", "must be >= 1")
        run = replace(run, runs=args.runs)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        run = replace(run, jobs=args.jobs)
    return replace(cfg, run=run)


def _experiment(args, cfg: ExperimentConfig, methods) -> int:
    out = preflight(args.out)
    reports = run_monte_carlo(cfg.scenario, methods, cfg.run.runs, cfg.run.seed, cfg.run.jobs)
    paths = emit_outputs(reports, out, f"{args.command}_{output_tag(methods)}", cfg.run.seed,
                         {"scenario": _jsonable(asdict(cfg.scenario)),
                          "methods": [m.name for m in methods]})
    print(f"{'method':<28} {'runs':>5} {'failed':>6} {'mean OSPA':>10} {'runtime/s':>10}")
    for a in aggregate(reports):
        print(f"{a.method:<28} {a.n_runs:>5} {a.n_failed:>6} {a.mean_ospa:>10.3f} {a.mean_runtime_s:>10.2f}")
    for p in paths:
        print(f"wrote {p}")
    failed = sum(r.failed for r in reports)
    if failed:
        print(f"{failed} run(s) failed; see the summary", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def cmd_run(args) -> int:
    cfg = _load(args)
    return _experiment(args, cfg, _select(cfg.methods, args.methods))


def cmd_sweep(args) -> int:
    cfg = _load(args)
    methods = cfg.sweep.methods(cfg.scenario.n_g, cfg.scenario.n_p)
    return _experiment(args, cfg, _select(methods, args.methods))


def cmd_validate(args) -> int:
    from .validation import validate_invariants

    results = validate_invariants(args.seed or 0)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUN


def cmd_flow_demo(args) -> int:
    """Flow one Gaussian through a linearized TDOA measurement and compare to the Kalman posterior."""
    cfg = _load(args)
    sc = cfg.scenario
    geo = sc.geometry()
    rng = np.random.default_rng(cfg.run.seed)
    h = sc.roi_half_width
    source = rng.uniform(-0.9 * h, 0.9 * h, 3)
    mu0 = source + rng.normal(0.0, h / 4, 3)
    P0 = np.eye(3) * (h / 2) ** 2
    H = tdoa_jacobian(source, 0, geo)
    offset = np.atleast_1d(tdoa_predict(source, 0, geo)) - H @ source
    z = tdoa_predict(source, 0, geo) + sc.sigma_v * rng.standard_normal()
    model = LinearizedModel(H, np.array([[sc.sigma_v ** 2]]), np.array([z]), source, offset)
    mu_k, P_k = kalman_update(mu0, P0, H, model.R, model.z, offset)

    methods = [m for m in _select(cfg.methods, args.methods) if m.method != "BS"]
    for m in methods:
        out = migrate_component(GaussianComponent(mu0, P0), lambda x: model, m.schedule, m.diffusion)
        err_mu = np.linalg.norm(out.mu - mu_k) / np.linalg.norm(mu_k)
        err_P = np.linalg.norm(out.P - P_k) / np.linalg.norm(P_k)
        trace = stiffness_trace(m, mu0, P0, model)
        print(f"{m.name}: {len(trace)} steps, rel. error vs Kalman: mean {err_mu:.2e}, cov {err_P:.2e}")
        step = max(1, len(trace) // 10)
        for lam, k in trace[::step] + ([trace[-1]] if (len(trace) - 1) % step else []):
            print(f"  lambda={lam:.3e}  kappa={k:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pflowis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [
        ("run", cmd_run, "Monte Carlo runs of the configured methods"),
        ("sweep", cmd_sweep, "schedule x alpha grid over PFL-D, PFL-S and PFL-OS"),
        ("validate", cmd_validate, "run the invariant suite"),
        ("flow-demo", cmd_flow_demo, "single-component flow, stiffness trace and Kalman error"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="YAML config file (omitted: published defaults)")
        p.add_argument("--out", default=os.environ.get(OUT_ENV, "results"),
                       help=f"output directory (default ${OUT_ENV} or ./results)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--methods", help="comma-separated method kinds or names to keep")
        p.add_argument("--runs", type=int, help="Monte Carlo runs per method")
        p.add_argument("--jobs", type=int, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
