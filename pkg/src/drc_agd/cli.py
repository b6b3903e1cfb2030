"""Command-line front end: run sweeps, validate configs, run the self-test.

Exit status: 0 on success, 1 when an invariant check fails (artifacts are
still written), 2 for configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from .learner import ConfigurationError
from .regret import evaluate_episode, fit_rate

log = logging.getLogger("drc_agd")

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2

SUMMARY_COLUMNS = [
    "seed", "T", "case", "alpha", "m", "h", "realized_cost", "comparator_cost", "R_T", "bound",
    "burn_in", "algorithm_truncation", "f_policy", "comparator_truncation", "policy_gap",
    "max_drift_excess", "min_slack", "exponent",
]
RATES_COLUMNS = ["case", "alpha", "exponent", "intercept", "log_ratio_growth", "n_horizons", "seeds", "horizons", "mean_regrets"]
TRACE_FIXED = ["l_t", "F_t", "f_t", "eta_t", "H_t", "lambda_t", "grad_norm", "feasibility_slack"]

DRIFT_TOL = 1e-9
DECOMP_TOL = 1e-6
BOUND_TOL = 1e-6
SLACK_TOL = 1e-9


def trace_columns(dy, du):
    return ["t"] + [f"y_{i}" for i in range(dy)] + [f"u_{i}" for i in range(du)] + [f"ynat_{i}" for i in range(dy)] + TRACE_FIXED


# ---------------------------------------------------------------------------
# orchestration


def _run_job(payload):
    cfg, job, want_trace = payload
    summary = evaluate_episode(cfgmod.episode_config(cfg, job), keep_episode=want_trace)
    trace = summary.episode.trace_rows() if want_trace else None
    summary.episode = None
    return job, summary, trace


def _wants_trace(cfg, job):
    mode = cfg["output"]["traces"]
    return mode == "all" or (mode == "first-seed" and job.seed_index == 0)


def run_jobs(cfg, jobs=None, parallel=None):
    """Evaluate every job; results come back in job order regardless of parallelism."""
    jobs = cfgmod.plan(cfg) if jobs is None else jobs
    parallel = cfg["parallel"] if parallel is None else parallel
    payloads = [(cfg, job, _wants_trace(cfg, job)) for job in jobs]
    if parallel > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, payloads, chunksize=1))
    return [_run_job(p) for p in payloads]


def group_regrets(results):
    """{(case, alpha): {T: [regret per seed in seed order]}}."""
    groups = defaultdict(lambda: defaultdict(list))
    for job, summary, _ in results:
        groups[(job.case, job.alpha)][job.T].append(summary.regret)
    return groups


def fit_groups(results):
    fits = {}
    for key, by_T in group_regrets(results).items():
        Ts = sorted(by_T)
        means = [float(np.mean(by_T[T])) for T in Ts]
        try:
            fits[key] = fit_rate(Ts, means)
        except ValueError as exc:
            log.warning("no rate fit for case %s alpha %g: %s", key[0], key[1], exc)
    return fits


def check_invariants(results):
    """Human-readable list of invariant violations (empty when all hold)."""
    problems = []
    bounds = defaultdict(lambda: ([], []))
    for job, s, _ in results:
        tag = f"case={job.case} alpha={job.alpha} T={job.T} seed={job.seed_index}"
        if s.max_drift_excess > DRIFT_TOL:
            problems.append(f"{tag}: step drift exceeds eta(G_f + lambda D) by {s.max_drift_excess:.3g}")
        gap = abs(s.decomposition.drc_regret - s.regret)
        if gap > DECOMP_TOL:
            problems.append(f"{tag}: decomposition terms miss the regret by {gap:.3g}")
        if s.min_slack < -SLACK_TOL:
            problems.append(f"{tag}: parameters left the constraint set (slack {s.min_slack:.3g})")
        if not s.comparator_converged:
            problems.append(f"{tag}: comparator did not converge")
        r, b = bounds[(job.case, job.alpha, job.T)]
        r.append(s.regret)
        b.append(s.bound)
    for (case, alpha, T), (r, b) in bounds.items():
        if np.mean(r) > np.mean(b) + BOUND_TOL:
            problems.append(f"case={case} alpha={alpha} T={T}: mean regret {np.mean(r):.6g} exceeds the bound {np.mean(b):.6g}")
    return problems


# ---------------------------------------------------------------------------
# writers


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})


def summary_rows(results, fits):
    rows = []
    for job, s, _ in results:
        row = s.row()
        row["seed"] = job.seed_index
        fit = fits.get((job.case, job.alpha))
        row["exponent"] = fit.exponent if fit is not None else ""
        rows.append(row)
    return rows


def rates_rows(results, fits):
    rows = []
    seeds = {}
    for job, _, _ in results:
        seeds[(job.case, job.alpha)] = max(seeds.get((job.case, job.alpha), 0), job.seed_index + 1)
    for key, fit in fits.items():
        rows.append({
            "case": key[0],
            "alpha": key[1],
            "exponent": fit.exponent,
            "intercept": fit.intercept,
            "log_ratio_growth": fit.log_ratio_growth(),
            "n_horizons": len(fit.horizons),
            "seeds": seeds[key],
            "horizons": " ".join(str(int(T)) for T in fit.horizons),
            "mean_regrets": " ".join(repr(float(r)) for r in fit.regrets),
        })
    return rows


def plot_curves(path, results, fits, title="Regret growth"):
    """Log-log mean regret against T per case with the fitted slope in the legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "drc-agd"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for key, by_T in sorted(group_regrets(results).items(), key=lambda kv: str(kv[0])):
        Ts = np.array(sorted(by_T), dtype=float)
        means = np.array([np.mean(by_T[int(T)]) for T in Ts])
        fit = fits.get(key)
        label = f"case {key[0]}" + (f", alpha={key[1]:g}" if key[0] in (3, 4) else "")
        if fit is not None:
            label += f" (slope {fit.exponent:.3f})"
        line, = ax.loglog(Ts, np.where(means > 0, means, np.nan), "o-", label=label)
        if fit is not None:
            ax.loglog(Ts, np.exp(fit.intercept) * Ts**fit.exponent, "--", color=line.get_color(), alpha=0.6)
    ax.set_xlabel("horizon T")
    ax.set_ylabel("mean regret")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _trace_name(job):
    return f"trace_case{job.case}_alpha{job.alpha:g}_T{job.T}_seed{job.seed_index}.csv"


def write_outputs(out_dir, cfg, results):
    """Top-level and per-case summary.csv, rates.csv, regret_curves.svg and traces/."""
    os.makedirs(out_dir, exist_ok=True)
    fits = fit_groups(results)
    cfgmod.dump(cfg, os.path.join(out_dir, "effective_config.toml"))
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary_rows(results, fits))
    _write_csv(os.path.join(out_dir, "rates.csv"), RATES_COLUMNS, rates_rows(results, fits))
    plot_curves(os.path.join(out_dir, "regret_curves.svg"), results, fits)
    model = cfgmod.build_system(cfg)
    cols = trace_columns(model.dy, model.du)
    for case in dict.fromkeys(job.case for job, _, _ in results):
        sub = [r for r in results if r[0].case == case]
        case_dir = os.path.join(out_dir, f"case_{case}")
        trace_dir = os.path.join(case_dir, "traces")
        os.makedirs(trace_dir, exist_ok=True)
        sub_fits = {k: v for k, v in fits.items() if k[0] == case}
        _write_csv(os.path.join(case_dir, "summary.csv"), SUMMARY_COLUMNS, summary_rows(sub, sub_fits))
        _write_csv(os.path.join(case_dir, "rates.csv"), RATES_COLUMNS, rates_rows(sub, sub_fits))
        plot_curves(os.path.join(case_dir, "regret_curves.svg"), sub, sub_fits, title=f"Regret growth, case {case}")
        for job, _, trace in sub:
            if trace is not None:
                _write_csv(os.path.join(trace_dir, _trace_name(job)), cols, trace)
    return fits


# ---------------------------------------------------------------------------
# argument handling


def parse_horizons(text):
    """'256..8192' (doubling) or a comma list such as '256,512,1024'."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(v) for v in text.split(".."))
        if lo < 1 or hi < lo:
            raise ValueError(f"bad horizon range {text!r}")
        out = []
        T = lo
        while T <= hi:
            out.append(T)
            T *= 2
        return out
    return [int(v) for v in text.split(",") if v.strip()]


def parse_cases(text):
    return [cfgmod.parse_case(v.strip(), "--cases") for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="drc-agd", description="Adaptive-gradient DRC regret experiments")
    sub = p.add_subparsers(dest="command")
    run = sub.add_parser("run", help="run a sweep (or --validate / --selftest)")
    run.add_argument("--config", help="experiment TOML file (default: packaged corollary1.toml)")
    run.add_argument("--cases", help="comma list of cases, e.g. 1,2,3")
    run.add_argument("--horizons", help="range like 256..8192 or a comma list")
    run.add_argument("--seeds", type=int, help="replicates per (case, horizon)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--parallel", type=int, help="worker processes")
    run.add_argument("--selftest", action="store_true", help="run the invariant self-test and exit")
    run.add_argument("--validate", action="store_true", help="validate the config without simulating")
    val = sub.add_parser("validate", help="validate a config file")
    val.add_argument("config")
    sub.add_parser("selftest", help="run the invariant self-test")
    return p


def effective_config(args, environ=None):
    if args.config:
        cfg = cfgmod.load(args.config, environ)
    else:
        cfg = cfgmod.load_default(environ=os.environ if environ is None else environ)
    if getattr(args, "cases", None):
        cfg["sweep"]["cases"] = parse_cases(args.cases)
    if getattr(args, "horizons", None):
        try:
            cfg["sweep"]["horizons"] = parse_horizons(args.horizons)
        except ValueError as exc:
            raise cfgmod.ConfigError("--horizons", str(exc)) from None
    if getattr(args, "seeds", None) is not None:
        cfg["sweep"]["seeds"] = args.seeds
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "parallel", None) is not None:
        cfg["parallel"] = args.parallel
    cfgmod.validate(cfg)
    return cfg


def _selftest():
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_VIOLATION


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command is None:
        build_parser().print_help()
        return EXIT_CONFIG
    if args.command == "selftest" or (args.command == "run" and args.selftest):
        return _selftest()
    if args.command == "validate":
        args = argparse.Namespace(command="validate", config=args.config, validate=True)
    try:
        cfg = effective_config(args)
    except (cfgmod.ConfigError, ConfigurationError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate" or args.validate:
        return EXIT_OK
    results = run_jobs(cfg)
    fits = write_outputs(cfg["out"], cfg, results)
    for (case, alpha), fit in fits.items():
        print(f"case {case} alpha {alpha:g}: exponent {fit.exponent:.4f}, log-ratio growth {fit.log_ratio_growth():.4f}")
    problems = check_invariants(results)
    for msg in problems:
        print(f"invariant violated: {msg}", file=sys.stderr)
    return EXIT_VIOLATION if problems else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
