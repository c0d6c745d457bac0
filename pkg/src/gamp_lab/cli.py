"""Command-line entry point ``gamp-lab``.

Exit status: 0 success, 2 configuration error, 3 divergence, 4 SE singularity.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .csvio import dumps_table
from .errors import ConfigError, DivergenceError, EstimatorError, SingularUpdateError
from .experiment import (
    ESTIMATORS,
    ExperimentConfig,
    build_estimators,
    lmmse_oracle,
    run_montecarlo,
    run_se,
    run_single,
    sample_instance,
)
from .gamp import run_gamp
from .model import ProblemInstance, nse_db

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_SINGULAR = 0, 2, 3, 4
FIG5_ESTIMATORS = ("nl_gamp", "lin_gamp")


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_config(path, **overrides):
    if path is None:
        return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.load(path, **overrides)


def _load_instance(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed instance file: {exc.msg}", line=exc.lineno) from None
    return ProblemInstance.from_dict(d)


def _config_for_instance(inst, base):
    d = base.to_dict()
    d.update(n=inst.n, m=inst.m, convention=inst.convention, input=inst.to_dict(False)["input"], output=inst.to_dict(False)["output"], base_seed=inst.seed)
    return ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args):
    config = _load_config(args.config)
    seed = config.base_seed if args.seed is None else args.seed
    inst = sample_instance(config, seed)
    out = args.out or os.path.join(config.out_dir, f"instance_seed{seed}.json")
    _write(out, inst.to_json(include_arrays=not args.no_arrays) + "\n")
    print(f"instance n={inst.n} m={inst.m} convention={inst.convention} seed={seed}")
    print(f"input={config.input} output={config.output}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args):
    base = _load_config(args.config, variant=args.variant, base_seed=args.seed)
    inst = _load_instance(args.instance) if args.instance else sample_instance(base, base.base_seed)
    config = _config_for_instance(inst, base) if args.instance else base
    selection = args.estimator or config.estimators[0]
    out_dir = args.out_dir or config.out_dir
    trace_path = os.path.join(out_dir, f"trace_{selection}.csv")
    start = time.perf_counter()
    status, trace, error = EXIT_OK, None, None
    try:
        _, trace = run_single(config, selection, inst)
    except (DivergenceError, EstimatorError) as exc:
        status, trace, error = EXIT_DIVERGENCE, exc.trace, str(exc)
    except SingularUpdateError as exc:
        status, error = EXIT_SINGULAR, str(exc)
    wall = time.perf_counter() - start
    summary = {"estimator": selection, "variant": config.variant, "base_seed": config.base_seed, "seed": int(inst.seed), "wall_time_s": wall}
    if trace is not None:
        trace.metadata["base_seed"] = config.base_seed
        _write(trace_path, trace.to_csv())
        summary.update(final_nse_db=trace.nse_db[-1], iterations=trace.iterations, clamp_count=int(sum(trace.clamp_count)))
    if error:
        summary["error"] = error
        print(f"error: {error}", file=sys.stderr)
    _write(os.path.join(out_dir, f"summary_{selection}.json"), _json(summary))
    if trace is not None:
        print(f"{selection}: final NSE {trace.nse_db[-1]:.3f} dB after {trace.iterations} iterations -> {trace_path}")
    return status


def _montecarlo_tables(results, config):
    meta = {"base_seed": config.base_seed, "trials": config.trials, "seeding": "trial t uses seed base_seed+t with fresh A, x, w"}
    long_rows = []
    for res in results:
        for tr in res.trials:
            for it, v in enumerate(tr["nse_db"]):
                long_rows.append([res.selection, tr["trial"], tr["seed"], it, v])
    trials_csv = dumps_table(("estimator", "trial", "seed", "iter", "nse_db"), long_rows, meta)
    cols = ["iter"] + [f"{r.selection}_median_nse_db" for r in results]
    rows = [[it] + [float(r.median[it]) for r in results] for it in range(len(results[0].median))]
    return trials_csv, dumps_table(cols, rows, meta)


def cmd_montecarlo(args):
    config = _load_config(args.config, trials=args.trials, base_seed=args.seed)
    selections = args.estimators or config.estimators
    out_dir = args.out_dir or config.out_dir
    results = [run_montecarlo(config, sel, workers=args.workers) for sel in selections]
    trials_csv, median_csv = _montecarlo_tables(results, config)
    _write(os.path.join(out_dir, "montecarlo_trials.csv"), trials_csv)
    _write(os.path.join(out_dir, "montecarlo_median.csv"), median_csv)
    summary = {
        "base_seed": config.base_seed,
        "trials": config.trials,
        "config": config.to_dict(),
        "estimators": {r.selection: {"failures": r.failures, "final_median_nse_db": float(r.median[-1])} for r in results},
    }
    _write(os.path.join(out_dir, "montecarlo_summary.json"), _json(summary))
    for r in results:
        print(f"{r.selection}: median final NSE {r.median[-1]:.3f} dB over {config.trials - r.failures} trials")
    return EXIT_OK


def cmd_se(args):
    config = _load_config(args.config)
    selections = [args.estimator] if args.estimator else config.estimators
    out_dir = args.out_dir or config.out_dir
    for sel in selections:
        trace = run_se(config, sel)
        path = os.path.join(out_dir, f"se_{sel}.csv")
        _write(path, trace.to_csv())
        print(f"{sel}: predicted final NSE {trace.nse_pred_db[-1]:.3f} dB -> {path}")
    return EXIT_OK


def reproduce_fig5(trials=100, workers=None, out_dir="results/fig5", base_seed=0, n=1000, m=500):
    """Monte Carlo and SE for NL-GAMP and Lin-GAMP in the sparse nonlinear example."""
    config = ExperimentConfig(n=n, m=m, trials=trials, base_seed=base_seed, estimators=list(FIG5_ESTIMATORS), out_dir=out_dir)
    mc = [run_montecarlo(config, sel, workers=workers) for sel in FIG5_ESTIMATORS]
    se = [run_se(config, sel) for sel in FIG5_ESTIMATORS]
    meta = {"base_seed": base_seed, "trials": trials, "n": n, "m": m, "iteration_0": "post-initialization"}
    series = {}
    for r in mc:
        series[f"{r.selection}_mc"] = [float(v) for v in r.median]
    for sel, tr in zip(FIG5_ESTIMATORS, se):
        series[f"{sel}_se"] = [float(v) for v in tr.nse_pred_db]
    names = list(series)
    length = config.max_iters + 1
    combined = dumps_table(["iter"] + names, [[it] + [series[k][it] for k in names] for it in range(length)], meta)
    plot = dumps_table(("series", "iter", "value"), [[k, it, series[k][it]] for k in names for it in range(length)], meta)
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "fig5_combined.csv"), combined)
    _write(os.path.join(out_dir, "fig5_plot_data.csv"), plot)
    trials_csv, _ = _montecarlo_tables(mc, config)
    _write(os.path.join(out_dir, "fig5_trials.csv"), trials_csv)
    for sel, tr in zip(FIG5_ESTIMATORS, se):
        _write(os.path.join(out_dir, f"se_{sel}.csv"), tr.to_csv())
    summary = {
        **meta,
        "final_nse_db": {k: v[-1] for k, v in series.items()},
        "nl_minus_lin_gain_db": series["lin_gamp_mc"][-1] - series["nl_gamp_mc"][-1],
        "failures": {r.selection: r.failures for r in mc},
    }
    _write(os.path.join(out_dir, "fig5_summary.json"), _json(summary))
    return series, summary


def cmd_reproduce_fig5(args):
    _, summary = reproduce_fig5(args.trials, args.workers, args.out_dir, args.seed)
    for k, v in summary["final_nse_db"].items():
        print(f"{k}: final NSE {v:.3f} dB")
    print(f"NL-GAMP gain over Lin-GAMP: {summary['nl_minus_lin_gain_db']:.2f} dB; outputs in {args.out_dir}")
    return EXIT_OK


def cmd_lmmse_oracle(args):
    base = _load_config(args.config, base_seed=args.seed)
    inst = _load_instance(args.instance) if args.instance else sample_instance(base, base.base_seed)
    config = _config_for_instance(inst, base) if args.instance else base
    xhat_oracle = lmmse_oracle(inst)
    run_cfg = replace(config.run_config(), max_iters=max(config.max_iters, 1000), stop_tol=min(config.stop_tol, 1e-12))
    in_est, out_est = build_estimators(config, "nl_gamp")
    report = {"base_seed": config.base_seed, "seed": int(inst.seed), "oracle_nse_db": nse_db(inst.x, xhat_oracle)}
    for variant in ("full", "scalar_variance"):
        state, trace = run_gamp(inst, in_est, out_est, replace(run_cfg, variant=variant))
        rel = float(np.linalg.norm(state.xhat - xhat_oracle) / np.linalg.norm(xhat_oracle))
        report[variant] = {"rel_l2_error": rel, "iterations": trace.iterations, "final_nse_db": trace.nse_db[-1]}
        print(f"{variant}: relative L2 distance to dense solve {rel:.3e} after {trace.iterations} iterations")
    out = args.out or os.path.join(config.out_dir, "lmmse_oracle.json")
    _write(out, _json(report))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gamp-lab", description="GAMP runs, Monte Carlo sweeps and state-evolution predictions.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample and save one problem instance")
    g.add_argument("config", nargs="?", help="JSON experiment config (defaults to the sparse sigmoid example)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--no-arrays", action="store_true", help="store only dims, specs and seed")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run GAMP once")
    r.add_argument("--config")
    r.add_argument("--instance", help="instance file written by 'generate'")
    r.add_argument("--estimator", choices=ESTIMATORS)
    r.add_argument("--variant", choices=("full", "scalar_variance"))
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_run)

    mc = sub.add_parser("montecarlo", help="repeat runs over seeded trials and report medians")
    mc.add_argument("config", nargs="?")
    mc.add_argument("--trials", type=int)
    mc.add_argument("--workers", type=int, help="parallel workers (capped by GAMP_LAB_THREADS)")
    mc.add_argument("--estimators", nargs="+", choices=ESTIMATORS)
    mc.add_argument("--seed", type=int)
    mc.add_argument("--out-dir")
    mc.set_defaults(func=cmd_montecarlo)

    se = sub.add_parser("se", help="state-evolution prediction")
    se.add_argument("config", nargs="?")
    se.add_argument("--estimator", choices=ESTIMATORS)
    se.add_argument("--out-dir")
    se.set_defaults(func=cmd_se)

    f5 = sub.add_parser("reproduce-fig5", help="NL-GAMP vs Lin-GAMP on the sparse sigmoid example, with SE")
    f5.add_argument("--trials", type=int, default=100)
    f5.add_argument("--workers", type=int)
    f5.add_argument("--seed", type=int, default=0)
    f5.add_argument("--out-dir", default=os.path.join("results", "fig5"))
    f5.set_defaults(func=cmd_reproduce_fig5)

    lo = sub.add_parser("lmmse-oracle", help="compare converged GAMP with the dense linear solve")
    lo.add_argument("--config")
    lo.add_argument("--instance")
    lo.add_argument("--seed", type=int)
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_lmmse_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        where = "".join(f" ({k} {v})" for k, v in (("field", exc.field), ("line", exc.line)) if v is not None)
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, EstimatorError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except SingularUpdateError as exc:
        print(f"state evolution singular: {exc}", file=sys.stderr)
        return EXIT_SINGULAR


if __name__ == "__main__":
    sys.exit(main())
