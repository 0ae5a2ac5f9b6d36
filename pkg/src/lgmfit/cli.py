"""Command-line interface.

Two subcommands:

* ``lgmfit fit``       fit a model described by a JSON file against a CSV
                       data table and write the result artifacts to a
                       directory (summaries, marginals, diagnostics, grid,
                       optional posterior samples, figures, run manifest).
* ``lgmfit marginal``  evaluate, transform, summarize or sample a stored
                       marginal CSV.

Exit codes: 0 success, 2 validation error (bad flags, model or data files),
3 fit failure.
"""

import argparse
import dataclasses
import datetime
import json
import math
import os
import platform
import sys
import time

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .engine import fit
from .errors import (ConfigNotStored, DataError, FitFailed, MarginalError,
                     ModelSpecError, NonConvergence, NotPositiveDefinite)
from .marginals import (dmarginal, emarginal, hpdmarginal, mmarginal,
                        pmarginal, qmarginal, read_marginal_csv, rmarginal,
                        tmarginal, write_marginal_csv, zmarginal)
from .model import (build_model, load_table, parse_model_spec,
                    serialize_model_spec)
from .sampler import posterior_sample

SUMMARY_FMT = "%.6g"
GRID_FMT = "%.12g"

# columns used for header-only summary files when a table is absent
_LATENT_COLS = ["mean", "sd", "0.025quant", "0.5quant", "0.975quant",
                "mode", "kld"]
_HYPER_COLS = ["mean", "sd", "0.025quant", "0.5quant", "0.975quant", "mode"]


# ---------------------------------------------------------------------------
# fit subcommand
# ---------------------------------------------------------------------------

def _write_summary(df, path, empty_cols) -> None:
    """Write a summary table with a leading name column, 6 digits."""
    if df is None:
        df = pd.DataFrame(columns=empty_cols)
    df.to_csv(path, index=True, index_label="name", float_format=SUMMARY_FMT)


def _safe_filename(name: str) -> str:
    return name.replace(os.sep, "_")


def _write_marginals(result, out_dir) -> int:
    os.makedirs(out_dir, exist_ok=True)
    count = 0
    for group in (result.marginals_fixed, result.marginals_random,
                  result.marginals_hyperpar, result.marginals_fitted):
        for name, marg in group.items():
            write_marginal_csv(
                os.path.join(out_dir, _safe_filename(name) + ".csv"), marg)
            count += 1
    return count


def _write_diagnostics(result, out_dir) -> None:
    diag = result.diagnostics
    obj = {
        "mlik": diag.mlik,
        "dic": diag.dic,
        "p_dic": diag.p_dic,
        "mean_deviance": diag.mean_deviance,
        "waic": diag.waic,
        "p_waic": diag.p_waic,
    }
    if diag.cpo is not None:
        obj["cpo_failures"] = int(np.sum(diag.cpo_failure > 0))
        cpo = pd.DataFrame({
            "row": np.arange(1, diag.cpo.size + 1),
            "cpo": diag.cpo,
            "failure": diag.cpo_failure,
        })
        cpo.to_csv(os.path.join(out_dir, "cpo.csv"), index=False,
                   float_format=SUMMARY_FMT)
    with open(os.path.join(out_dir, "diagnostics.json"), "w",
              encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_samples(result, n: int, seed: int, path) -> None:
    samples = posterior_sample(n, result, seed=seed)
    model = result.model
    cols = {}
    if samples:
        thetas = np.stack([d.theta for d in samples])
        xs = np.stack([d.x for d in samples])
        for j, hp in enumerate(model.hypers):
            cols[hp.name_internal] = thetas[:, j]
        for j, name in enumerate(model.layout.names):
            cols[name] = xs[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format=SUMMARY_FMT)


def cmd_fit(args) -> int:
    t0 = time.time()
    try:
        with open(args.model, encoding="utf-8") as fh:
            spec = parse_model_spec(fh.read())
    except OSError as exc:
        raise ModelSpecError("cannot read %s: %s" % (args.model, exc))
    if args.safe is not None:
        spec = dataclasses.replace(spec, safe=args.safe)
    if args.samples and not spec.control.compute.config:
        raise ModelSpecError(
            "--samples requires control.compute.config in the model file")
    data = load_table(args.data)
    model = build_model(spec, data,
                        base_dir=os.path.dirname(os.path.abspath(args.model)))

    result = fit(model, threads=args.threads)

    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_summary(result.summary_fixed,
                   os.path.join(out, "summary_fixed.csv"), _LATENT_COLS)
    _write_summary(result.summary_random,
                   os.path.join(out, "summary_random.csv"), _LATENT_COLS)
    _write_summary(result.summary_hyperpar,
                   os.path.join(out, "summary_hyperpar.csv"), _HYPER_COLS)
    _write_summary(result.summary_fitted,
                   os.path.join(out, "summary_fitted.csv"), _HYPER_COLS)

    n_marginals = 0
    if model.spec.control.compute.return_marginals:
        n_marginals = _write_marginals(result, os.path.join(out, "marginals"))

    _write_diagnostics(result, out)
    result.grid_frame().to_csv(os.path.join(out, "grid.csv"), index=False,
                               float_format=GRID_FMT)
    if args.samples:
        _write_samples(result, args.samples, args.seed,
                       os.path.join(out, "samples.csv"))

    figures = []
    if args.figures:
        from . import plots
        figures = plots.render_report(result, os.path.join(out, "figures"))

    manifest = {
        "command": "fit",
        "model_file": os.path.abspath(args.model),
        "data_file": os.path.abspath(args.data),
        "out_dir": os.path.abspath(out),
        "model": json.loads(serialize_model_spec(model.spec)),
        "n_obs": model.n_obs,
        "n_latent": int(model.layout.N),
        "seed": args.seed,
        "threads": args.threads,
        "samples": args.samples,
        "marginal_files": n_marginals,
        "figures": [os.path.relpath(p, out) for p in figures],
        "mlik": result.mlik,
        "safe_retry_used": result.safe_retry_used,
        "versions": {
            "lgmfit": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "started_utc": datetime.datetime.fromtimestamp(
            t0, datetime.timezone.utc).isoformat(timespec="seconds"),
        "wall_time_seconds": round(time.time() - t0, 3),
    }
    with open(os.path.join(out, "run_manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    print("log marginal likelihood: %.6g" % result.mlik)
    if result.safe_retry_used:
        print("note: first attempt did not converge; results come from the "
              "hardened retry")
    print("wrote %s" % os.path.abspath(out))
    return 0


# ---------------------------------------------------------------------------
# marginal subcommand
# ---------------------------------------------------------------------------

_FUN_ENV = {
    "np": np,
    "exp": np.exp, "expm1": np.expm1, "log": np.log, "log1p": np.log1p,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "arctanh": np.arctanh,
    "pi": math.pi, "e": math.e,
}


def _compile_fun(expr: str):
    """Compile a one-variable expression like "exp(x)" or "1/x"."""
    try:
        code = compile(expr, "<--fun>", "eval")
    except SyntaxError as exc:
        raise MarginalError("invalid --fun expression %r: %s" % (expr, exc))

    def fun(x):
        env = dict(_FUN_ENV)
        env["x"] = x
        try:
            return eval(code, {"__builtins__": {}}, env)
        except Exception as exc:
            raise MarginalError(
                "--fun expression %r failed: %s" % (expr, exc))

    return fun


def _read_marginal(path):
    try:
        return read_marginal_csv(path)
    except (OSError, ValueError, KeyError) as exc:
        raise MarginalError("cannot read marginal %s: %s" % (path, exc))


def cmd_marginal(args) -> int:
    m = _read_marginal(args.file)
    op = args.op
    if op == "d":
        for v in np.atleast_1d(dmarginal(np.asarray(args.at), m)):
            print(GRID_FMT % v)
    elif op == "p":
        for v in np.atleast_1d(pmarginal(np.asarray(args.at), m)):
            print(GRID_FMT % v)
    elif op == "q":
        for v in np.atleast_1d(qmarginal(np.asarray(args.p), m)):
            print(GRID_FMT % v)
    elif op == "t":
        out = tmarginal(_compile_fun(args.fun), m)
        if args.out:
            write_marginal_csv(args.out, out)
            print("wrote %s" % args.out)
        else:
            for x, d in zip(out.x, out.density):
                print((GRID_FMT + " " + GRID_FMT) % (x, d))
    elif op == "e":
        print(GRID_FMT % emarginal(_compile_fun(args.fun), m))
    elif op == "hpd":
        lo, hi = hpdmarginal(args.level, m)
        print((GRID_FMT + " " + GRID_FMT) % (lo, hi))
    elif op == "z":
        for name, value in zmarginal(m).items():
            print(("%s " + SUMMARY_FMT) % (name, value))
    elif op == "r":
        for v in rmarginal(args.n, m, seed=args.seed):
            print(GRID_FMT % v)
    elif op == "m":
        print(GRID_FMT % mmarginal(m))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgmfit",
        description="Fit latent Gaussian models and work with stored "
                    "posterior marginals.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser(
        "fit", help="fit a model and write result artifacts")
    p_fit.add_argument("--model", required=True,
                       help="model description (JSON file)")
    p_fit.add_argument("--data", required=True, help="data table (CSV file)")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--seed", type=int, default=0,
                       help="seed for posterior samples (default 0)")
    p_fit.add_argument("--threads", type=int, default=1,
                       help="parallelism width for the grid stage")
    p_fit.add_argument("--safe", action=argparse.BooleanOptionalAction,
                       default=None,
                       help="override the model file's safe-retry setting")
    p_fit.add_argument("--samples", type=int, default=0, metavar="N",
                       help="also write N joint posterior draws "
                            "(samples.csv)")
    p_fit.add_argument("--figures", action=argparse.BooleanOptionalAction,
                       default=True, help="render report figures (PNG)")
    p_fit.set_defaults(func=cmd_fit)

    p_marg = sub.add_parser(
        "marginal", help="operate on a marginal stored as a two-column CSV")
    ops = p_marg.add_subparsers(dest="op", required=True)

    def add_op(name, help_text):
        p = ops.add_parser(name, help=help_text)
        p.add_argument("file", help="marginal CSV (columns x, density)")
        p.set_defaults(func=cmd_marginal)
        return p

    p = add_op("d", "density at points")
    p.add_argument("--at", type=float, action="append", required=True,
                   metavar="X", help="evaluation point (repeatable)")
    p = add_op("p", "cumulative probability at points")
    p.add_argument("--at", type=float, action="append", required=True,
                   metavar="X", help="evaluation point (repeatable)")
    p = add_op("q", "quantiles")
    p.add_argument("--p", type=float, action="append", required=True,
                   metavar="PROB", help="probability in [0, 1] (repeatable)")
    p = add_op("t", "transform by a monotone map")
    p.add_argument("--fun", required=True,
                   help="expression in x, e.g. 'exp(x)'")
    p.add_argument("--out", help="write the transformed marginal CSV here "
                                 "instead of printing the grid")
    p = add_op("e", "expected value of a function")
    p.add_argument("--fun", required=True,
                   help="expression in x, e.g. 'exp(x)'")
    p = add_op("hpd", "highest-density interval")
    p.add_argument("--level", type=float, default=0.95,
                   help="probability mass (default 0.95)")
    add_op("z", "summary statistics")
    p = add_op("r", "random draws")
    p.add_argument("--n", type=int, required=True, help="number of draws")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    add_op("m", "posterior mode")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelSpecError, DataError, MarginalError,
            ConfigNotStored) as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except FitFailed as err:
        print("error: %s" % err, file=sys.stderr)
        return 3
    except (NonConvergence, NotPositiveDefinite) as err:
        print("error: fit did not converge: %s" % err, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
