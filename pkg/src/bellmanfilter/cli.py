"""Command-line interface.

Subcommands: simulate, filter, estimate, study, sv-simulate, sv-fit,
mode-oracle. Parameter files and study configs are JSON; series files are
CSV with a header row. Exit codes: 0 success, 2 configuration error,
3 numerical failure.
"""

import argparse
import csv
import json
import sys

import numpy as np

from .bellman import UpdateOptions, filter_lg_arrays
from .bundles import DEFAULT_TRUE_PARAMS, QmleKalmanBundle, ScalarModelBundle
from .estimation import (FitOptions, HessianNotInvertible, NonFiniteObjective,
                         OptimFailed, OutOfDomain, FilterFailed, fit)
from .harness import StudyConfig, metrics, mode_oracle, run_study
from .kalman import kalman_filter
from .obsmodels import MODEL_IDS, OutOfSupport, DegenerateParams
from .particle import UnsupportedDimension, WeightCollapse, csir_estimate, csir_filter
from .svleverage import (InvalidParams, LagWindowMissing, SvLeverageParams,
                         sv_filter, sv_fit, sv_simulate)

CONFIG_ERROR = 2
NUMERICAL_ERROR = 3

_NUMERICAL_ERRORS = (
    OutOfSupport, DegenerateParams, NonFiniteObjective, OptimFailed,
    HessianNotInvertible, OutOfDomain, FilterFailed, WeightCollapse,
    UnsupportedDimension, InvalidParams, LagWindowMissing,
    np.linalg.LinAlgError, FloatingPointError, OverflowError,
)


class ConfigError(Exception):
    pass


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON file {path}: {exc}") from exc


def _read_series(path):
    """Read a CSV series; returns (y, columns) with y of shape (n,) or (n, 2)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
    except (OSError, StopIteration) as exc:
        raise ConfigError(f"cannot read CSV file {path}: {exc}") from exc
    header = [h.strip() for h in header]
    if "y1" in header and "y2" in header:
        i1, i2 = header.index("y1"), header.index("y2")
        y = np.array([[_cell(r[i1]), _cell(r[i2])] for r in rows])
    elif "y" in header:
        iy = header.index("y")
        y = np.array([_cell(r[iy]) for r in rows])
    else:
        raise ConfigError(f"{path} needs a 'y' column (or 'y1','y2')")
    return y, header


def _cell(text):
    text = text.strip()
    if text in ("", "nan", "NaN", "NA"):
        return float("nan")
    return float(text)


def _write_csv(path, header, columns):
    rows = zip(*columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, float) and np.isnan(v):
        return "nan"
    return repr(float(v))


def _bundle_from_args(args):
    if args.model not in DEFAULT_TRUE_PARAMS:
        raise ConfigError(f"unknown model {args.model!r}; choose from "
                          f"{', '.join(sorted(DEFAULT_TRUE_PARAMS))}")
    est_shapes = tuple(args.estimate_shapes.split(",")) if getattr(
        args, "estimate_shapes", "") else ()
    return ScalarModelBundle(args.model, estimate_shapes=est_shapes)


def _params_from_args(args, bundle):
    psi = bundle.true_params()
    if args.params:
        psi.update(_load_json(args.params))
    return psi


def _cmd_simulate(args):
    bundle = _bundle_from_args(args)
    psi = _params_from_args(args, bundle)
    rng = np.random.default_rng(args.seed)
    y, alpha = bundle.simulate(psi, args.n, rng)
    t = np.arange(1, args.n + 1)
    if y.ndim == 2:
        _write_csv(args.out, ["t", "y1", "y2", "alpha"],
                   [t, y[:, 0], y[:, 1], alpha])
    else:
        _write_csv(args.out, ["t", "y", "alpha"], [t, y, alpha])
    print(f"wrote {args.n} observations to {args.out}")
    return 0


def _cmd_filter(args):
    bundle = _bundle_from_args(args)
    psi = _params_from_args(args, bundle)
    y, _ = _read_series(args.data)
    t = np.arange(1, len(y) + 1)
    if args.filter == "bellman":
        obs, dyn = bundle.build(psi)
        opts = UpdateOptions(method=args.method)
        run = filter_lg_arrays(obs, dyn, y, opts=opts)
        _write_csv(args.out,
                   ["t", "a_pred", "a_upd", "I_pred", "I_upd",
                    "iterations", "converged", "loglik_term"],
                   [t, run["a_pred"], run["a_upd"], run["I_pred"],
                    run["I_upd"], run["iterations"], run["converged"],
                    run["decomposition"]])
        print(f"objective {run['objective']:.6f}; wrote {args.out}")
    elif args.filter == "kalman":
        qb = QmleKalmanBundle(args.model)
        tr = qb._transformed(y)
        dyn_psi = {k: psi[k] for k in ("c", "T", "Q")}
        from .dynamics import LinearGaussianDynamics
        dyn = LinearGaussianDynamics([dyn_psi["c"]], [[dyn_psi["T"]]],
                                     [[dyn_psi["Q"]]])
        run = kalman_filter(tr.obs, dyn, tr.data)
        _write_csv(args.out,
                   ["t", "a_pred", "a_upd", "I_pred", "I_upd",
                    "iterations", "converged", "loglik_term"],
                   [t, run["a_pred"][:, 0], run["a_upd"][:, 0],
                    run["I_pred"][:, 0, 0], run["I_upd"][:, 0, 0],
                    np.ones(len(y), dtype=int), np.ones(len(y), dtype=bool),
                    run["loglik"]])
        print(f"loglik {run['loglik'].sum():.6f}; wrote {args.out}")
    else:  # csir
        obs, dyn = bundle.build(psi)
        run = csir_filter(obs, dyn, y, n_particles=args.particles,
                          seed=args.seed)
        _write_csv(args.out,
                   ["t", "state_pred_mean", "state_pred_median",
                    "state_filt_mean", "ess"],
                   [t, run.state_pred_mean, run.state_pred_median,
                    run.state_filt_mean, run.ess])
        print(f"loglik {run.loglik:.6f}; wrote {args.out}")
    return 0


def _cmd_estimate(args):
    bundle = _bundle_from_args(args)
    y, _ = _read_series(args.data)
    init = _load_json(args.init) if args.init else None
    if args.filter == "csir":
        res = csir_estimate(bundle, y, init=init, n_particles=args.particles,
                            seed=args.seed)
    else:
        res = fit(bundle, y, init=init)
    payload = {
        "model": args.model,
        "params": res.params,
        "se": res.se,
        "objective": res.objective,
        "n_eval": res.n_eval,
        "converged": res.converged,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    print(f"objective {res.objective:.6f} after {res.n_eval} evaluations; "
          f"wrote {args.out}")
    return 0


def _cmd_study(args):
    raw = _load_json(args.config)
    raw.setdefault("seed", args.seed)
    if args.threads:
        raw["threads"] = args.threads
    try:
        config = StudyConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad study config: {exc}") from exc
    report = run_study(config)
    payload = {
        "model": config.model,
        "n_series": config.n_series,
        "length": config.length,
        "seed": config.seed,
        "methods": {
            name: {
                "mae": rep.mae, "rmse": rep.rmse,
                "rel_mae": rep.rel_mae, "rel_rmse": rep.rel_rmse,
                "n_failed": rep.n_failed,
                "estimation_seconds": rep.estimation_seconds,
                "filtering_seconds": rep.filtering_seconds,
                "per_series_mae": rep.per_series_mae.tolist(),
            } for name, rep in report.methods.items()
        },
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    for line in report.summary_lines():
        print(line)
    print(f"wrote {args.out}")
    return 0


def _cmd_sv_simulate(args):
    psi = _load_json(args.params)
    params = SvLeverageParams(**psi)
    y, h = sv_simulate(params, args.n, seed=args.seed)
    t = np.arange(1, args.n + 1)
    _write_csv(args.out, ["t", "y", "h"], [t, y, h])
    print(f"wrote {args.n} observations to {args.out}")
    return 0


def _cmd_sv_fit(args):
    y, header = _read_series(args.data)
    res = sv_fit(y, args.lags)
    payload = {
        "k": args.lags,
        "params": res.params,
        "se": res.se,
        "objective": res.fit.objective,
        "bic": res.bic,
        "n_eval": res.fit.n_eval,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    print(f"objective {res.fit.objective:.4f}  BIC {res.bic:.4f}; wrote {args.out}")
    return 0


def _cmd_mode_oracle(args):
    bundle = _bundle_from_args(args)
    psi = _params_from_args(args, bundle)
    y, _ = _read_series(args.data)
    obs, dyn = bundle.build(psi)
    path = mode_oracle(obs, dyn, y)
    t = np.arange(1, len(y) + 1)
    _write_csv(args.out, ["t", "mode"], [t, path[:, 0]])
    print(f"wrote mode path of length {len(y)} to {args.out}")
    return 0


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bellmanfilter",
        description="State-space filtering and estimation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--threads", type=int, default=0,
                        help="series-level worker processes for studies")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    p = sub.add_parser("simulate", help="simulate a series from a registered model")
    p.add_argument("--model", required=True, choices=sorted(set(MODEL_IDS) - {"linear-gauss"}))
    p.add_argument("--params", default=None, help="JSON file of parameter overrides")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("filter", help="run a filter over a CSV series")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="auto",
                   choices=["auto", "newton", "fisher", "bhhh", "hybrid"])
    p.add_argument("--filter", default="bellman",
                   choices=["bellman", "kalman", "csir"])
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("estimate", help="estimate constant parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="JSON file with the initial guess")
    p.add_argument("--estimate-shapes", dest="estimate_shapes", default="",
                   help="comma-separated shape parameters to include")
    p.add_argument("--filter", default="bellman", choices=["bellman", "csir"])
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("study", help="run a Monte Carlo study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("sv-simulate", help="simulate the leverage volatility model")
    p.add_argument("--params", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sv_simulate)

    p = sub.add_parser("sv-fit", help="fit the leverage volatility model")
    p.add_argument("--data", required=True)
    p.add_argument("--lags", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sv_fit)

    p = sub.add_parser("mode-oracle", help="full-path mode on a data window")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mode_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if not hasattr(args, "estimate_shapes"):
        args.estimate_shapes = ""
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
