"""Command-line entry point: ``critbranch {analyze,simulate,moments,sde,converge}``.

Exit codes: 0 success, 2 an assertion failed (e.g. ``--require-critical`` on a
non-critical model, or a convergence check), 1 any other error.
"""

import argparse
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .errors import CritBranchError, InvalidInputError
from .model import (
    BUILTIN_MODELS,
    InitialState,
    classify_criticality,
    limit_coefficients,
    load_model,
    load_schema,
)
from .perron import perron_data
from .rng import SEED_ENV, resolve_seed

EXIT_OK, EXIT_ERROR, EXIT_ASSERT = 0, 1, 2


class _AssertionFailed(Exception):
    pass


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in vals]


def _emit(obj, schema):
    """Validate ``obj`` against a shipped schema and print it as JSON."""
    jsonschema.validate(obj, load_schema(schema))
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _open_out(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d) or not os.access(d, os.W_OK):
        raise InvalidInputError(f"output path {path!r} is not writable")
    return path


def _default_jobs():
    return os.cpu_count() or 1


def _model(args):
    return load_model(args.model)


def _meta(args, model=None):
    meta = {"package_version": __version__, "seed": int(resolve_seed(args.seed))}
    if model is not None:
        meta["model_id"] = model.model_id
        meta["model_name"] = model.name
    return meta


# -- analyze -----------------------------------------------------------------


def cmd_analyze(args):
    model = _model(args)
    label, rho = classify_criticality(model)
    pd = perron_data(model.m_xi)
    out = {
        "model": {"name": model.name, "model_id": model.model_id, "p": int(model.p)},
        "classification": label,
        "perron": {
            "rho": pd.rho, "u": pd.u.tolist(), "v": pd.v.tolist(), "pi": pd.pi.tolist(),
            "c_rate": pd.c_rate, "r_rate": pd.r_rate,
        },
        "moments": {
            "m_xi": model.m_xi.tolist(), "V_xi": model.V_xi.tolist(),
            "m_eps": model.m_eps.tolist(), "V_eps": model.V_eps.tolist(),
        },
        "limit": None,
    }
    if label == "critical":
        lc = limit_coefficients(model, pd)
        out["limit"] = {"b": lc.b, "c": lc.c, "delta": lc.delta}
    if args.json:
        _emit(out, "analyze")
    else:
        np.set_printoptions(precision=6, suppress=True)
        print(f"model           {model.name} (p={model.p}, id {model.model_id[:12]})")
        print(f"classification  {label} (rho = {pd.rho:.12g})")
        print(f"u               {pd.u}")
        print(f"v               {pd.v}")
        print(f"Pi\n{pd.pi}")
        print(f"rate constants  c = {pd.c_rate:.6g}, r = {pd.r_rate:.6g}")
        if out["limit"]:
            lim = out["limit"]
            delta = "undefined" if lim["delta"] is None else f"{lim['delta']:.12g}"
            print(f"limit           b = {lim['b']:.12g}, c = {lim['c']:.12g}, delta = {delta}")
    if args.require_critical and label != "critical":
        raise _AssertionFailed(f"model is {label}, not critical")


# -- simulate ------------------------------------------------------------------


def cmd_simulate(args):
    from .simulator import initial_states, simulate_ensemble, write_trajectories_csv

    model = _model(args)
    seed = resolve_seed(args.seed)
    if args.x0 is not None:
        if len(args.x0) != model.p or any(x < 0 or x != int(x) for x in args.x0):
            raise InvalidInputError(f"--x0 must be {model.p} nonnegative integers")
        X0 = np.asarray(args.x0, dtype=np.int64)
    else:
        X0 = initial_states(model, args.n, args.reps, seed, label="cli-init")
    if args.out:
        _open_out(args.out)
    ens = simulate_ensemble(model, X0, args.k, args.reps, seed, label="cli-simulate",
                            jobs=args.jobs)
    if args.out:
        write_trajectories_csv(args.out, ens)
    final = ens[:, -1, :].astype(float)
    summary = {
        "meta": _meta(args, model),
        "K": int(args.k), "reps": int(args.reps),
        "final_mean": final.mean(axis=0).tolist(),
        "final_var": (final.var(axis=0, ddof=1) if args.reps > 1
                      else np.zeros(model.p)).tolist(),
        "out": args.out,
    }
    if args.json:
        _emit(summary, "simulate")
    else:
        print(f"simulated {args.reps} x {args.k} steps of {model.name}; "
              f"final mean {np.round(final.mean(axis=0), 6)}"
              + (f"; wrote {args.out}" if args.out else ""))


# -- moments -------------------------------------------------------------------


def cmd_moments(args):
    from .moments import exact_variance, moment_table, write_moment_csv

    model = _model(args)
    mean0 = np.zeros(model.p) if args.x0 is None else np.asarray(args.x0, dtype=float)
    if mean0.shape != (model.p,):
        raise InvalidInputError(f"--x0 must have {model.p} entries")
    cov0 = np.zeros((model.p, model.p))
    rows = moment_table(model, mean0, cov0, args.k)
    # cross-check the recursion against the closed form at the final index
    exact_variance(model, mean0, cov0, args.k)
    if args.out:
        write_moment_csv(_open_out(args.out), rows)
    out = {
        "meta": _meta(args, model),
        "rows": [{"k": r.k, "mean": r.mean.tolist(), "cov": r.cov.tolist()} for r in rows],
    }
    if args.json:
        _emit(out, "moments")
    else:
        last = rows[-1]
        print(f"k = {last.k}")
        print(f"mean = {np.array2string(last.mean, precision=12)}")
        print(f"variance =\n{np.array2string(last.cov, precision=12)}")


# -- sde -------------------------------------------------------------------------


def cmd_sde(args):
    from .sde import SdeConfig, cir_ensemble, simulate_cir

    if args.model is not None and (args.b is None or args.c is None):
        model = _model(args)
        lc = limit_coefficients(model)
        b = lc.b if args.b is None else args.b
        c = lc.c if args.c is None else args.c
    else:
        model = None
        b = 1.0 if args.b is None else args.b
        c = 1.0 if args.c is None else args.c
    x0 = 0.0 if args.x0 is None else float(args.x0[0])
    seed = resolve_seed(args.seed)
    cfg = SdeConfig(dt=args.dt, t_max=args.t_max, seed=seed)
    out = {"meta": _meta(args, model), "b": b, "c": c, "x0": x0, "dt": cfg.dt,
           "t_max": cfg.t_max}
    if args.reps == 1:
        path = simulate_cir(b, c, x0, cfg)
        if args.out:
            import csv

            with open(_open_out(args.out), "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\r\n")
                w.writerow(["t", "value"])
                for t, x in zip(path.times, path.values):
                    w.writerow([repr(float(t)), repr(float(x))])
        out.update(reps=1, terminal=float(path.values[-1]), min=float(path.values.min()))
        text = f"terminal value {path.values[-1]:.12g}"
    else:
        vals = cir_ensemble(b, c, x0, cfg, args.reps, jobs=args.jobs)[:, 0]
        if args.out:
            np.savetxt(_open_out(args.out), vals, header="value", comments="",
                       fmt="%.17g", newline="\r\n")
        mean = float(vals.mean())
        out.update(reps=int(args.reps), terminal_mean=mean,
                   terminal_var=float(vals.var(ddof=1)),
                   terminal_se=float(vals.std(ddof=1) / np.sqrt(args.reps)),
                   min=float(vals.min()))
        text = f"terminal mean {mean:.6g} (se {out['terminal_se']:.3g}) over {args.reps} paths"
    if args.json:
        _emit(out, "sde")
    else:
        print(text)


# -- converge -------------------------------------------------------------------


DEFAULT_PLAN = {"n_list": [100, 400, 1600], "t_list": [0.5, 1.0], "N": 2000, "dt": 1e-3,
                "thetas": [0.1, 1.0]}


def _load_plan(args, model):
    from .harness import ExperimentPlan

    cfg = dict(DEFAULT_PLAN)
    if args.plan not in (None, "default"):
        with open(args.plan, encoding="utf-8") as fh:
            user = json.load(fh)
        try:
            jsonschema.validate(user, load_schema("plan"))
        except jsonschema.ValidationError as err:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            raise InvalidInputError(f"{args.plan}: at {where}: {err.message}") from None
        cfg.update(user)
    if args.n is not None:
        cfg["n_list"] = args.n
    if args.t is not None:
        cfg["t_list"] = args.t
    if args.reps is not None:
        cfg["N"] = args.reps
    if args.dt is not None:
        cfg["dt"] = args.dt
    initial = None
    if args.initial_ray is not None:
        initial = InitialState(kind="ray", law={"kind": "point", "value": args.initial_ray})
    return ExperimentPlan(
        model=model,
        n_list=tuple(int(n) for n in cfg["n_list"]),
        t_list=tuple(float(t) for t in cfg["t_list"]),
        N=int(cfg["N"]),
        seed=resolve_seed(args.seed),
        dt=float(cfg["dt"]),
        thetas=tuple(float(x) for x in cfg.get("thetas", DEFAULT_PLAN["thetas"])),
        checks=tuple(cfg.get("checks", ("ray", "marginal", "conditions", "centered"))),
        initial=initial,
        jobs=args.jobs,
    )


def cmd_converge(args):
    from .harness import dumps_report, run_report, write_cells_csv

    model = _model(args)
    plan = _load_plan(args, model)
    for path in (args.out, args.csv):
        if path:
            _open_out(path)
    t0 = time.perf_counter()
    report = run_report(plan)
    # wall time stays out of the report so reruns are byte-identical
    print(f"critbranch: converge finished in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    jsonschema.validate(report, load_schema("report"))
    text = dumps_report(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    if args.csv:
        write_cells_csv(args.csv, report)
    if args.json:
        sys.stdout.write(text)
    else:
        for key in ("ray_concentration", "marginal_convergence", "condition_checks",
                    "centered_convergence"):
            for a in report.get(key, {}).get("assertions", []):
                print(f"{'PASS' if a['passed'] else 'FAIL'}  {a['name']}")
        print("overall: " + ("PASS" if report["passed"] else "FAIL"))
    if not report["passed"]:
        raise _AssertionFailed("one or more convergence checks failed")


# -- parser ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="critbranch",
        description="Critical multi-type branching processes with immigration and "
                    "their CIR diffusion limit.",
        epilog=f"Built-in models: {', '.join(BUILTIN_MODELS)}. "
               f"Master seed: --seed, else ${SEED_ENV}, else the package default.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_required=True):
        p.add_argument("--model", required=model_required,
                       help="model config JSON file or built-in name")
        p.add_argument("--seed", type=int, default=None,
                       help=f"master seed (default: ${SEED_ENV} or package default)")
        p.add_argument("--json", action="store_true", help="print machine-readable JSON")
        p.add_argument("--out", default=None, help="output file path")
        p.add_argument("--jobs", type=int, default=_default_jobs(),
                       help="worker threads (default: logical cores)")

    p = sub.add_parser("analyze", help="Perron data, criticality and limit coefficients")
    common(p)
    p.add_argument("--require-critical", action="store_true",
                   help="exit with status 2 unless the model is critical")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="simulate an ensemble of trajectories to CSV")
    common(p)
    p.add_argument("--k", type=int, default=100, help="number of steps K (default 100)")
    p.add_argument("--reps", type=int, default=1, help="replicates (default 1)")
    p.add_argument("--n", type=int, default=1,
                   help="scaling index for the model's initial-state setting (default 1)")
    p.add_argument("--x0", type=_floats, default=None,
                   help="initial state, comma separated (overrides the model's)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("moments", help="exact mean and variance for k = 0..K")
    common(p)
    p.add_argument("--k", type=int, default=10, help="largest index (default 10)")
    p.add_argument("--x0", type=_floats, default=None,
                   help="initial mean (deterministic start), default 0")
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("sde", help="full-truncation Euler paths of dX = b dt + sqrt(cX) dW")
    common(p, model_required=False)
    p.add_argument("--b", type=float, default=None, help="drift (default: model's b, else 1)")
    p.add_argument("--c", type=float, default=None,
                   help="diffusion coefficient (default: model's c, else 1)")
    p.add_argument("--x0", type=_floats, default=None, help="initial value (default 0)")
    p.add_argument("--dt", type=float, default=1e-3, help="step size (default 1e-3)")
    p.add_argument("--t-max", type=float, default=1.0, help="horizon (default 1)")
    p.add_argument("--reps", type=int, default=1,
                   help="paths; with more than one, terminal values are written")
    p.set_defaults(func=cmd_sde)

    p = sub.add_parser("converge", help="run the empirical convergence report")
    common(p)
    p.add_argument("--plan", default="default",
                   help="'default' or a plan JSON file (n_list, t_list, N, dt, thetas, checks)")
    p.add_argument("--n", type=_ints, default=None, help="override n_list, comma separated")
    p.add_argument("--t", type=_floats, default=None, help="override t_list, comma separated")
    p.add_argument("--reps", type=int, default=None, help="override replicates N")
    p.add_argument("--dt", type=float, default=None, help="override the SDE step")
    p.add_argument("--initial-ray", type=float, default=None,
                   help="start every run at round(n * VALUE * u)")
    p.add_argument("--csv", default=None, help="per-cell CSV output path")
    p.set_defaults(func=cmd_converge)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "reps", None) is not None and args.reps < 1:
            raise InvalidInputError("--reps must be positive")
        args.func(args)
    except _AssertionFailed as exc:
        print(f"critbranch: assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (CritBranchError, ValueError, OSError, ArithmeticError, RuntimeError,
            jsonschema.ValidationError) as exc:
        print(f"critbranch: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
