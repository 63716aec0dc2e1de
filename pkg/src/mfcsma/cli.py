"""Command-line front end: ``mfcsma {stationary,ode,simulate,sweep,check}``.

Exit codes: 0 success, 1 configuration error, 2 solver non-convergence,
3 infeasible parameters, 4 numerical blow-up during integration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import envchain, meanfield, simulator, stationary
from .model import NetworkSpec, SpecError, load_spec, point_mass_mixture, validate_spec

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_INFEASIBLE, EXIT_BLOWUP = 0, 1, 2, 3, 4
THREADS_ENV = "MFCSMA_THREADS"
SWEEP_COLUMNS = ["param_value", "method", "class", "gamma", "gamma_per_user", "rho", "status"]
SWEEP_PARAMS = ("mu2", "L", "p0", "N")
METHODS = ("fixedpoint", "ode", "simulate")


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def fmt(x) -> str:
    """Twelve significant digits, the format used for every emitted number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".12g")


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if not math.isfinite(x) else float(format(x, ".12g"))
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


def dumps_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def _emit(args, text: str, path=None) -> None:
    target = path if path is not None else args.out
    if target:
        Path(target).write_text(text)
    elif not args.quiet:
        sys.stdout.write(text)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load(args) -> NetworkSpec:
    if not args.config:
        raise CLIError("--config is required")
    try:
        return load_spec(Path(args.config))
    except SpecError as exc:
        raise CLIError(f"config error: {exc}") from exc


def _fixed_point(spec: NetworkSpec, **kw) -> stationary.FixedPointResult:
    try:
        return stationary.solve_fixed_point(spec, **kw)
    except stationary.ConvergenceError as exc:
        raise CLIError(str(exc), EXIT_NONCONV) from exc
    except stationary.InfeasibleError as exc:
        raise CLIError(str(exc), EXIT_INFEASIBLE) from exc


def _per_class_ratio(spec: NetworkSpec, gamma) -> float | None:
    mu = spec.mu_array
    if spec.n_classes < 2 or mu[0] <= 0 or mu[1] <= 0 or gamma[1] <= 0:
        return None
    return float((gamma[0] / mu[0]) / (gamma[1] / mu[1]))


# -- stationary ---------------------------------------------------------------

def cmd_stationary(args) -> int:
    spec = _load(args)
    if args.closed_form:
        if spec.n_classes != 1:
            raise CLIError("--closed-form applies to a single full-interference class")
        try:
            rho, Q = stationary.closed_form_full_interference(spec.p0, spec.n_max)
        except stationary.InfeasibleError as exc:
            raise CLIError(f"{exc} (the closed form requires p0 < ln 2)", EXIT_INFEASIBLE) from exc
        out = {"rho": [rho], "Q": [Q.tolist()],
               "residual": abs(spec.p0 * math.exp(rho) + rho - 2 * spec.p0)}
        if args.format == "csv":
            _emit(args, dumps_csv(["class", "rho"], [[spec.classes[0], rho]]))
        else:
            _emit(args, dumps_json(out))
        return EXIT_OK

    res = _fixed_point(spec, tol=args.tol, max_iter=args.max_iter, damping=args.damping,
                       probes=args.probes)
    if args.dump_kernel:
        d = Path(args.dump_kernel)
        d.mkdir(parents=True, exist_ok=True)
        K = envchain.build_kernel(res.rho, spec)
        envchain.write_kernel_csv(K, d / "kernel.csv")
        envchain.write_stationary_csv(res.pi, K.states, d / "pi.csv")
    if args.format == "csv":
        gpu = res.gamma_per_user
        rows = [[spec.classes[c], res.rho[c], res.G[c], res.H[c], res.I[c], res.gamma[c],
                 gpu[c], res.gamma[c] / spec.L] for c in range(spec.n_classes)]
        _emit(args, dumps_csv(["class", "rho", "G", "H", "I", "gamma", "gamma_per_user",
                               "packets_per_slot"], rows))
    else:
        out = res.to_dict(spec.L)
        out["classes"] = list(spec.classes)
        ratio = _per_class_ratio(spec, res.gamma)
        if ratio is not None:
            out["ratio"] = ratio
        _emit(args, dumps_json(out))
    return EXIT_OK


# -- ode ----------------------------------------------------------------------

def _initial(spec: NetworkSpec, init: str) -> np.ndarray:
    if init == "level0":
        return point_mass_mixture(spec)
    if init == "fixedpoint":
        return _fixed_point(spec, probes=0).Q
    try:
        q = np.asarray(json.loads(Path(init).read_text()), dtype=float)
    except (OSError, ValueError) as exc:
        raise CLIError(f"cannot read initial mixture {init!r}: {exc}") from exc
    if q.shape != (spec.n_classes, spec.n_levels):
        raise CLIError(f"initial mixture must have shape ({spec.n_classes}, {spec.n_levels})")
    return q


def cmd_ode(args) -> int:
    spec = _load(args)
    q0 = _initial(spec, args.init)
    dt = args.dt if args.dt is not None else min(1.0, 0.1 / spec.p0)
    try:
        traj = meanfield.integrate(q0, spec, args.T, dt=dt, record_every=args.record_every)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    except meanfield.IntegrationError as exc:
        raise CLIError(str(exc), EXIT_BLOWUP) from exc

    rhos = traj.rho(spec)
    header = ["t", "class", "rho"] + [f"q{n}" for n in range(spec.n_levels)]
    rows = []
    for k, t in enumerate(traj.t):
        for c in range(spec.n_classes):
            rows.append([t, spec.classes[c], rhos[k, c], *traj.Q[k, c]])
    _emit(args, dumps_csv(header, rows))

    summary = {"T": args.T, "dt": dt, "recorded_points": len(traj.t), "max_drift": traj.max_drift,
               "clamped": traj.clamped, "rho_final": rhos[-1].tolist()}
    try:
        fp = stationary.solve_fixed_point(spec, probes=0)
        tv = [meanfield.total_variation(traj.final[c], fp.Q[c]) for c in range(spec.n_classes)]
        summary["tv_to_fixed_point"] = tv
        summary["converged"] = max(tv) < args.tv_tol
    except (stationary.ConvergenceError, stationary.InfeasibleError):
        summary["tv_to_fixed_point"] = None
        summary["converged"] = None
    if args.summary:
        Path(args.summary).write_text(dumps_json(summary))
    elif not args.quiet and args.out:
        sys.stdout.write(dumps_json(summary))
    return EXIT_OK


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = _load(args)
    if args.N < 1:
        raise CLIError("--N must be >= 1")
    try:
        state = simulator.Simulation(spec, args.N, args.seed, assignment=args.assignment,
                                     record_series=bool(args.series))
        rep = simulator.run(state, args.T, args.burnin)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    out = rep.to_dict()
    out["classes"] = list(spec.classes)
    if args.compare:
        fp = _fixed_point(spec, probes=0)
        out["compare"] = {
            "gamma_fixed_point": fp.gamma.tolist(),
            "gamma_delta": (rep.throughput - fp.gamma).tolist(),
            "rho_fixed_point": fp.rho.tolist(),
            "rho_delta": (rep.rho_hat - fp.rho).tolist(),
        }
    if args.format == "csv":
        gpu = rep.throughput_per_user
        rows = [[args.seed, spec.classes[c], rep.class_sizes[c], rep.throughput[c], gpu[c],
                 rep.rho_hat[c], rep.attempts[c], rep.successes[c], rep.collisions[c]]
                for c in range(spec.n_classes)]
        _emit(args, dumps_csv(["seed", "class", "users", "gamma", "gamma_per_user", "rho",
                               "attempts", "successes", "collisions"], rows))
    else:
        _emit(args, dumps_json(out))
    if args.series:
        header = ["seed", "slot"] + [f"z_{c}" for c in spec.classes]
        rows = [[args.seed, slot, *z] for slot, z in rep.strided_series(args.stride)]
        Path(args.series).write_text(dumps_csv(header, rows))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

def parse_grid(text: str) -> list[float]:
    """``a:b:n`` (n evenly spaced points) or a comma list; returned sorted."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CLIError(f"grid {text!r}: expected a:b:n")
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
        if n < 1:
            return []
        vals = [a] if n == 1 else np.linspace(a, b, n).tolist()
    else:
        vals = [float(v) for v in text.split(",") if v.strip()]
    return sorted(vals)


def _swept_spec(base: NetworkSpec, param: str, value: float) -> NetworkSpec:
    if param == "mu2":
        if base.n_classes != 3:
            raise CLIError("mu2 sweeps need a three-class spec")
        if not 0.0 <= value <= 1.0:
            raise SpecError(f"mu2={value} outside [0, 1]")
        side = (1.0 - value) / 2.0
        return base.with_mu([side, value, side])
    if param == "L":
        return base.replace(L=value, Lc=value)
    if param == "p0":
        return base.replace(p0=value)
    return base


def _sweep_point(base, param, value, methods, opts) -> list[list]:
    rows = []
    try:
        spec = _swept_spec(base, param, value)
    except SpecError as exc:
        return [[value, m, "", float("nan"), float("nan"), float("nan"),
                 f"config: {exc}"] for m in methods]
    for method in methods:
        try:
            if method == "fixedpoint":
                fp = stationary.solve_fixed_point(spec, probes=0)
                gamma, rho = fp.gamma, fp.rho
            elif method == "ode":
                dt = min(1.0, 0.1 / spec.p0)
                traj = meanfield.integrate(point_mass_mixture(spec), spec, opts.T, dt=dt,
                                           record_every=10 ** 9)
                rho = traj.rho(spec)[-1]
                K = envchain.build_kernel(rho, spec)
                gamma = stationary.throughput(envchain.stationary_dist(K), rho, spec)
            else:
                N = int(value) if param == "N" else opts.N
                reps = [simulator.simulate(spec, N, opts.T, seed=opts.seed + s, burnin=opts.burnin)
                        for s in range(opts.seeds)]
                gamma = np.mean([r.throughput for r in reps], axis=0)
                rho = np.mean([r.rho_hat for r in reps], axis=0)
            status = "ok"
        except stationary.ConvergenceError:
            gamma = rho = np.full(spec.n_classes, np.nan)
            status = "nonconvergence"
        except stationary.InfeasibleError:
            gamma = rho = np.full(spec.n_classes, np.nan)
            status = "infeasible"
        except meanfield.IntegrationError:
            gamma = rho = np.full(spec.n_classes, np.nan)
            status = "blowup"
        mu = spec.mu_array
        for c in range(spec.n_classes):
            gpu = gamma[c] / mu[c] if mu[c] > 0 else float("nan")
            rows.append([value, method, spec.classes[c], gamma[c], gpu, rho[c], status])
    return rows


def run_sweep(base: NetworkSpec, param: str, grid, methods, opts) -> list[list]:
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        chunks = list(pool.map(lambda v: _sweep_point(base, param, v, methods, opts), grid))
    rows = [r for chunk in chunks for r in chunk]
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r[0], order[r[1]], r[2]))
    return rows


def gnuplot_script(csv_path: str, param: str) -> str:
    return "\n".join([
        "set datafile separator ','",
        f"set xlabel '{param}'",
        "set ylabel 'throughput per user'",
        "set key outside",
        f"plot for [c in system(\"tail -n +2 {csv_path} | cut -d, -f3 | sort -u\")] \\",
        f"  '< grep \",fixedpoint,'.c.',\" {csv_path}' using 1:5 with linespoints title 'class '.c",
        "",
    ])


def cmd_sweep(args) -> int:
    base = _load(args)
    grid = parse_grid(args.grid)
    if not grid:
        raise CLIError("empty grid")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise CLIError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if args.param == "N" and any(v < 1 or not float(v).is_integer() for v in grid):
        raise CLIError("N grid must hold positive integers")
    rows = run_sweep(base, args.param, grid, methods, args)
    _emit(args, dumps_csv(SWEEP_COLUMNS, rows))
    if args.gnuplot:
        Path(args.gnuplot).write_text(gnuplot_script(args.out or "sweep.csv", args.param))
    return EXIT_OK


# -- check --------------------------------------------------------------------

def cmd_check(args) -> int:
    spec = _load(args)
    violations = validate_spec(spec)
    report = {"valid": not violations, "violations": violations}
    ok = not violations
    if ok:
        try:
            dom = envchain.domination_check(spec)
            report["domination"] = dom.to_dict()
            ok = dom.passed
        except envchain.StateSpaceError as exc:
            raise CLIError(str(exc)) from exc
    _emit(args, dumps_json(report))
    return EXIT_OK if ok else EXIT_CONFIG


# -- entry point --------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # the flags are accepted before or after the subcommand; the subcommand
    # copies must not reset values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="network spec (JSON)")
    parser.add_argument("--out", default=d(None),
                        help="write the main output here instead of stdout")
    parser.add_argument("--format", choices=("json", "csv"), default=d("json"))
    parser.add_argument("--quiet", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="mfcsma", description="Mean-field CSMA backoff analysis")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stationary", parents=[common], help="solve the fixed point")
    s.add_argument("--tol", type=float, default=1e-13)
    s.add_argument("--max-iter", type=int, default=5000)
    s.add_argument("--damping", type=float, default=0.5)
    s.add_argument("--probes", type=int, default=5, help="random restarts checking uniqueness")
    s.add_argument("--closed-form", action="store_true",
                   help="single full-interference class: solve the scalar root equation")
    s.add_argument("--dump-kernel", metavar="DIR", help="write kernel.csv and pi.csv")
    s.set_defaults(func=cmd_stationary)

    o = sub.add_parser("ode", parents=[common], help="integrate the mean-field ODE")
    o.add_argument("--T", type=float, default=2000.0)
    o.add_argument("--dt", type=float)
    o.add_argument("--init", default="level0", help="level0, fixedpoint or a JSON file")
    o.add_argument("--record-every", type=int, default=100)
    o.add_argument("--summary", help="write the summary JSON here")
    o.add_argument("--tv-tol", type=float, default=1e-6)
    o.set_defaults(func=cmd_ode)

    m = sub.add_parser("simulate", parents=[common], help="finite-N simulation")
    m.add_argument("--N", type=int, default=200)
    m.add_argument("--T", type=float, default=500.0, help="horizon in units of N slots")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--burnin", type=float, default=0.2)
    m.add_argument("--assignment", choices=("deterministic", "iid"), default="deterministic")
    m.add_argument("--compare", action="store_true", help="add deltas against the fixed point")
    m.add_argument("--series", help="write the per-slot channel states as CSV")
    m.add_argument("--stride", type=int, default=1)
    m.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", parents=[common], help="parameter sweep to long-form CSV")
    w.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    w.add_argument("--grid", required=True, help="a:b:n or comma list")
    w.add_argument("--methods", default="fixedpoint")
    w.add_argument("--T", type=float, default=500.0)
    w.add_argument("--N", type=int, default=200)
    w.add_argument("--seeds", type=int, default=1)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--burnin", type=float, default=0.2)
    w.add_argument("--gnuplot", help="write a gnuplot script for the sweep CSV")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", parents=[common], help="validate spec and chain assumptions")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"mfcsma: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
