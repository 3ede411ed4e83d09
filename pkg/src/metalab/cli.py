"""Command line interface: ``metalab <command> [options]``.

Every run writes ``summary.json``, CSV artifacts and a ``manifest.json``
recording the arguments, the model document and the code version. A run is
repeated bit for bit with ``metalab rerun <dir>/manifest.json``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 assumption failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shlex
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, meta
from .coeffs import check_assumptions, coefficients
from .errors import AssumptionFailure, AssumptionWarning, NumericalFailure, SchemaError
from .expr import Expression
from .grids import default_grid
from .schema import load_document, model_from_document, resolve_model_path, warn_failed
from .sim import ENV_WORKERS, SimConfig
from .spectral import discretize_generator, solve_model, solve_surface, stationary_measure

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ASSUMPTION = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line or inconsistent parameters."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _matrix(text):
    try:
        rows = [[float(v) for v in row.replace(",", " ").split()] for row in text.split(";")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected rows like '0 1;1 0', got {text!r}") from exc
    if len({len(r) for r in rows}) != 1:
        raise argparse.ArgumentTypeError("matrix rows have different lengths")
    return rows


def git_describe():
    """``git describe`` of the source tree, or ``"unknown"`` outside a repository."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _jsonable(obj):
    return meta._jsonable(obj)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ----------------------------------------------------------------------------
# argument parsing


def _add_model(p):
    p.add_argument("--model", required=True, help="model JSON file or bundled model name (e.g. model_a)")


def _add_sim(p, eps=True, n_traj=1000, dt=1e-3, t_max=100.0):
    g = p.add_argument_group("simulation")
    if eps:
        g.add_argument("--eps", type=float, default=0.0, help="perturbation size")
    g.add_argument("--n-traj", type=int, default=n_traj)
    g.add_argument("--dt", type=float, default=dt)
    g.add_argument("--t-max", type=float, default=t_max)
    g.add_argument("--scheme", choices=["heun", "euler"], default="heun")
    g.add_argument("--adaptive", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--chunk", type=int, default=4096, help="trajectories per vectorized batch")


def _add_common(p):
    p.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help=f"process count; {ENV_WORKERS} overrides")
    p.add_argument("--events", action="store_true", help="also write raw per-trajectory event CSVs")


def build_parser():
    parser = _Parser(prog="metalab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"metalab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("check", help="check the structural assumptions of a model")
    _add_model(p)
    _add_common(p)
    p.add_argument("--samples", type=int, default=1000)

    p = sub.add_parser("gamma", help="solve for the scaling exponent of each surface")
    _add_model(p)
    _add_common(p)
    p.add_argument("--surface", type=int, default=None)
    p.add_argument("--grid", type=int, default=None, help="grid size per axis")

    p = sub.add_parser("stationary", help="invariant measure of the angular generator and local coefficients")
    _add_model(p)
    _add_common(p)
    p.add_argument("--surface", type=int, default=0)
    p.add_argument("--grid", type=int, default=None)

    p = sub.add_parser("exit-prob", help="two-sided exit frequency between level sets")
    _add_model(p)
    _add_common(p)
    _add_sim(p, dt=1e-4, t_max=50.0, n_traj=10_000)
    p.add_argument("--surface", type=int, default=0)
    p.add_argument("--zeta", type=float, required=True)
    p.add_argument("--kappa1", type=float, required=True)
    p.add_argument("--kappa2", type=float, required=True)
    p.add_argument("--r", type=float, default=None, help="require kappa1 >= r * eps")

    p = sub.add_parser("exit-time", help="mean exit time against eps with a scaling fit")
    _add_model(p)
    _add_common(p)
    _add_sim(p, eps=False, dt=1e-2, t_max=20_000.0, n_traj=2000)
    p.add_argument("--surface", type=int, default=0)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--eps-list", type=_floats, required=True)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--start-fraction", type=float, default=None)

    p = sub.add_parser("qmatrix", help="transition frequencies between attracting surfaces")
    _add_model(p)
    _add_common(p)
    _add_sim(p, eps=False, dt=1e-3, t_max=2000.0, n_traj=1000)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--r", type=float, default=2.0)
    p.add_argument("--no-halving", action="store_true")

    p = sub.add_parser("chain", help="hitting distribution of the embedded chain")
    _add_common(p)
    p.add_argument("--gammas", type=_floats, required=True)
    p.add_argument("--q", type=_matrix, required=True, help="rows separated by ';', e.g. '0 1;1 0'")
    p.add_argument("--p0", type=_floats, required=True)
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--simulate", type=int, default=0, help="also simulate the chain this many times")

    p = sub.add_parser("px", help="first-entry weights over attracting surfaces")
    _add_model(p)
    _add_common(p)
    _add_sim(p, dt=1e-3, t_max=200.0, n_traj=2000)
    p.add_argument("--x", type=_floats, required=True)
    p.add_argument("--kappa-probe", type=float, default=meta.KAPPA_PROBE)
    p.add_argument("--r", type=float, default=2.0)
    p.add_argument("--sensitivity", action="store_true")

    p = sub.add_parser("metastable", help="endpoint law at one time or in every time-scale window")
    _add_model(p)
    _add_common(p)
    _add_sim(p, dt=1e-3, t_max=100.0, n_traj=2000)
    p.add_argument("--x", type=_floats, required=True)
    p.add_argument("--t", type=float, default=None, help="time; default: representative time of --window")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--kappa-report", type=float, default=meta.KAPPA_REPORT)
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("invariant", help="long-run occupation of the unperturbed process")
    _add_model(p)
    _add_common(p)
    _add_sim(p, eps=False, dt=1e-3, t_max=200.0, n_traj=200)
    p.add_argument("--x0", type=_floats, default=None)
    p.add_argument("--burn-in", type=float, default=None)
    p.add_argument("--every", type=float, default=None)
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("cauchy", help="Monte Carlo solution u(t, x) = E g(X_t)")
    _add_model(p)
    _add_common(p)
    _add_sim(p, dt=1e-3, t_max=100.0, n_traj=2000)
    p.add_argument("--g", required=True, help="expression in x1..xd, e.g. 'tanh(4*x1)'")
    p.add_argument("--x", type=_floats, required=True)
    p.add_argument("--t", type=float, required=True)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    return parser


# ----------------------------------------------------------------------------
# helpers shared by commands


class Run:
    """Output directory plus the bookkeeping every command shares."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out or Path("runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.model_doc = None
        self.model_path = None
        self.assumptions = None
        self.files = []

    def load_model(self, check=True):
        """Validate and build the model; failed assumption checks are printed as warnings."""
        path = resolve_model_path(self.args.model)
        self.model_path = str(path)
        self.model_doc = load_document(path)
        model = model_from_document(self.model_doc)
        if check:
            report = check_assumptions(model)
            warn_failed(report)
            self.assumptions = report.to_dict()
        return model

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def sim_config(self, eps=None):
        a = self.args
        return SimConfig(eps=a.eps if eps is None else eps, dt=a.dt, t_max=a.t_max, scheme=a.scheme, seed=a.seed,
                         n_traj=a.n_traj, adaptive=a.adaptive, workers=a.workers, chunk=a.chunk)

    def dump_events(self, record):
        if not self.args.events:
            return
        for label, res in record:
            res.to_csv(self.path(f"events_{label}.csv"))

    def finish(self, summary):
        write_json(self.path("summary.json"), summary)
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "args": {k: v for k, v in vars(self.args).items()},
            "model_path": self.model_path,
            "model": self.model_doc,
            "assumptions": self.assumptions,
            "version": __version__,
            "git": git_describe(),
            "workers_env": os.environ.get(ENV_WORKERS),
            "files": sorted(set(self.files)),
        }
        write_json(self.out / "manifest.json", manifest)


def _surfaces(model, surface):
    if surface is None:
        return list(range(len(model.surfaces)))
    if not 0 <= surface < len(model.surfaces):
        raise UsageError(f"surface {surface} does not exist (model has {len(model.surfaces)})")
    return [surface]


def _grid(model, sid, n):
    surf = model.surfaces[sid]
    return default_grid(surf, n) if n else default_grid(surf)


def _fmt(v):
    """Twelve significant digits; whole numbers keep a trailing ``.0``."""
    text = f"{v:.12g}"
    return text if any(c in text for c in ".eni") else text + ".0"


# ----------------------------------------------------------------------------
# commands


def cmd_check(run):
    model = run.load_model(check=False)
    report = check_assumptions(model, n_samples=run.args.samples)
    print(report)
    run.finish({"model": model.name, "passed": report.passed, "assumptions": report.to_dict()})
    return EXIT_OK if report.passed else EXIT_ASSUMPTION


def cmd_gamma(run):
    model = run.load_model()
    out = []
    for sid in _surfaces(model, run.args.surface):
        sol = solve_surface(model, sid, _grid(model, sid, run.args.grid))
        sol.to_csv(run.path(f"spectral_surface_{sid}.csv"))
        write_rows(run.path(f"lambda_curve_surface_{sid}.csv"), ["gamma", "lambda"], sol.lambda_curve)
        print(f"surface {sid}: gamma = {_fmt(sol.gamma)}, classification {sol.classification}")
        out.append(sol.summary())
    run.finish({"model": model.name, "surfaces": out})
    return EXIT_OK


def cmd_stationary(run):
    model = run.load_model()
    sid = _surfaces(model, run.args.surface)[0]
    grid = _grid(model, sid, run.args.grid)
    co = coefficients(model, sid, grid)
    co.to_csv(run.path(f"coefficients_surface_{sid}.csv"))
    pi = stationary_measure(discretize_generator(co, 0.0, potential=False))
    nodes = grid.nodes
    write_rows(run.path(f"stationary_surface_{sid}.csv"), [f"y{j + 1}" for j in range(nodes.shape[1])] + ["pi"],
               [list(r) + [p] for r, p in zip(nodes, pi)])
    abar, bbar = float(np.dot(co.alpha, pi)), float(np.dot(co.beta, pi))
    print(f"surface {sid}: alpha_bar = {_fmt(abar)}, beta_bar = {_fmt(bbar)}, min pi = {_fmt(pi.min())}")
    run.finish({"surface_id": sid, "alpha_bar": abar, "beta_bar": bbar, "pi_min": float(pi.min()),
                "pi_max": float(pi.max()), "grid": list(grid.shape)})
    return EXIT_OK


def cmd_exit_prob(run):
    a = run.args
    if not a.kappa1 < a.zeta < a.kappa2 and a.zeta not in (a.kappa1, a.kappa2):
        raise UsageError(f"--zeta {a.zeta} must lie in [--kappa1, --kappa2] = [{a.kappa1}, {a.kappa2}]")
    model = run.load_model()
    _surfaces(model, a.surface)
    record = []
    est = meta.estimate_exit_prob(model, a.surface, a.zeta, a.kappa1, a.kappa2, a.eps, run.sim_config(), r=a.r,
                                  record=record)
    run.dump_events(record)
    est.to_json(run.path("exit_prob.json"))
    write_rows(run.path("plot_exit_prob.csv"), ["zeta", "p_hat", "stderr", "predicted"],
               [[est.zeta, est.p_hat, est.stderr, est.predicted]])
    print(f"P(hit kappa2 first) = {_fmt(est.p_hat)} +/- {_fmt(est.stderr)}; predicted {_fmt(est.predicted)} "
          f"(gamma = {_fmt(est.gamma)}, n = {est.n_traj})")
    run.finish(est.to_dict())
    return EXIT_OK


def cmd_exit_time(run):
    a = run.args
    model = run.load_model()
    _surfaces(model, a.surface)
    record = []
    stats = meta.estimate_exit_time_scaling(model, a.surface, a.kappa, a.eps_list, run.sim_config(eps=0.0), r=a.r,
                                            start_fraction=a.start_fraction, record=record)
    run.dump_events(record)
    stats.to_csv(run.path("exit_time.csv"))
    xs = [math.log(1 / e) for e in stats.eps]
    ys, es = (stats.mean, stats.stderr)
    if stats.fit == "power":
        ys = [math.log(m) for m in stats.mean]
        es = [s / m for s, m in zip(stats.stderr, stats.mean)]
    write_rows(run.path("plot_exit_time.csv"), ["log_inv_eps", "y", "yerr"], zip(xs, ys, es))
    lo, hi = stats.slope_ci
    print(f"fit {stats.fit}: slope = {_fmt(stats.slope)} (95% CI {_fmt(lo)} .. {_fmt(hi)}), "
          f"R^2 = {_fmt(stats.r_squared)}, gamma = {_fmt(stats.gamma)}")
    run.finish(stats.to_dict())
    return EXIT_OK


def cmd_qmatrix(run):
    a = run.args
    model = run.load_model()
    record = []
    est = meta.estimate_qmatrix(model, a.eps, a.r, run.sim_config(eps=a.eps), halving=not a.no_halving,
                                record=record)
    run.dump_events(record)
    est.to_csv(run.path("qmatrix.csv"))
    print(f"surfaces {est.surfaces}")
    for row in est.q:
        print("  " + " ".join(f"{v:.4f}" for v in row))
    print(f"eps-halving drift {_fmt(est.drift)}, converged {est.converged}")
    run.finish(est.to_dict())
    return EXIT_OK


def cmd_chain(run):
    a = run.args
    try:
        chain = meta.ChainSpec(a.gammas, a.q, a.p0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        p = meta.chain_hitting_distribution(chain, a.l)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    summary = {"gammas": chain.gammas, "q": chain.q, "p0": chain.p0, "l": a.l, "p": p}
    rows = [[k + 1, w] for k, w in enumerate(p)]
    if a.simulate:
        emp = meta.simulate_chain(chain, a.l, a.simulate, seed=a.seed)
        summary["simulated"] = emp
        summary["simulated_n"] = a.simulate
        rows = [[k + 1, w, e] for k, (w, e) in enumerate(zip(p, emp))]
    write_rows(run.path("chain.csv"), ["state", "p"] + (["simulated"] if a.simulate else []), rows)
    print("(" + ", ".join(_fmt(float(w)) for w in p) + ")")
    run.finish(summary)
    return EXIT_OK


def cmd_px(run):
    a = run.args
    model = run.load_model()
    record = []
    est = meta.estimate_p_x(model, a.x, a.eps, run.sim_config(), kappa_probe=a.kappa_probe, r=a.r,
                            sensitivity=a.sensitivity, record=record)
    run.dump_events(record)
    write_rows(run.path("p_x.csv"), ["surface_id", "weight", "stderr"],
               zip(est.surfaces, est.weights, est.stderr))
    print("weights " + ", ".join(f"surface {s}: {_fmt(w)} +/- {_fmt(e)}"
                                 for s, w, e in zip(est.surfaces, est.weights, est.stderr)))
    run.finish(est.to_dict())
    return EXIT_OK


def cmd_metastable(run):
    a = run.args
    model = run.load_model()
    t = a.t
    if t is None:
        sols = solve_model(model)
        ids = meta.attracting_surfaces(model, sols)
        if not ids:
            raise UsageError("no attracting surface: pass --t explicitly")
        times = meta.window_times([sols[i].gamma for i in ids], a.eps) if a.eps > 0 else []
        if not 1 <= a.window <= len(times):
            raise UsageError(f"--window must lie in 1..{len(times)} (and --eps must be positive)")
        t = times[a.window - 1]
    record = []
    res = meta.metastable_distribution(model, a.x, a.eps, t, run.sim_config(), kappa_report=a.kappa_report,
                                       bins=a.bins, record=record)
    run.dump_events(record)
    res.to_csv(run.path("weights.csv"))
    res.histogram.to_csv(run.path("histogram.csv"))
    print(f"t = {_fmt(t)}: " + ", ".join(f"surface {s}: {_fmt(w)} +/- {_fmt(e)}"
                                         for s, w, e in zip(res.surfaces, res.weights, res.stderr)))
    run.finish(res.to_dict())
    return EXIT_OK


def cmd_invariant(run):
    a = run.args
    model = run.load_model()
    h = meta.unperturbed_invariant_measure(model, run.sim_config(eps=0.0), x0=a.x0, burn_in=a.burn_in,
                                           every=a.every, bins=a.bins)
    h.to_csv(run.path("histogram.csv"))
    print(f"{h.total} samples, mass outside the bins {_fmt(h.outside)}")
    for s, d in h.near_surface.items():
        print(f"  {s}: " + ", ".join(f"z < {k}: {_fmt(v)}" for k, v in d.items()))
    run.finish(h.to_dict())
    return EXIT_OK


def cmd_cauchy(run):
    a = run.args
    model = run.load_model()
    try:
        g = Expression(a.g, model.dim)
    except (ValueError, SyntaxError) as exc:
        raise UsageError(f"bad --g expression: {exc}") from exc
    record = []
    est = meta.feynman_kac(model, g, a.x, a.eps, a.t, run.sim_config(), record=record)
    run.dump_events(record)
    print(f"u({_fmt(a.t)}, x) = {_fmt(est.value)} +/- {_fmt(est.stderr)}")
    run.finish(est.to_dict())
    return EXIT_OK


COMMANDS = {
    "check": cmd_check, "gamma": cmd_gamma, "stationary": cmd_stationary, "exit-prob": cmd_exit_prob,
    "exit-time": cmd_exit_time, "qmatrix": cmd_qmatrix, "chain": cmd_chain, "px": cmd_px,
    "metastable": cmd_metastable, "invariant": cmd_invariant, "cauchy": cmd_cauchy,
}


def rerun_argv(manifest_path, out=None, workers=None):
    """Command line that repeats the run recorded in ``manifest_path``.

    The model document stored in the manifest is written next to the new
    outputs and used in place of the original path.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    argv = list(manifest["argv"])
    out_dir = Path(out) if out else Path(manifest_path).parent / "rerun"
    out_dir.mkdir(parents=True, exist_ok=True)

    def replace(flag, value):
        nonlocal argv
        cleaned = []
        skip = False
        for tok in argv:
            if skip:
                skip = False
                continue
            if tok == flag:
                skip = True
                continue
            if tok.startswith(flag + "="):
                continue
            cleaned.append(tok)
        argv = cleaned + [flag, str(value)]

    if manifest.get("model") is not None:
        model_file = out_dir / "model.json"
        model_file.write_text(json.dumps(manifest["model"], indent=2) + "\n")
        replace("--model", model_file)
    replace("--out", out_dir)
    if workers is not None:
        replace("--workers", workers)
    return argv


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "rerun":
            new = rerun_argv(args.manifest, args.out, args.workers)
            print("rerun: metalab " + " ".join(shlex.quote(t) for t in new))
            return main(new)
        run = Run(args, argv)
        with warnings.catch_warnings():
            warnings.simplefilter("always", AssumptionWarning)
            return COMMANDS[args.command](run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        where = f" at {exc.pointer}" if exc.pointer else ""
        print(f"model error{where}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssumptionFailure as exc:
        print(f"assumption failure: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except NumericalFailure as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
