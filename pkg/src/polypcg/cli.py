"""Command-line front end.

Commands: solve, spectrum, sweep, generate, scale-bench.  Reports are JSON
(stdout, or ``--json``); plot data is CSV.  Exit codes: 0 success, 2 bad
input, 3 non-convergence, 4 inadmissible alpha.

Environment: POLYPCG_THREADS sets the default thread count, POLYPCG_OUTDIR
the directory relative output paths are written to.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dfn import InadmissibleAlphaError, generate_synthetic, load_system, save_system
from .eigest import SpectralBounds, estimate_extremes
from .linop import as_operator
from .pcg import BreakdownError, SolveConfig, write_history_csv
from .polyprec import build_chebyshev, build_newton, preconditioned_spectrum_report
from .solver import PrecondSpec, diagonal_test, solve_dfn, solve_spd
from .sparse import MatrixMarketError, read_matrix_market, set_num_threads

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_ALPHA = 0, 2, 3, 4


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    source: dict = field(default_factory=dict)
    precond: dict = field(default_factory=dict)
    tol: float = 1e-10
    max_iters: int = 10_000
    threads: int = 1
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in ("solve", "spectrum", "sweep", "generate", "scale-bench"):
            raise InputError(f"unknown command {self.command}")
        if self.threads < 1:
            raise InputError("--threads must be >= 1")
        SolveConfig(self.tol, self.max_iters)
        if self.precond:
            PrecondSpec(**self.precond)
        return self


def _outpath(p):
    if p is None:
        return None
    p = Path(p)
    base = os.environ.get("POLYPCG_OUTDIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _floats(text):
    if text is None or text.strip() == "":
        return []
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise InputError(f"not a comma-separated list of numbers: {text!r}") from None


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise InputError(f"not a list of integers: {text!r}")
    return [int(v) for v in vals]


def _diag_n(text):
    key, _, val = text.partition("=")
    if key != "n" or not val.isdigit():
        raise InputError("--diag-test expects n=N")
    return int(val)


def _degree(args):
    if args.nlev is not None and args.degree is not None:
        raise InputError("give either --degree or --nlev, not both")
    if args.nlev is not None:
        if args.nlev < 0:
            raise InputError("--nlev must be >= 0")
        return 2**args.nlev - 1
    return args.degree if args.degree is not None else 0


def _source(args):
    picked = [k for k in ("diag_test", "matrix", "dfn") if getattr(args, k, None)]
    if len(picked) != 1:
        raise InputError("give exactly one of --diag-test, --matrix, --dfn")
    k = picked[0]
    return {"kind": k, "value": getattr(args, k)}


def _spec_dict(args, degree=None, xi=None):
    return {"degree": _degree(args) if degree is None else degree,
            "xi": args.xi if xi is None else xi,
            "variant": args.variant, "lowrank": args.lowrank, "jacobi_seed": not args.no_seed,
            "tol_eig": args.tol_eig, "eig_seed": args.seed}


class _Problem:
    """Operator, right-hand side, Jacobi diagonal and optionally exact bounds for a non-DFN source."""

    def __init__(self, source, seed, estimate_bounds=False):
        kind, val = source["kind"], source["value"]
        rng = np.random.default_rng(seed)
        self.dfn = None
        self.bounds = None
        self.eigvecs = None
        if kind == "diag_test":
            n = _diag_n(val)
            self.op, exact = diagonal_test(n)
            self.diag = None  # the diagonal test is run without seed scaling
            if not estimate_bounds:
                self.bounds = exact
            self.exact_eigvecs = lambda p: np.eye(n, p)
            self.b = rng.standard_normal(n)
        elif kind == "matrix":
            m = read_matrix_market(val)
            if m.nrows != m.ncols:
                raise InputError("matrix must be square")
            self.op = as_operator(m)
            self.diag = m.diagonal_values()
            if np.any(~(self.diag > 0)):
                raise InputError("matrix diagonal must be positive for an SPD system")
            self.exact_eigvecs = None
            self.b = rng.standard_normal(m.nrows)
        else:
            self.dfn = load_system(val)


def _solve_once(problem: _Problem, spec: PrecondSpec, cfg: SolveConfig):
    if problem.dfn is not None:
        return solve_dfn(problem.dfn, spec, cfg)
    eigvecs = problem.exact_eigvecs(spec.lowrank) if (spec.lowrank and problem.exact_eigvecs) else None
    return solve_spd(problem.op, problem.b, spec, cfg, diag=problem.diag, bounds=problem.bounds,
                     eigvecs=eigvecs)


def _emit(report: dict, args):
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    path = _outpath(getattr(args, "json", None))
    if path:
        path.write_text(text + "\n")
    else:
        print(text)


def _base_report(cfg: RunConfig) -> dict:
    return {"version": __version__, "config": asdict(cfg)}


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cfg = RunConfig("solve", _source(args), _spec_dict(args), args.tol, args.max_iters, args.threads,
                    {"json": args.json, "history": args.history}, args.seed,
                    {"estimate_bounds": args.estimate_bounds}).validate()
    problem = _Problem(cfg.source, cfg.seed, args.estimate_bounds)
    res = _solve_once(problem, PrecondSpec(**cfg.precond), SolveConfig(cfg.tol, cfg.max_iters))
    out = _base_report(cfg)
    out["result"] = res.to_dict()
    if args.history:
        write_history_csv(res.report, _outpath(args.history))
    _emit(out, args)
    if problem.dfn is not None and res.report.converged:
        if res.extra["residual"]["total"] > 100 * cfg.tol:
            return EXIT_NOCONV
    return EXIT_OK if res.report.converged else EXIT_NOCONV


def _read_eigs(path):
    text = Path(path).read_text()
    vals = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            vals.extend(float(t) for t in line.replace(",", " ").split())
    return np.asarray(vals, dtype=np.float64)


def cmd_spectrum(args) -> int:
    if bool(args.diag_test) == bool(args.eigs):
        raise InputError("give exactly one of --diag-test or --eigs")
    degree = _degree(args)
    cfg = RunConfig("spectrum", {"diag_test": args.diag_test, "eigs": args.eigs},
                    {"degree": degree, "xi": args.xi, "variant": args.variant}, threads=args.threads,
                    outputs={"csv": args.csv, "json": args.json}).validate()
    if args.diag_test:
        lam = np.arange(1, _diag_n(args.diag_test) + 1, dtype=np.float64)
    else:
        lam = _read_eigs(args.eigs)
    if np.any(lam <= 0):
        raise InputError("eigenvalues must be positive")
    out = _base_report(cfg)
    if len(lam) == 0:
        summary = {"n": 0, "degree": degree, "kappa": math.nan, "kappa10": math.nan}
        if args.csv:
            with open(_outpath(args.csv), "w", newline="") as fh:
                csv.writer(fh).writerow(["lambda_original", "lambda_mapped"])
    else:
        lo = args.alpha if args.alpha is not None else float(lam.min())
        hi = args.beta if args.beta is not None else float(lam.max())
        bounds = SpectralBounds(lo, hi, args.xi)
        newton = args.variant == "newton" or (args.variant is None and (degree + 1) & degree == 0)
        if newton:
            if (degree + 1) & degree:
                raise InputError("Newton degree must be 2**nlev - 1")
            coeffs = build_newton(bounds, int(math.log2(degree + 1)))
        else:
            coeffs = build_chebyshev(bounds, degree)
        rep = preconditioned_spectrum_report(coeffs, lam)
        summary = rep.summary()
        if args.csv:
            rep.to_csv(_outpath(args.csv))
    out["spectrum"] = summary
    _emit(out, args)
    return EXIT_OK


SWEEP_HEADER = ["xi", "degree", "iters", "mvp", "ddot", "final_relres", "converged", "setup_seconds",
                "solve_seconds", "error"]


def cmd_sweep(args) -> int:
    xis, degrees = _floats(args.xis), _ints(args.degrees)
    cfg = RunConfig("sweep", _source(args), _spec_dict(args, degree=0, xi=0.0), args.tol, args.max_iters,
                    args.threads, {"csv": args.csv, "json": args.json}, args.seed,
                    {"xis": xis, "degrees": degrees}).validate()
    if any(d < 0 for d in degrees) or any(x < 0 for x in xis):
        raise InputError("degrees and xi values must be nonnegative")
    problem = _Problem(cfg.source, cfg.seed, args.estimate_bounds)
    rows = []
    if xis and degrees and problem.dfn is None and problem.bounds is None and any(degrees):
        # one eigenvalue estimate shared by the whole grid
        from .linop import make_scaled_operator
        work = make_scaled_operator(problem.op, problem.diag) if problem.diag is not None and not args.no_seed \
            else problem.op
        problem.bounds = estimate_extremes(work, args.tol_eig, args.seed)
    for xi in xis:
        for m in degrees:
            row = {"xi": xi, "degree": m}
            try:
                spec = PrecondSpec(**_spec_dict(args, degree=m, xi=xi))
                res = _solve_once(problem, spec, SolveConfig(cfg.tol, cfg.max_iters, False))
                r = res.report
                row.update(iters=r.iters, mvp=r.mvp, ddot=r.ddot, final_relres=r.final_relres,
                           converged=r.converged, setup_seconds=r.setup_seconds,
                           solve_seconds=r.solve_seconds, error="")
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                row.update(converged=False, error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    if args.csv:
        with open(_outpath(args.csv), "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_HEADER)
            w.writeheader()
            for row in rows:
                w.writerow({k: row.get(k, "") for k in SWEEP_HEADER})
    out = _base_report(cfg)
    out["rows"] = rows
    _emit(out, args)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = RunConfig("generate", {}, {}, seed=args.seed, threads=args.threads,
                    outputs={"out": args.out},
                    extra={"nf": args.nf, "avg_block": args.avg_block,
                           "trace_density": args.trace_density, "alpha": args.alpha}).validate()
    system = generate_synthetic(args.nf, args.avg_block, args.trace_density, args.alpha, args.seed)
    outdir = _outpath(Path(args.out) / "A.mtx").parent
    save_system(system, outdir)
    out = _base_report(cfg)
    out["system"] = {"nf": system.nf, "nh": system.nh, "nu": system.nu, "dir": str(outdir)}
    _emit(out, args)
    return EXIT_OK


def efficiency(times: dict) -> dict:
    """Parallel efficiency eta(t) = (t_ref / t) * (T_ref / T_t), reference = fewest threads."""
    ref = min(times)
    return {t: (ref / t) * (times[ref] / times[t]) for t in times}


def cmd_scale_bench(args) -> int:
    threads = _ints(args.thread_list)
    if not threads or any(t < 1 for t in threads):
        raise InputError("--thread-list needs positive integers")
    if args.dfn:
        source = {"kind": "dfn", "value": args.dfn}
    else:
        source = {"kind": "synthetic", "value": {"nf": args.nf, "avg_block": args.avg_block}}
    cfg = RunConfig("scale-bench", source, _spec_dict(args), args.tol, args.max_iters, max(threads),
                    {"csv": args.csv, "json": args.json}, args.seed,
                    {"thread_list": threads, "repeats": args.repeats}).validate()
    system = load_system(args.dfn) if args.dfn else generate_synthetic(args.nf, args.avg_block, 0.5, 1.0,
                                                                        args.seed)
    spec = PrecondSpec(**cfg.precond)
    rows, times = [], {}
    for t in sorted(set(threads)):
        set_num_threads(t)
        best = math.inf
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = solve_dfn(system, spec, SolveConfig(cfg.tol, cfg.max_iters, False))
            best = min(best, time.perf_counter() - t0)
        times[t] = best
        rows.append({"threads": t, "seconds": best, "iters": res.report.iters,
                     "mvp": res.report.mvp, "converged": res.report.converged})
    set_num_threads(1)
    eta = efficiency(times)
    for row in rows:
        row["speedup"] = times[min(times)] / row["seconds"]
        row["efficiency_pct"] = 100.0 * eta[row["threads"]]
    if args.csv:
        with open(_outpath(args.csv), "w", newline="") as fh:
            w = csv.DictWriter(fh, ["threads", "seconds", "iters", "mvp", "converged", "speedup",
                                    "efficiency_pct"])
            w.writeheader()
            w.writerows(rows)
    out = _base_report(cfg)
    out["rows"] = rows
    out["iters_constant"] = len({r["iters"] for r in rows}) == 1
    out["cpu_count"] = os.cpu_count()
    _emit(out, args)
    return EXIT_OK if out["iters_constant"] else EXIT_NOCONV


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--threads", type=int, default=int(os.environ.get("POLYPCG_THREADS", "1")),
                   help="worker threads for sparse kernels (env POLYPCG_THREADS)")
    p.add_argument("--json", help="write the JSON report here instead of stdout (relative to POLYPCG_OUTDIR)")
    p.add_argument("--seed", type=int, default=0, help="seed for random right-hand sides and eigen-solver starts")


def _add_precond(p, with_degree=True):
    if with_degree:
        p.add_argument("--degree", type=int, help="polynomial degree m (0 = seed preconditioner only)")
        p.add_argument("--nlev", type=int, help="Newton levels; degree 2**nlev - 1")
    p.add_argument("--xi", type=float, default=0.0, help="de-clustering shift of the interval centre")
    p.add_argument("--variant", choices=("newton", "chebyshev"),
                   help="default: newton for degrees 2**j - 1, chebyshev otherwise")
    p.add_argument("--lowrank", type=int, default=0, help="rank p of the spectral correction")
    p.add_argument("--no-seed", action="store_true", help="disable the Jacobi seed scaling")
    p.add_argument("--tol-eig", type=float, default=1e-3, help="relative accuracy of eigenvalue estimates")


def _add_source(p):
    p.add_argument("--diag-test", metavar="n=N", help="built-in diagonal matrix diag(1..N)")
    p.add_argument("--matrix", help="SPD matrix in MatrixMarket format")
    p.add_argument("--dfn", help="directory holding a DFN block system")
    p.add_argument("--estimate-bounds", action="store_true",
                   help="estimate spectral bounds for --diag-test instead of using the exact [1, N]")


def _add_solver(p):
    p.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance")
    p.add_argument("--max-iters", type=int, default=10_000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polypcg", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one system and report counts")
    _add_source(p)
    _add_precond(p)
    _add_solver(p)
    _add_common(p)
    p.add_argument("--history", help="CSV file for the residual history")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("spectrum", help="map eigenvalues through a polynomial preconditioner")
    p.add_argument("--diag-test", metavar="n=N", help="eigenvalues 1..N")
    p.add_argument("--eigs", help="text file of eigenvalues (whitespace or comma separated)")
    p.add_argument("--alpha", type=float, help="interval start (default: smallest eigenvalue)")
    p.add_argument("--beta", type=float, help="interval end (default: largest eigenvalue)")
    p.add_argument("--csv", help="CSV output lambda_original,lambda_mapped")
    p.add_argument("--degree", type=int)
    p.add_argument("--nlev", type=int)
    p.add_argument("--xi", type=float, default=0.0)
    p.add_argument("--variant", choices=("newton", "chebyshev"))
    _add_common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("sweep", help="grid of xi and degree values")
    _add_source(p)
    _add_precond(p, with_degree=False)
    _add_solver(p)
    _add_common(p)
    p.add_argument("--xis", default="0", help="comma-separated xi values")
    p.add_argument("--degrees", default="63", help="comma-separated polynomial degrees")
    p.add_argument("--csv", help="CSV output, one row per (xi, degree)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate", help="write a synthetic DFN block system")
    p.add_argument("--nf", type=int, default=50, help="number of fractures")
    p.add_argument("--avg-block", type=int, default=16, help="average unknowns per fracture")
    p.add_argument("--trace-density", type=float, default=0.5, help="extra traces per fracture")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("scale-bench", help="strong scaling of the DFN solve over thread counts")
    p.add_argument("--dfn", help="DFN directory (default: generate a synthetic system)")
    p.add_argument("--nf", type=int, default=500)
    p.add_argument("--avg-block", type=int, default=16)
    p.add_argument("--thread-list", default="1,2,4,8")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--degree", type=int)
    p.add_argument("--nlev", type=int)
    _add_precond(p, with_degree=False)
    _add_solver(p)
    _add_common(p)
    p.set_defaults(func=cmd_scale_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_num_threads(args.threads)
        return args.func(args)
    except InadmissibleAlphaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALPHA
    except BreakdownError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, MatrixMarketError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        set_num_threads(1)


if __name__ == "__main__":
    sys.exit(main())
