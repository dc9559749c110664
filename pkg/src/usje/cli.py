"""Command-line entry point.

Subcommands: fit | solve | verify | simulate | report.  Exit codes are a
total function of the outcome category:

    0  success
    2  input error (unreadable/invalid files, schema or precondition errors,
       hash mismatches)
    3  solver failure (no convergence, iteration caps, LP breakdown)
    4  verification failure (a property check did not pass)

All randomness flows from a single seed (--seed flag, else the config's seed,
else 12345).  The thread count comes from --threads, or the USJE_THREADS
environment variable when the flag is absent.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .economy import OLGEconomy, economy_from_config
from .errors import (InsufficientPoints, InvalidSpec, LPError,
                     MaxIterationsExceeded, MaxOuterIterations, NoConvergence,
                     NumericalFailure, UsjeError)
from .basis import build_basis
from .minimax import FitProblem, certify_best, chebyshev_fit
from .solver import USJESolution, draw_shocks, exchange_loop, simulate
from .verify import verification_report, write_error_table_csv

logger = logging.getLogger("usje.cli")

DEFAULT_SEED = 12345
SOLVER_DEFAULTS = {"basis": "P3", "n": 200, "m_factor": 50, "eta": 0.1,
                   "eps_bar": 1e-8, "seed": DEFAULT_SEED, "max_outer": 200}

_INPUT_ERRORS = (InvalidSpec, InsufficientPoints, ValueError, KeyError,
                 TypeError, OSError, json.JSONDecodeError)
_SOLVER_ERRORS = (NoConvergence, MaxIterationsExceeded, MaxOuterIterations,
                  NumericalFailure, LPError)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _hash_of(obj):
    return hashlib.sha256(_canonical_json(obj).encode()).hexdigest()


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(_canonical_json(obj))
        fh.write("\n")


def _write_manifest(out_paths, subcommand, config_hash, seed, started):
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash,
        "seed": seed,
        "started_at": started,
        "finished_at": _now(),
        "outputs": [str(p) for p in out_paths],
        "version": __version__,
    }
    path = str(out_paths[0]) + ".manifest.json"
    _write_json(path, manifest)
    return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_config(path):
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise InvalidSpec("config must be a JSON object")
    return cfg


def _economy_from(cfg) -> OLGEconomy:
    return economy_from_config(cfg.get("economy", {}))


def _solver_params(cfg, args):
    params = dict(SOLVER_DEFAULTS)
    params.update(cfg.get("solver", {}))
    if getattr(args, "basis", None):
        params["basis"] = args.basis
    if getattr(args, "seed", None) is not None:
        params["seed"] = args.seed
    return params


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("USJE_THREADS")
    return int(env) if env else 1


def _solution_payload(solution: USJESolution, config_hash, seed):
    body = {
        "format": "usje-solution-v1",
        "config_hash": config_hash,
        "seed": seed,
        "solution": solution.to_dict(),
    }
    body["payload_hash"] = _hash_of(body)
    return body


def _load_solution(path):
    with open(path) as fh:
        body = json.load(fh)
    stored = body.pop("payload_hash", None)
    if stored != _hash_of(body):
        raise InvalidSpec("solution file failed its integrity hash")
    return (USJESolution.from_dict(body["solution"]), body["config_hash"],
            body["seed"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    rows = []
    with open(args.csv) as fh:
        for record in csv.reader(fh):
            if not record:
                continue
            try:
                rows.append([float(v) for v in record])
            except ValueError:
                if not rows:  # tolerate a single header line
                    continue
                raise
    if not rows:
        raise InvalidSpec("the CSV contains no numeric rows")
    data = np.array(rows, dtype=float)
    if data.shape[1] < 2:
        raise InvalidSpec("need at least one state column plus the target")
    points, targets = data[:, :-1], data[:, -1]
    state_dim = points.shape[1]
    if args.terms:
        basis = build_basis(json.loads(args.terms), state_dim)
    else:
        basis = build_basis(args.basis or "P1", state_dim,
                            own_index=args.own_index)
    from .basis import design_matrix
    problem = FitProblem(design_matrix(basis, points), targets)
    fit = chebyshev_fit(problem)
    report = certify_best(problem, fit.coefficients)
    out = args.out or "fit.json"
    started = _now()
    _write_json(out, {
        "coefficients": fit.coefficients.tolist(),
        "residual": fit.residual,
        "extreme_indices": fit.extreme_indices,
        "extreme_signs": fit.extreme_signs,
        "certified": report.certified,
        "hull_gap": report.hull_gap,
        "basis": basis.to_dict(),
    })
    _write_manifest([out], "fit", _hash_of({"csv": str(args.csv)}),
                    args.seed or DEFAULT_SEED, started)
    return 0


def cmd_solve(args):
    started = _now()
    cfg = _load_config(args.config)
    economy = _economy_from(cfg)
    params = _solver_params(cfg, args)
    config_hash = _hash_of({"economy": cfg.get("economy", {}),
                            "solver": params})
    solution = exchange_loop(
        economy, params["basis"], int(params["n"]),
        int(params["m_factor"]) * int(params["n"]), float(params["eta"]),
        int(params["seed"]), float(params["eps_bar"]),
        max_outer=int(params["max_outer"]), threads=_threads(args))
    out = args.out or "solution.json"
    _write_json(out, _solution_payload(solution, config_hash, int(params["seed"])))
    _write_manifest([out], "solve", config_hash, int(params["seed"]), started)
    logger.info("solution written to %s", out)
    return 0


def cmd_verify(args):
    started = _now()
    cfg = _load_config(args.config)
    economy = _economy_from(cfg)
    params = _solver_params(cfg, args)
    solution, stored_hash, sol_seed = _load_solution(args.solution)
    config_hash = _hash_of({"economy": cfg.get("economy", {}),
                            "solver": params})
    if stored_hash != config_hash:
        raise InvalidSpec("solution was produced from a different config")
    n = int(solution.diagnostics.get("n", params["n"]))
    m_check = args.m_check or 100 * n
    seed = args.seed if args.seed is not None else sol_seed + 1
    report, (tmax, tavg) = verification_report(solution, economy, m_check, seed)
    out = args.out or "verification.json"
    _write_json(out, report.to_dict())
    base = Path(out).with_suffix("")
    basis_name = solution.diagnostics.get("basis_spec", "basis")
    csv_max = f"{base}_{basis_name}_max.csv"
    csv_avg = f"{base}_{basis_name}_average.csv"
    write_error_table_csv(tmax, csv_max)
    write_error_table_csv(tavg, csv_avg)
    _write_manifest([out, csv_max, csv_avg], "verify", config_hash, seed, started)
    if not report.passed:
        logger.error("verification failed: %s", report.message or "property 1")
        return 4
    return 0


def cmd_simulate(args):
    started = _now()
    cfg = _load_config(args.config)
    economy = _economy_from(cfg)
    solution, _, sol_seed = _load_solution(args.solution)
    seed = args.seed if args.seed is not None else sol_seed + 2
    m = args.m or 1000
    start_state = np.array(solution.diagnostics.get(
        "final_state", [0.0] * economy.state_dim))
    shocks = draw_shocks(economy.shocks, m, seed,
                         z0=solution.diagnostics.get("final_shock"))
    path = simulate(economy, solution.policy, start_state, shocks)
    out = args.out or "path.csv"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        ages = [f"c_{a}" for a in range(1, economy.A + 1)]
        writer.writerow(["date", "z", "price"] + ages)
        for t, rec in enumerate(path):
            writer.writerow([t, rec.z + 1, f"{rec.equilibrium.price:.12g}"]
                            + [f"{c:.12g}" for c in rec.equilibrium.consumption])
    _write_manifest([out], "simulate", _hash_of(cfg), seed, started)
    return 0


def cmd_report(args):
    started = _now()
    cfg = _load_config(args.config)
    economy = _economy_from(cfg)
    solution, _, sol_seed = _load_solution(args.solution)
    out_dir = Path(args.out_dir or "report")
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(solution.diagnostics.get("n", 200))
    m_check = args.m_check or 100 * n
    seed = args.seed if args.seed is not None else sol_seed + 1
    report, (tmax, tavg) = verification_report(solution, economy, m_check, seed)
    basis_name = solution.diagnostics.get("basis_spec", "basis")
    csv_max = out_dir / f"errors_{basis_name}_max.csv"
    csv_avg = out_dir / f"errors_{basis_name}_average.csv"
    write_error_table_csv(tmax, csv_max)
    write_error_table_csv(tavg, csv_avg)

    shocks = draw_shocks(economy.shocks, min(m_check, args.path_length), seed,
                         z0=solution.diagnostics.get("final_shock"))
    path = simulate(economy, solution.policy,
                    np.array(solution.diagnostics.get(
                        "final_state", [0.0] * economy.state_dim)), shocks)
    csv_path = out_dir / "simulated_path.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "z", "price"]
                        + [f"c_{a}" for a in range(1, economy.A + 1)])
        for t, rec in enumerate(path):
            writer.writerow([t, rec.z + 1, f"{rec.equilibrium.price:.12g}"]
                            + [f"{c:.12g}" for c in rec.equilibrium.consumption])

    md = out_dir / "summary.md"
    with open(md, "w") as fh:
        fh.write(f"# Solution report ({basis_name})\n\n")
        fh.write(f"- outer iterations: {solution.diagnostics.get('outer_iterations')}\n")
        fh.write(f"- point set size n: {n}; verification path length: {m_check}\n")
        fh.write(f"- property 1 (best-fit + certificate): "
                 f"{'pass' if report.property1_passed else 'FAIL'}\n")
        fh.write(f"- property 2 (on-path error bound): "
                 f"{'pass' if report.property2_passed else 'FAIL'}\n")
        fh.write(f"- proximity of stored points to the visited set: "
                 f"{report.proximity:.4g}\n\n")
        fh.write("Maximum forecast error by target age (units of 1e-2), "
                 "worst shock state:\n\n")
        fh.write("| target age | max error | average error |\n|---|---|---|\n")
        for k in range(tmax.values.shape[0]):
            fh.write(f"| {k + 2} | {100 * tmax.values[k].max():.4f} "
                     f"| {100 * tavg.values[k].mean():.4f} |\n")
        last = tmax.values[-1].max()
        if last <= 1e-8:
            fh.write("\nThe final-age forecast errors vanish: that "
                     "consumption is linear in holdings and lies in the "
                     "policy class.\n")
    _write_manifest([str(csv_max), str(csv_avg), str(csv_path), str(md)],
                    "report", _hash_of(cfg), seed, started)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="economy/solver config JSON")
    common.add_argument("--out", help="output file path")
    common.add_argument("--seed", type=int, default=None, help="RNG seed")
    common.add_argument("--basis", choices=["P1", "P2", "P3"], default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for point solves "
                             "(USJE_THREADS when omitted)")
    common.add_argument("--log-level", default="warn",
                        choices=["error", "warn", "info", "debug"])

    parser = argparse.ArgumentParser(
        prog="usje",
        description="Solve, certify, and stress-test uniformly self-justified "
                    "equilibria of stochastic OLG exchange economies.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", parents=[common],
                           help="minimax-fit a CSV of samples")
    p_fit.add_argument("csv", help="rows x_1,...,x_p,y")
    p_fit.add_argument("--own-index", type=int, default=0,
                       help="own coordinate for P1/P2/P3 bases")
    p_fit.add_argument("--terms", help="JSON list of exponent tuples")
    p_fit.set_defaults(func=cmd_fit)

    p_solve = sub.add_parser("solve", parents=[common],
                             help="run the exchange loop end to end")
    p_solve.set_defaults(func=cmd_solve)

    p_verify = sub.add_parser("verify", parents=[common],
                              help="check both defining properties")
    p_verify.add_argument("solution")
    p_verify.add_argument("--m-check", type=int, default=None,
                          help="verification path length (default 100*n)")
    p_verify.set_defaults(func=cmd_verify)

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="simulate a solved policy to CSV")
    p_sim.add_argument("solution")
    p_sim.add_argument("-m", type=int, default=None, help="path length")
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("report", parents=[common],
                           help="emit error tables, summary, and path CSV")
    p_rep.add_argument("solution")
    p_rep.add_argument("--out-dir", help="report directory")
    p_rep.add_argument("--m-check", type=int, default=None)
    p_rep.add_argument("--path-length", type=int, default=1000)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    level = {"error": logging.ERROR, "warn": logging.WARNING,
             "info": logging.INFO, "debug": logging.DEBUG}[args.log_level]
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except _SOLVER_ERRORS as exc:
        logger.error("solver failure: %s", exc)
        diagnostics = getattr(exc, "diagnostics", None)
        if diagnostics is not None and args.out:
            _write_json(str(args.out) + ".partial.json", diagnostics)
        return 3
    except _INPUT_ERRORS as exc:
        logger.error("input error: %s", exc)
        return 2
    except UsjeError as exc:
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
