"""Command-line interface: ``solve``, ``bench``, ``certify`` and ``oracle``.

Exit codes: 0 success, 2 parse error, 3 solver failure, 4 missing reference.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import evaluate_metrics, problem_reference, run_suite
from .driver import DEFAULT_SEED, SOLVERS, RelaxParams, ScheduleParams
from .dsl import ModelError, load_problem

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SOLVER = 3
EXIT_REFERENCE = 4


def _load(path):
    try:
        return load_problem(path)
    except (ModelError, OSError) as err:
        print(f"error: {path}: {err}", file=sys.stderr)
        return None


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _cmd_solve(args) -> int:
    prob = _load(args.file)
    if prob is None:
        return EXIT_PARSE
    try:
        if args.solver == "kp-rlx":
            report = SOLVERS["kp-rlx"](prob, params_rlx=RelaxParams(eps0=args.r0, shrink=args.delta), seed=args.seed)
        else:
            params = ScheduleParams(r0=args.r0, rho0=args.rho0, rho_bar=args.rhobar, delta=args.delta)
            report = SOLVERS[args.solver](prob, params=params, seed=args.seed)
    except Exception as err:  # solver failures map to one exit code
        print(f"error: {args.solver} failed on {prob.name}: {err}", file=sys.stderr)
        return EXIT_SOLVER
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(f"problem    {prob.name}")
    print(f"solver     {report.solver}")
    print(f"x          {report.x}")
    print(f"y          {report.y}")
    print(f"F, f       {report.F:.10g}, {report.f:.10g}")
    print(f"criterion  {report.criterion} after {report.outer_iterations} outer iterations")
    print(f"time_s     {report.time_s:.3f}")
    reference = problem_reference(prob)
    if reference is None:
        if args.metrics:
            print(f"error: {prob.name} has no reference solution", file=sys.stderr)
            return EXIT_REFERENCE
    else:
        m = evaluate_metrics(report, reference)
        print(f"eps_x      {m.eps_x:.3e}")
        print(f"eps_f      {m.eps_f:.3e}")
        print(f"omega      {m.omega:.3e}  success={m.success}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    report = run_suite(
        args.dir,
        solvers=tuple(args.solvers),
        seed=args.seed,
        parallelism=args.par,
        csv_path=args.csv,
        svg_path=args.svg,
        use_oracle=args.oracle,
    )
    print(f"{'problem':28s} {'solver':9s} {'omega':>10s} {'success':>7s} {'time_s':>8s} crit")
    for r in report.rows:
        print(f"{r.problem:28s} {r.solver:9s} {r.omega:10.3e} {str(r.success):>7s} {r.time_s:8.2f} {r.criterion}")
    print()
    print(f"{'solver':9s} {'Suc.':>5s} {'Obj.Suc.':>8s} {'Sol.Suc.':>8s} {'Time':>8s}")
    for solver, s in report.summary().items():
        print(f"{solver:9s} {s['success']:5d} {s['obj_success']:8d} {s['sol_success']:8d} {s['time_s']:8.2f}")
    return EXIT_OK


def _read_point(text: str) -> dict:
    path = Path(text)
    data = json.loads(path.read_text() if path.exists() else text)
    return {k: np.atleast_1d(np.asarray(data[k], dtype=float)) for k in ("x", "y", "u", "s")}


def _cmd_certify(args) -> int:
    from .stationarity import certify

    prob = _load(args.file)
    if prob is None:
        return EXIT_PARSE
    try:
        point = _read_point(args.point)
    except (KeyError, ValueError, json.JSONDecodeError) as err:
        print(f"error: bad point: {err}", file=sys.stderr)
        return EXIT_PARSE
    try:
        cert = certify(prob, point, mode=args.mode)
    except Exception as err:
        print(f"error: certification failed: {err}", file=sys.stderr)
        return EXIT_SOLVER
    print(cert.to_json())
    return EXIT_OK


def _cmd_oracle(args) -> int:
    from .oracle import GridSpec, OracleError, global_solve, value_function

    prob = _load(args.file)
    if prob is None:
        return EXIT_PARSE
    kwargs = {"resolution": args.resolution}
    if args.box:
        lo, hi = args.box
        kwargs["ybox"] = ((lo, hi),) * prob.l
        kwargs["xbox"] = ((lo, hi),) * prob.d
    spec = GridSpec(**kwargs)
    try:
        if args.value_at is not None:
            vr = value_function(prob, _floats(args.value_at), spec)
            out = {"V": vr.V, "argmins": [y.tolist() for y in vr.argmins]}
        else:
            out = global_solve(prob, spec).to_dict()
    except OracleError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svfbilevel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one .blp problem")
    p.add_argument("file")
    p.add_argument("--solver", choices=sorted(SOLVERS), default="svf-sbal")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--r0", type=float, default=1.0)
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--rhobar", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--json", help="write the full report as JSON")
    p.add_argument("--metrics", action="store_true", help="require a reference and report errors")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("bench", help="run solvers over a corpus directory")
    p.add_argument("dir", nargs="?", default=None)
    p.add_argument("--solvers", nargs="+", choices=sorted(SOLVERS), default=["svf-sbal", "kp-sbal", "kp-rlx"])
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--par", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.add_argument("--oracle", action="store_true", help="use the oracle when metadata has no reference")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("certify", help="classify stationarity of an SVF point")
    p.add_argument("file")
    p.add_argument("--point", required=True, help="JSON text or file with keys x, y, u, s")
    p.add_argument("--mode", choices=["W", "C", "M", "S"], default="S")
    p.set_defaults(func=_cmd_certify)

    p = sub.add_parser("oracle", help="grid value function or global solution")
    p.add_argument("file")
    p.add_argument("--box", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--resolution", type=int, default=201)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--global", dest="global_", action="store_true", help="global bilevel solution (default)")
    group.add_argument("--value-at", help="comma-separated x at which to compute V(x)")
    p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
