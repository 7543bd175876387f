"""Benchmark metrics, performance profiles and the corpus suite runner.

Errors ``eps_x`` and ``eps_f`` use the Euclidean norm; a run succeeds when
``omega = min(eps_x, eps_f) <= 1e-3`` (closed threshold).
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .driver import DEFAULT_SEED, SOLVERS, SolveReport
from .dsl import BilevelProblem, load_problem

SUCCESS_TOL = 1e-3
GAMMA_GRID = np.round(np.arange(0.0, 100.0 + 1e-9, 0.05), 10)
PROFILE_METRICS = ("success", "objective", "solution", "time")
CSV_COLUMNS = (
    "problem",
    "solver",
    "eps_x",
    "eps_f",
    "omega",
    "success",
    "obj_success",
    "sol_success",
    "time_s",
    "criterion",
    "seed",
)


class MissingReferenceError(LookupError):
    """No reference solution from metadata or the oracle."""


@dataclass(frozen=True)
class Metrics:
    eps_x: float
    eps_f: float
    omega: float
    success: bool
    obj_success: bool
    sol_success: bool
    time: float


def evaluate_metrics(report: SolveReport, reference) -> Metrics:
    """Errors of ``report`` against ``reference = (x*, y*, F*, f*)``."""
    if reference is None:
        raise MissingReferenceError(f"{report.problem}: no reference solution")
    xs, ys, Fs, fs = reference
    got = np.concatenate([np.atleast_1d(report.x), np.atleast_1d(report.y)]).astype(float)
    ref = np.concatenate([np.atleast_1d(xs), np.atleast_1d(ys)]).astype(float)
    eps_x = float(np.linalg.norm(got - ref))
    eps_f = float(math.hypot(report.F - Fs, report.f - fs))
    if not math.isfinite(eps_x):
        eps_x = math.inf
    if not math.isfinite(eps_f):
        eps_f = math.inf
    omega = min(eps_x, eps_f)
    return Metrics(
        eps_x=eps_x,
        eps_f=eps_f,
        omega=omega,
        success=omega <= SUCCESS_TOL,
        obj_success=eps_f <= SUCCESS_TOL,
        sol_success=eps_x <= SUCCESS_TOL,
        time=float(report.time_s),
    )


def accuracy_ratio(omega: float, omega_min: float) -> float:
    """Piecewise accuracy ratio of one solver against the best on a problem."""
    if 0.0 < omega <= SUCCESS_TOL:
        return math.log10(omega / omega_min) if omega_min > 0 else 50.0
    if omega == 0.0 and omega_min == 0.0:
        return 0.0
    return 100.0


def time_ratio(t: float, t_min: float) -> float:
    tiny = 1e-12
    return math.log10(max(t, tiny) / max(t_min, tiny))


def performance_ratio(omega_p, t_p) -> tuple[list[float], list[float]]:
    """Accuracy and time ratios for every solver on one problem."""
    omega_p = [float(v) for v in omega_p]
    t_p = [float(v) for v in t_p]
    if not omega_p or len(omega_p) != len(t_p):
        raise ValueError("need one omega and one time per solver")
    omega_min = min(omega_p)
    t_min = min(t_p)
    return [accuracy_ratio(w, omega_min) for w in omega_p], [time_ratio(t, t_min) for t in t_p]


@dataclass(frozen=True)
class ProfilePoint:
    gamma: float
    fraction: float


def profile_curve(ratios) -> dict[str, list[ProfilePoint]]:
    """Cumulative profile per solver over the fixed gamma grid.

    ``ratios`` maps solver name to its per-problem ratios; every list has
    one entry per problem.
    """
    if not ratios:
        raise ValueError("empty ratio table")
    out = {}
    for solver, values in ratios.items():
        values = np.asarray(values, dtype=float)
        n = len(values)
        if n == 0:
            raise ValueError("empty ratio table")
        counts = np.searchsorted(np.sort(values), GAMMA_GRID, side="right")
        out[solver] = [ProfilePoint(float(g), float(c) / n) for g, c in zip(GAMMA_GRID, counts)]
    return out


# ---------------------------------------------------------------------------
# suite


@dataclass(frozen=True)
class BenchRow:
    problem: str
    solver: str
    eps_x: float
    eps_f: float
    omega: float
    success: bool
    obj_success: bool
    sol_success: bool
    time_s: float
    criterion: int
    seed: int

    def cells(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in (getattr(self, c) for c in CSV_COLUMNS)]


def _parse_cell(kind, text: str):
    if kind is bool or kind == "bool":
        if text not in ("True", "False"):
            raise ValueError(f"bad boolean cell {text!r}")
        return text == "True"
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    return text


@dataclass
class BenchReport:
    rows: list[BenchRow]

    @property
    def solvers(self) -> list[str]:
        return sorted({r.solver for r in self.rows})

    @property
    def problems(self) -> list[str]:
        return sorted({r.problem for r in self.rows})

    def row(self, problem: str, solver: str) -> BenchRow:
        for r in self.rows:
            if r.problem == problem and r.solver == solver:
                return r
        raise KeyError((problem, solver))

    def summary(self) -> dict[str, dict]:
        """Suc., Obj.Suc., Sol.Suc. counts and total time per solver."""
        out = {}
        for s in self.solvers:
            rows = [r for r in self.rows if r.solver == s]
            out[s] = {
                "success": sum(r.success for r in rows),
                "obj_success": sum(r.obj_success for r in rows),
                "sol_success": sum(r.sol_success for r in rows),
                "time_s": sum(r.time_s for r in rows),
            }
        return out

    def ratios(self, metric: str) -> dict[str, list[float]]:
        """Per-solver ratios over the problems for one profile metric."""
        key = {"success": "omega", "objective": "eps_f", "solution": "eps_x", "time": "time_s"}[metric]
        solvers = self.solvers
        table = {s: [] for s in solvers}
        for p in self.problems:
            vals = [getattr(self.row(p, s), key) for s in solvers]
            if metric == "time":
                _, res = performance_ratio([0.0] * len(vals), vals)
            else:
                res, _ = performance_ratio(vals, [1.0] * len(vals))
            for s, v in zip(solvers, res):
                table[s].append(v)
        return table

    def profiles(self, metric: str) -> dict[str, list[ProfilePoint]]:
        return profile_curve(self.ratios(metric))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow(r.cells())

    @classmethod
    def read_csv(cls, path) -> "BenchReport":
        kinds = {f.name: f.type for f in fields(BenchRow)}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError("unexpected CSV header")
            rows = [BenchRow(**{k: _parse_cell(kinds[k], v) for k, v in rec.items()}) for rec in reader]
        return cls(rows)

    def write_svg(self, path) -> None:
        """One step-curve panel per profile metric."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(2, 2, figsize=(10, 8))
        for ax, metric in zip(axes.ravel(), PROFILE_METRICS):
            for solver, pts in self.profiles(metric).items():
                ax.step([p.gamma for p in pts], [p.fraction for p in pts], where="post", label=solver)
            ax.set_title(metric)
            ax.set_xlabel("gamma")
            ax.set_ylim(-0.02, 1.02)
            ax.set_xscale("symlog", linthresh=1.0)
            ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


def corpus_dir() -> Path:
    """Directory of the bundled ``.blp`` corpus."""
    return Path(str(resources.files("svfbilevel") / "corpus"))


def problem_reference(prob: BilevelProblem, use_oracle: bool = False):
    """Reference from metadata, else from the oracle when allowed, else ``None``."""
    if prob.has_reference:
        return prob.reference()
    if use_oracle and prob.d <= 2 and prob.l <= 3:
        from .oracle import global_solve

        g = global_solve(prob)
        return g.x, g.y, g.F, g.f
    return None


def _failed_row(name, solver, seed, t) -> BenchRow:
    inf = math.inf
    return BenchRow(name, solver, inf, inf, inf, False, False, False, t, -1, seed)


def run_task(path, solver: str, seed: int, use_oracle: bool = False) -> BenchRow:
    """One ``(problem, solver)`` run; failures become a row, never an exception."""
    path = Path(path)
    t0 = time.perf_counter()
    try:
        prob = load_problem(path)
    except Exception:
        return _failed_row(path.stem, solver, seed, 0.0)
    try:
        report = SOLVERS[solver](prob, seed=seed)
        metrics = evaluate_metrics(report, problem_reference(prob, use_oracle))
    except Exception:
        return _failed_row(prob.name, solver, seed, time.perf_counter() - t0)
    return BenchRow(
        prob.name,
        solver,
        metrics.eps_x,
        metrics.eps_f,
        metrics.omega,
        metrics.success,
        metrics.obj_success,
        metrics.sol_success,
        metrics.time,
        int(report.criterion),
        seed,
    )


def run_suite(
    corpus=None,
    solvers=("svf-sbal", "kp-sbal", "kp-rlx"),
    seed: int = DEFAULT_SEED,
    parallelism: int = 1,
    csv_path=None,
    svg_path=None,
    use_oracle: bool = False,
    problems=None,
) -> BenchReport:
    """Run every solver on every corpus file; rows sorted by problem then solver."""
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown:
        raise ValueError(f"unknown solvers: {unknown}")
    paths = sorted(Path(corpus or corpus_dir()).glob("*.blp"))
    if problems is not None:
        wanted = set(problems)
        paths = [p for p in paths if p.stem in wanted]
    tasks = [(p, s, seed, use_oracle) for p in paths for s in solvers]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(run_task, *zip(*tasks)))
    else:
        rows = [run_task(*t) for t in tasks]
    rows.sort(key=lambda r: (r.problem, r.solver))
    report = BenchReport(rows)
    if csv_path is not None:
        report.write_csv(csv_path)
    if svg_path is not None and rows:
        report.write_svg(svg_path)
    return report


__all__ = [
    "BenchReport",
    "BenchRow",
    "CSV_COLUMNS",
    "Metrics",
    "MissingReferenceError",
    "ProfilePoint",
    "accuracy_ratio",
    "corpus_dir",
    "evaluate_metrics",
    "performance_ratio",
    "profile_curve",
    "run_suite",
]
