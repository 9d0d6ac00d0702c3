"""Parameter policies at solve time, and benchmarks comparing them.

A :class:`ParamPolicy` maps an instance's features to a preconditioner
parameter: a fixed value, a learned expression, or a per-instance
lookup of searched optima.  :func:`bench_compare` runs every policy on
the same instances and aggregates timing, iteration and condition
statistics, one row per policy.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .datagen import _lattice
from .expr import Expression, eval_expr
from .krylov import SolverConfig, estimate_condition, solve
from .precond import DEFAULT_PARAMS, PrecondConfig, PrecondKind
from .problems import ProblemInstance

__all__ = [
    "PolicyKind",
    "ParamPolicy",
    "predict_param",
    "clamp_range",
    "BenchReport",
    "bench_compare",
    "CLAMP_RANGES",
]

# legal ranges shrunk by a safety margin
CLAMP_RANGES = {
    PrecondKind.SOR: (0.05, 1.95),
    PrecondKind.SSOR: (0.05, 1.95),
    PrecondKind.AMG: (0.0, 0.95),
}


class PolicyKind(str, Enum):
    NONE = "none"
    FIXED = "fixed"
    SYMBOLIC = "symbolic"
    OPTIMAL = "optimal"


def feature_key(features) -> tuple:
    return tuple(float(v) for v in features)


@dataclass(frozen=True)
class ParamPolicy:
    kind: PolicyKind
    value: float | None = None
    expression: Expression | None = None
    # feature_key(features) -> searched optimum
    lookup: Mapping | None = field(default=None, hash=False)

    @classmethod
    def none(cls) -> "ParamPolicy":
        """No preconditioner at all."""
        return cls(PolicyKind.NONE)

    @classmethod
    def fixed(cls, value: float) -> "ParamPolicy":
        return cls(PolicyKind.FIXED, value=float(value))

    @classmethod
    def symbolic(cls, expression: Expression) -> "ParamPolicy":
        return cls(PolicyKind.SYMBOLIC, expression=expression)

    @classmethod
    def optimal(cls, lookup: Mapping) -> "ParamPolicy":
        return cls(PolicyKind.OPTIMAL, lookup=dict(lookup))


def clamp_range(kind) -> tuple[float, float]:
    return CLAMP_RANGES[PrecondKind(kind)]


def predict_param(policy: ParamPolicy, features, kind) -> float:
    """Parameter for one instance, always inside the clamp range of ``kind``.

    >>> predict_param(ParamPolicy.fixed(2.3), [0.0], "sor")
    1.95
    """
    kind = PrecondKind(kind)
    lo, hi = CLAMP_RANGES[kind]
    if policy.kind is PolicyKind.FIXED:
        v = policy.value
    elif policy.kind is PolicyKind.SYMBOLIC:
        v = eval_expr(policy.expression, features)
    elif policy.kind is PolicyKind.OPTIMAL:
        v = policy.lookup.get(feature_key(features))
    else:
        raise ValueError("the 'none' policy has no parameter")
    if v is None or not math.isfinite(v):
        v = DEFAULT_PARAMS[kind]
    return float(min(max(v, lo), hi))


# -- benchmarking -----------------------------------------------------------

REPORT_FIELDS = ("policy", "n", "mean_time_s", "median_time_s", "q1", "q3", "var",
                 "mean_iters", "mean_cond", "n_failed")
CELL_FIELDS = ("policy", "instance", "param", "iterations", "time_s", "cond", "converged")


@dataclass
class BenchReport:
    """Aggregate rows (one per policy) and the raw per-instance cells."""

    rows: list
    cells: list
    notes: dict = field(default_factory=dict)

    def row(self, name) -> dict:
        for r in self.rows:
            if r["policy"] == name:
                return r
        raise KeyError(name)

    def policy_cells(self, name) -> list:
        return [c for c in self.cells if c["policy"] == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in REPORT_FIELDS})
        return buf.getvalue()

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CELL_FIELDS, lineterminator="\n")
        w.writeheader()
        for c in self.cells:
            w.writerow({k: _fmt(c[k]) for k in CELL_FIELDS})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _run_cell(inst: ProblemInstance, base: PrecondConfig, param, solver: SolverConfig,
              with_cond: bool) -> dict:
    cfg = PrecondConfig() if param is None else base.with_param(param)
    try:
        _, rep = solve(inst.A, inst.b, cfg, solver)
        its, t, ok = rep.iterations, rep.wall_time, rep.converged
    except (ValueError, ArithmeticError, RuntimeError):
        its, t, ok = None, None, False
    cond = math.nan
    if with_cond:
        try:
            cond = estimate_condition(inst.A, cfg)
        except (ValueError, ArithmeticError, RuntimeError):
            pass
    return {"param": param, "iterations": its, "time_s": t, "cond": cond, "converged": ok}


def _aggregate(name, cells) -> dict:
    ok = [c for c in cells if c["converged"]]
    t = np.array([c["time_s"] for c in ok], dtype=float)
    its = np.array([c["iterations"] for c in ok], dtype=float)
    cond = np.array([c["cond"] for c in cells], dtype=float)
    cond = cond[np.isfinite(cond)]
    nan = math.nan
    return {
        "policy": name,
        "n": len(cells),
        "mean_time_s": float(t.mean()) if len(t) else nan,
        "median_time_s": float(np.median(t)) if len(t) else nan,
        "q1": float(np.percentile(t, 25)) if len(t) else nan,
        "q3": float(np.percentile(t, 75)) if len(t) else nan,
        "var": float(t.var()) if len(t) else nan,
        "mean_iters": float(its.mean()) if len(its) else nan,
        "mean_cond": float(cond.mean()) if len(cond) else nan,
        "n_failed": len(cells) - len(ok),
    }


def _cell_score(cell, metric):
    if not cell["converged"]:
        return math.inf
    return cell["iterations"] if metric == "iters" else cell["time_s"]


def bench_compare(problems: Sequence[ProblemInstance], policies: Mapping[str, ParamPolicy],
                  precond: PrecondConfig, solver: SolverConfig | None = None,
                  with_cond: bool = False, optimal_constant: bool = True,
                  constant_step: float = 0.05, metric: str = "iters") -> BenchReport:
    """Run every policy on every instance and aggregate.

    Failed solves count toward ``n_failed`` and are left out of the
    time and iteration statistics.  With ``optimal_constant`` an extra
    ``optimal-constant`` row uses the single value, from a grid of
    ``constant_step`` over the clamp range, with the best mean
    ``metric`` over these instances (failures score ten times the worst
    finite value).  A per-instance-optimal policy takes, on each
    instance, the best of its lookup value and every other policy's
    parameter, so it is a true lower bound over what was evaluated.
    """
    solver = solver or SolverConfig()
    problems = list(problems)
    if not problems or not policies:
        raise ValueError("need at least one problem and one policy")
    kind = precond.kind
    cells = []
    per_inst: dict[int, list] = {i: [] for i in range(len(problems))}
    optimal_names = []
    for name, pol in policies.items():
        if pol.kind is PolicyKind.OPTIMAL:
            optimal_names.append(name)
            continue
        for i, inst in enumerate(problems):
            param = None if pol.kind is PolicyKind.NONE else predict_param(
                pol, inst.features, kind)
            cell = _run_cell(inst, precond, param, solver, with_cond)
            cell.update(policy=name, instance=i)
            cells.append(cell)
            if param is not None:
                per_inst[i].append(cell)
    notes = {}
    if optimal_constant:
        lo, hi = CLAMP_RANGES[kind]
        grid = _lattice(lo, hi, constant_step)
        table = {}
        for v in grid:
            table[v] = [_run_cell(inst, precond, v, solver, False) for inst in problems]
            for i, c in enumerate(table[v]):
                per_inst[i].append(c)
        scores = {v: [_cell_score(c, metric) for c in cs] for v, cs in table.items()}
        finite = [s for ss in scores.values() for s in ss if math.isfinite(s)]
        penalty = 10 * max(finite) if finite else math.inf
        means = {v: float(np.mean([s if math.isfinite(s) else penalty for s in ss]))
                 for v, ss in scores.items()}
        best_v = min(means, key=lambda v: (means[v], v))
        notes["optimal_constant"] = best_v
        for i, c in enumerate(table[best_v]):
            c = dict(c)
            if with_cond:
                c["cond"] = _run_cell(problems[i], precond, best_v, solver, True)["cond"]
            c.update(policy="optimal-constant", instance=i)
            cells.append(c)
    for name in optimal_names:
        pol = policies[name]
        for i, inst in enumerate(problems):
            param = predict_param(pol, inst.features, kind)
            cell = _run_cell(inst, precond, param, solver, with_cond)
            best = min([cell] + per_inst[i], key=lambda c: (_cell_score(c, metric),
                                                             c["param"]))
            best = dict(best)
            best.update(policy=name, instance=i)
            cells.append(best)
    names = list(policies) + (["optimal-constant"] if optimal_constant else [])
    order = {n: k for k, n in enumerate(names)}
    rows = [_aggregate(n, [c for c in cells if c["policy"] == n]) for n in names]
    rows.sort(key=lambda r: order[r["policy"]])
    return BenchReport(rows, cells, notes)
