"""Per-instance parameter search and the (features, optimal parameter) dataset.

Searches work on any callable ``f(param) -> float`` so they can be
checked against analytic objectives.  :func:`make_objective` binds an
instance, preconditioner kind and solver settings into such a callable.
Failed evaluations (non-convergence, solver errors, illegal parameter
values) are recorded as failures and reported with a penalty of ten
times the worst finite value seen; they always rank last.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .krylov import SolverConfig, estimate_condition, solve
from .precond import PARAM_RANGES, PrecondConfig, PrecondKind
from .problems import ProblemInstance

__all__ = [
    "ObjectiveKind",
    "Objective",
    "SearchConfig",
    "SearchError",
    "SearchResult",
    "ParamDataset",
    "objective_eval",
    "make_objective",
    "adaptive_grid_search",
    "binary_search_min",
    "product_grid_search",
    "search_instance",
    "build_dataset",
    "split_indices",
]

log = logging.getLogger(__name__)

PENALTY_FACTOR = 10.0
# parameter values are rounded to this many decimals for caching and output
_DECIMALS = 10


class SearchError(RuntimeError):
    pass


class ObjectiveKind(str, Enum):
    TIME = "time"
    ITERATIONS = "iters"
    CONDITION = "cond"
    HYBRID = "hybrid"


_KIND_WEIGHTS = {
    ObjectiveKind.TIME: (0.0, 1.0, 0.0),
    ObjectiveKind.ITERATIONS: (0.0, 0.0, 1.0),
    ObjectiveKind.CONDITION: (1.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class Objective:
    """Weighted sum ``w_cond * kappa + w_time * seconds + w_iters * iterations``.

    The pure kinds fix the weights; ``Objective(ObjectiveKind.HYBRID,
    (0.03, 1.0, 0.0))`` is the condition-number plus time blend.
    """

    kind: ObjectiveKind = ObjectiveKind.ITERATIONS
    weights: tuple = None

    def __post_init__(self):
        kind = ObjectiveKind(self.kind)
        object.__setattr__(self, "kind", kind)
        w = self.weights
        if w is None:
            if kind is ObjectiveKind.HYBRID:
                raise ValueError("hybrid objective needs explicit weights")
            w = _KIND_WEIGHTS[kind]
        w = tuple(float(v) for v in w)
        if len(w) != 3 or min(w) < 0 or max(w) == 0:
            raise ValueError("weights must be three nonnegative values, not all zero")
        object.__setattr__(self, "weights", w)

    @property
    def deterministic(self) -> bool:
        return self.weights[1] == 0.0

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "weights": list(self.weights)}

    @classmethod
    def from_json(cls, obj) -> "Objective":
        return cls(obj["kind"], tuple(obj["weights"]))


def objective_eval(instance: ProblemInstance, precond: PrecondConfig, param: float,
                   objective: Objective, solver: SolverConfig | None = None,
                   repeats: int = 3) -> float:
    """One objective value, or ``math.inf`` if the point is infeasible.

    Timed objectives take the median of ``repeats`` solves.  A solve
    that does not converge, or any error raised while building or
    applying the preconditioner, makes the point infeasible.
    """
    solver = solver or SolverConfig()
    w_cond, w_time, w_iters = objective.weights
    try:
        cfg = precond.with_param(param)
        value = 0.0
        if w_cond:
            value += w_cond * estimate_condition(instance.A, cfg)
        if w_time or w_iters:
            times, iters = [], None
            for _ in range(repeats if w_time else 1):
                _, rep = solve(instance.A, instance.b, cfg, solver)
                if not rep.converged:
                    return math.inf
                times.append(rep.wall_time)
                iters = rep.iterations
            value += w_time * statistics.median(times) + w_iters * iters
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        log.info("evaluation failed at param=%r: %s", param, exc)
        return math.inf
    return value if math.isfinite(value) else math.inf


def make_objective(instance: ProblemInstance, precond: PrecondConfig,
                   objective: Objective, solver: SolverConfig | None = None,
                   repeats: int = 3) -> Callable[[float], float]:
    def f(param):
        return objective_eval(instance, precond, param, objective, solver, repeats)
    return f


# -- searches ---------------------------------------------------------------


@dataclass
class SearchResult:
    param: tuple
    value: float
    evaluations: int
    fallback: bool = False

    @property
    def y(self) -> float:
        return self.param[0]


class _Memo:
    """Cache of evaluations keyed by the rounded parameter tuple."""

    def __init__(self, f):
        self.f = f
        self.seen: dict[tuple, float] = {}

    def __call__(self, p) -> float:
        key = tuple(round(float(v), _DECIMALS) for v in np.atleast_1d(p))
        if key not in self.seen:
            arg = key[0] if len(key) == 1 else key
            v = float(self.f(arg))
            self.seen[key] = v if math.isfinite(v) else math.inf
        return self.seen[key]

    def best(self, keys=None) -> tuple[tuple, float]:
        keys = self.seen.keys() if keys is None else keys
        # ties go to the smaller parameter (lexicographic for tuples)
        return min(((k, self.seen[k]) for k in keys), key=lambda kv: (kv[1], kv[0]))

    def reported(self, value) -> float:
        if math.isfinite(value):
            return value
        finite = [v for v in self.seen.values() if math.isfinite(v)]
        if not finite:
            raise SearchError("no feasible parameter")
        return PENALTY_FACTOR * max(finite)


def _lattice(lo, hi, step, origin=None):
    """Points ``origin + k*step`` lying in ``[lo, hi]``."""
    origin = lo if origin is None else origin
    k0 = math.ceil((lo - origin) / step - 1e-9)
    k1 = math.floor((hi - origin) / step + 1e-9)
    return [round(origin + k * step, _DECIMALS) for k in range(k0, k1 + 1)]


def _finish(memo: _Memo, fallback=False) -> SearchResult:
    key, val = memo.best()
    if not math.isfinite(val):
        raise SearchError("no feasible parameter")
    return SearchResult(key, memo.reported(val), len(memo.seen), fallback)


def adaptive_grid_search(f, lo: float, hi: float, coarse_step: float = 0.05,
                         fine_step: float = 0.001, top_k: int = 3,
                         _memo: _Memo | None = None) -> SearchResult:
    """Coarse sweep, then fine sweeps within one coarse step of the best points.

    The coarse grid is ``lo, lo + coarse_step, ..., <= hi``.  Around each
    of the ``top_k`` best coarse points, every fine-lattice point within
    ``+-coarse_step`` is evaluated.  Ties go to the smaller parameter.

    Examples
    --------
    >>> r = adaptive_grid_search(lambda w: (w - 1.3) ** 2, 0.0, 2.0)
    >>> round(r.y, 3)
    1.3
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if not 0 < fine_step < coarse_step:
        raise ValueError("need 0 < fine_step < coarse_step")
    memo = _memo or _Memo(f)
    coarse = _lattice(lo, hi, coarse_step)
    for p in coarse:
        memo(p)
    ranked = sorted(coarse, key=lambda p: (memo((p,)), p))
    for c in ranked[:top_k]:
        if not math.isfinite(memo((c,))):
            continue
        for p in _lattice(max(lo, c - coarse_step), min(hi, c + coarse_step),
                          fine_step, origin=lo):
            memo(p)
    return _finish(memo)


def binary_search_min(f, lo: float, hi: float, precision: float = 0.001,
                      coarse_step: float = 0.05, fine_step: float = 0.001,
                      fallback: bool = True) -> SearchResult:
    """Bracket-halving search for a unimodal objective.

    Starts from ``lo``, the midpoint and ``hi``.  If the left end is best
    the bracket becomes its left half; if the right end is best, the
    right half; if the middle is best, the middle half (two new points).
    Stops when the half-width drops below ``precision`` and returns the
    best point evaluated.  A middle value strictly worse than both ends
    means the objective is not unimodal, and the search falls back to
    :func:`adaptive_grid_search` (reusing evaluations done so far).
    With ``fallback=False`` the bracket keeps shrinking around the best
    of the three points instead, which suits noisy but broadly unimodal
    objectives such as restarted-GMRES iteration counts.

    Examples
    --------
    >>> round(binary_search_min(lambda w: (w - 0.8) ** 2, 0.0, 2.0).y, 3)
    0.8
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    memo = _Memo(f)
    a, c = float(lo), float(hi)
    while (c - a) / 2 > precision / 2:
        m = (a + c) / 2
        fa, fm, fc = memo(a), memo(m), memo(c)
        if fallback and fm > fa and fm > fc:
            log.info("objective not unimodal on [%g, %g]; falling back to grid", a, c)
            res = adaptive_grid_search(f, lo, hi, coarse_step, fine_step, _memo=memo)
            res.fallback = True
            return res
        h = (c - a) / 2
        # ties resolved toward the smaller parameter, as in the grid search
        best = min((fa, 0), (fm, 1), (fc, 2))[1]
        if best == 0:
            c = m
        elif best == 2:
            a = m
        else:
            a, c = m - h / 2, m + h / 2
    return _finish(memo)


def product_grid_search(f, ranges: Sequence[tuple], coarse_step: float = 0.05,
                        fine_step: float = 0.01) -> SearchResult:
    """Full product grid at ``coarse_step`` then a product fine grid
    within one coarse step of the best cell.

    ``f`` takes a tuple of parameters.  An axis with ``lo == hi`` holds
    a single point, reducing to a lower-dimensional search.
    """
    if not 0 < fine_step < coarse_step:
        raise ValueError("need 0 < fine_step < coarse_step")
    memo = _Memo(lambda p: f(tuple(np.atleast_1d(p))))

    def axes(step, centre=None):
        out = []
        for d, (lo, hi) in enumerate(ranges):
            if lo == hi:
                out.append([float(lo)])
            elif centre is None:
                out.append(_lattice(lo, hi, step))
            else:
                out.append(_lattice(max(lo, centre[d] - coarse_step),
                                    min(hi, centre[d] + coarse_step), step, origin=lo))
        return out

    for p in _product(axes(coarse_step)):
        memo(p)
    centre, val = memo.best()
    if math.isfinite(val):
        for p in _product(axes(fine_step, centre)):
            memo(p)
    return _finish(memo)


def _product(axes):
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    method: str = "grid"            # "grid" or "binary"
    lo: float | None = None         # defaults to the preconditioner's range
    hi: float | None = None
    coarse_step: float = 0.05
    fine_step: float = 0.001
    precision: float = 0.001
    top_k: int = 3
    fallback: bool = True
    repeats: int = 3
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.method not in ("grid", "binary"):
            raise ValueError(f"unknown search method {self.method!r}")

    def bounds(self, kind: PrecondKind) -> tuple[float, float]:
        lo, hi = PARAM_RANGES[PrecondKind(kind)]
        return (lo if self.lo is None else self.lo, hi if self.hi is None else self.hi)

    def to_json(self) -> dict:
        return {"method": self.method, "lo": self.lo, "hi": self.hi,
                "coarse_step": self.coarse_step, "fine_step": self.fine_step,
                "precision": self.precision, "top_k": self.top_k,
                "fallback": self.fallback,
                "repeats": self.repeats, "solver": self.solver.to_json()}

    @classmethod
    def from_json(cls, obj) -> "SearchConfig":
        obj = dict(obj)
        obj["solver"] = SolverConfig.from_json(obj["solver"])
        return cls(**obj)


def search_instance(instance: ProblemInstance, precond: PrecondConfig,
                    objective: Objective, search: SearchConfig) -> SearchResult:
    f = make_objective(instance, precond, objective, search.solver, search.repeats)
    lo, hi = search.bounds(precond.kind)
    if search.method == "binary":
        return binary_search_min(f, lo, hi, search.precision, search.coarse_step,
                                 search.fine_step, search.fallback)
    return adaptive_grid_search(f, lo, hi, search.coarse_step, search.fine_step,
                                search.top_k)


def split_indices(n: int, seed: int = 0, n_test: int | None = None,
                  ratio: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/test split; by default ``ratio``:1, so 1200 -> 1000/200."""
    if n_test is None:
        n_test = n - int(round(n * ratio / (ratio + 1)))
    if not 0 <= n_test <= n:
        raise ValueError("test size out of range")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class ParamDataset:
    """Rows of ``(features, optimal parameter(s), objective value)``."""

    X: np.ndarray
    Y: np.ndarray
    objective_values: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(len(self.X), -1)
        self.objective_values = np.asarray(self.objective_values, dtype=float)
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)

    def __len__(self):
        return len(self.X)

    @property
    def feature_names(self) -> list[str]:
        return [f"x{k + 1}" for k in range(self.X.shape[1])]

    @property
    def target_names(self) -> list[str]:
        return ["y"] + [f"y{k + 1}" for k in range(1, self.Y.shape[1])]

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.train_idx], self.Y[self.train_idx, 0]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.test_idx], self.Y[self.test_idx, 0]

    def write(self, path) -> None:
        """CSV rows plus a ``<path>.meta.json`` sidecar with the split."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.feature_names + self.target_names + ["objective_value"])
            for x, y, v in zip(self.X, self.Y, self.objective_values):
                w.writerow([repr(float(t)) for t in (*x, *y, v)])
        meta = dict(self.meta)
        meta["train_idx"] = [int(i) for i in self.train_idx]
        meta["test_idx"] = [int(i) for i in self.test_idx]
        with open(_meta_path(path), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> "ParamDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        nx = sum(1 for h in header if h.startswith("x"))
        ny = sum(1 for h in header if h.startswith("y"))
        data = np.array([[float(t) for t in r] for r in body]).reshape(len(body), len(header))
        try:
            with open(_meta_path(path)) as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        train = meta.pop("train_idx", list(range(len(body))))
        test = meta.pop("test_idx", [])
        return cls(data[:, :nx], data[:, nx:nx + ny], data[:, nx + ny],
                   train, test, meta)


def _meta_path(path) -> str:
    return str(path) + ".meta.json"


def _search_row(args):
    idx, inst, precond, objective, search = args
    try:
        res = search_instance(inst, precond, objective, search)
    except SearchError as exc:
        return idx, None, str(exc)
    return idx, res, None


def build_dataset(problems: Sequence[ProblemInstance], precond: PrecondConfig,
                  objective: Objective, search: SearchConfig | None = None,
                  n: int | None = None, seed: int = 0, n_test: int | None = None,
                  jobs: int = 1) -> ParamDataset:
    """Search every instance and assemble the dataset.

    Rows keep the order of ``problems``.  Instances whose search fails
    are dropped (and logged) before the split is drawn.
    """
    search = search or SearchConfig()
    problems = list(problems)[:n] if n is not None else list(problems)
    tasks = [(i, p, precond, objective, search) for i, p in enumerate(problems)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_search_row, tasks))
    else:
        results = [_search_row(t) for t in tasks]
    X, Y, V, dropped = [], [], [], []
    for idx, res, err in results:
        if res is None:
            log.warning("instance %d dropped: %s", idx, err)
            dropped.append(idx)
            continue
        X.append(problems[idx].features)
        Y.append(res.param)
        V.append(res.value)
    if not X:
        raise SearchError("every instance failed")
    train, test = split_indices(len(X), seed, n_test)
    meta = {
        "family": problems[0].family.value,
        "precond": precond.to_json(),
        "objective": objective.to_json(),
        "search": search.to_json(),
        "seed": seed,
        "dropped": dropped,
    }
    return ParamDataset(np.array(X), np.array(Y), np.array(V), train, test, meta)

