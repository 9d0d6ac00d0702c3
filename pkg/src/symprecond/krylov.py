"""Preconditioned Krylov solvers and an Arnoldi condition-number estimate.

All solvers start from ``x0 = 0`` and stop on the true relative residual
``||b - A x|| / ||b||``, whatever preconditioner is in use.  GMRES is
left-preconditioned and restarted.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .precond import Preconditioner, PrecondConfig, make_preconditioner
from .sparse import CsrMatrix

__all__ = [
    "Method",
    "SolverConfig",
    "SolveReport",
    "cg_solve",
    "gmres_solve",
    "richardson_solve",
    "solve",
    "estimate_condition",
    "relative_residual",
    "KAPPA_CAP",
]

KAPPA_CAP = 1e14


class Method(str, Enum):
    CG = "cg"
    GMRES = "gmres"
    # stationary iteration x <- x + M^{-1}(b - A x); with one SOR sweep as M
    # this is plain SOR
    RICHARDSON = "richardson"


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.GMRES
    tolerance: float = 1e-7
    max_iters: int = 10_000
    restart: int = 30

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    def to_json(self) -> dict:
        return {"method": self.method.value, "tolerance": self.tolerance,
                "max_iters": self.max_iters, "restart": self.restart}

    @classmethod
    def from_json(cls, obj) -> "SolverConfig":
        return cls(**obj)


@dataclass
class SolveReport:
    iterations: int
    wall_time: float
    final_relative_residual: float
    converged: bool
    breakdown_flag: bool = False
    setup_time: float = 0.0
    # GMRES: per-iteration (cycle, preconditioned residual norm) pairs
    residual_history: list = field(default_factory=list, repr=False)

    CSV_FIELDS = ("problem_id", "method", "precond", "param", "iterations",
                  "time_s", "relres", "converged")

    def csv_row(self, problem_id, method, precond, param) -> dict:
        return {
            "problem_id": problem_id,
            "method": getattr(method, "value", method),
            "precond": getattr(precond, "value", precond),
            "param": "" if param is None else repr(float(param)),
            "iterations": self.iterations,
            "time_s": repr(self.wall_time),
            "relres": repr(self.final_relative_residual),
            "converged": int(self.converged),
        }

    @classmethod
    def write_csv(cls, fh, rows):
        writer = csv.DictWriter(fh, fieldnames=cls.CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    @classmethod
    def to_csv(cls, rows) -> str:
        buf = io.StringIO()
        cls.write_csv(buf, rows)
        return buf.getvalue()


def relative_residual(A: CsrMatrix, x, b) -> float:
    bnorm = np.linalg.norm(b)
    r = np.linalg.norm(b - A.scipy() @ x)
    return float(r / bnorm) if bnorm > 0 else float(r)


def _setup(A, precond):
    t0 = time.perf_counter()
    if isinstance(precond, Preconditioner):
        M = precond
    else:
        M = make_preconditioner(A, precond if precond is not None else PrecondConfig())
    return M, time.perf_counter() - t0


def _trivial_rhs(A, b, t0, setup):
    x = np.zeros(A.ncols)
    rep = SolveReport(0, time.perf_counter() - t0, 0.0, True, setup_time=setup)
    return x, rep


def cg_solve(A: CsrMatrix, b, precond=None, cfg: SolverConfig | None = None):
    """Preconditioned conjugate gradients.

    Works for symmetric definite ``A`` of either sign.  A curvature
    ``p^T A p`` that vanishes, is not finite, or changes sign between
    iterations is reported as breakdown.
    """
    cfg = cfg or SolverConfig(Method.CG)
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    M, setup = _setup(A, precond)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _trivial_rhs(A, b, t0, setup)
    As = A.scipy()
    x = np.zeros_like(b)
    r = b.copy()
    z = M.apply(r)
    p = z.copy()
    rz = r @ z
    relres = 1.0
    breakdown = False
    converged = False
    it = 0
    sign = 0.0
    while it < cfg.max_iters:
        Ap = As @ p
        pAp = p @ Ap
        sign = sign or math.copysign(1.0, pAp)
        if pAp == 0.0 or not math.isfinite(pAp) or math.copysign(1.0, pAp) != sign:
            breakdown = True
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        relres = np.linalg.norm(r) / bnorm
        if relres <= cfg.tolerance:
            # confirm against the true residual before stopping
            r = b - As @ x
            relres = np.linalg.norm(r) / bnorm
            if relres <= cfg.tolerance:
                converged = True
                break
        z = M.apply(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    relres = relative_residual(A, x, b)
    rep = SolveReport(it, time.perf_counter() - t0, relres,
                      converged and relres <= cfg.tolerance, breakdown, setup)
    return x, rep


def gmres_solve(A: CsrMatrix, b, precond=None, cfg: SolverConfig | None = None):
    """Left-preconditioned restarted GMRES(restart).

    The Arnoldi process runs on ``M^{-1} A``.  Products ``A v_j`` are
    kept so the true residual ``r0 - A V y`` can be checked each step
    without an extra matrix-vector product.
    """
    cfg = cfg or SolverConfig(Method.GMRES)
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    M, setup = _setup(A, precond)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _trivial_rhs(A, b, t0, setup)
    As = A.scipy()
    n = len(b)
    m = cfg.restart
    x = np.zeros(n)
    it = 0
    cycle = 0
    history = []
    converged = False
    breakdown = False
    r0 = b.copy()
    relres = 1.0
    while it < cfg.max_iters and not converged:
        z = M.apply(r0)
        beta = np.linalg.norm(z)
        if beta == 0.0 or not math.isfinite(beta):
            breakdown = not math.isfinite(beta)
            break
        V = np.empty((m + 1, n))
        AV = np.empty((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = z / beta
        y = np.zeros(0)
        k = 0
        for j in range(m):
            if it >= cfg.max_iters:
                break
            AV[j] = As @ V[j]
            w = M.apply(AV[j])
            # classical Gram-Schmidt, applied twice
            for _ in range(2):
                c = V[: j + 1] @ w
                H[: j + 1, j] += c
                w -= c @ V[: j + 1]
            H[j + 1, j] = np.linalg.norm(w)
            lucky = H[j + 1, j] <= 1e-14 * beta
            if not lucky:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = math.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0 or not math.isfinite(denom):
                breakdown = True
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            k = j + 1
            history.append((cycle, abs(g[j + 1])))
            y = _back_substitute(H[:k, :k], g[:k])
            r_true = r0 - y @ AV[:k]
            relres = np.linalg.norm(r_true) / bnorm
            if relres <= cfg.tolerance:
                converged = True
                break
            if lucky:
                break
        if k == 0:
            break
        x += y @ V[:k]
        r0 = b - As @ x
        relres = np.linalg.norm(r0) / bnorm
        converged = relres <= cfg.tolerance
        if breakdown:
            break
        cycle += 1
    rep = SolveReport(it, time.perf_counter() - t0, relative_residual(A, x, b), False,
                      breakdown, setup, history)
    rep.converged = rep.final_relative_residual <= cfg.tolerance
    return x, rep


def _back_substitute(R, g):
    return scipy.linalg.solve_triangular(R, g, check_finite=False)


def richardson_solve(A: CsrMatrix, b, precond=None, cfg: SolverConfig | None = None):
    """Stationary iteration ``x <- x + M^{-1}(b - A x)``."""
    cfg = cfg or SolverConfig(Method.RICHARDSON)
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    M, setup = _setup(A, precond)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _trivial_rhs(A, b, t0, setup)
    As = A.scipy()
    x = np.zeros_like(b)
    r = b.copy()
    it = 0
    relres = 1.0
    converged = False
    while it < cfg.max_iters:
        x += M.apply(r)
        r = b - As @ x
        it += 1
        relres = np.linalg.norm(r) / bnorm
        if relres <= cfg.tolerance:
            converged = True
            break
        if not math.isfinite(relres) or relres > 1e12:
            break
    rep = SolveReport(it, time.perf_counter() - t0, float(relres), converged,
                      setup_time=setup)
    return x, rep


_SOLVERS = {Method.CG: cg_solve, Method.GMRES: gmres_solve,
            Method.RICHARDSON: richardson_solve}


def solve(A: CsrMatrix, b, precond=None, cfg: SolverConfig | None = None):
    cfg = cfg or SolverConfig()
    return _SOLVERS[cfg.method](A, b, precond, cfg)


def estimate_condition(A: CsrMatrix, precond=None, steps: int | None = None,
                       seed: int = 0, return_info: bool = False):
    """Estimate ``sigma_max / sigma_min`` of ``M^{-1} A`` by Arnoldi.

    Runs ``min(n, 60)`` steps (or ``steps``) from a seeded random start
    vector and takes the extreme singular values of the square
    Hessenberg matrix.  A numerically singular Hessenberg gives
    ``KAPPA_CAP`` and ``info["capped"] = True``.
    """
    M, _ = _setup(A, precond)
    n = A.nrows
    m = min(n, 60) if steps is None else min(n, steps)
    As = A.scipy()
    v = np.random.default_rng(seed).standard_normal(n)
    V = np.empty((m + 1, n))
    H = np.zeros((m + 1, m))
    V[0] = v / np.linalg.norm(v)
    k = 0
    for j in range(m):
        w = M.apply(As @ V[j])
        for _ in range(2):
            c = V[: j + 1] @ w
            H[: j + 1, j] += c
            w -= c @ V[: j + 1]
        H[j + 1, j] = np.linalg.norm(w)
        k = j + 1
        if H[j + 1, j] <= 1e-12 * np.abs(H[: j + 2, : j + 1]).max():
            break
        V[j + 1] = w / H[j + 1, j]
    sv = np.linalg.svd(H[:k, :k], compute_uv=False)
    capped = not np.all(np.isfinite(sv)) or sv[-1] < 1e-14 * sv[0]
    kappa = KAPPA_CAP if capped else float(sv[0] / sv[-1])
    if return_info:
        return kappa, {"capped": bool(capped), "steps": k,
                       "sigma_max": float(sv[0]), "sigma_min": float(sv[-1])}
    return kappa
