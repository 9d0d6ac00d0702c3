"""Parameterized preconditioners: Jacobi, SOR, SSOR and classical AMG.

Splitting convention throughout is ``A = D + L + U`` (diagonal, strictly
lower, strictly upper).  One SOR sweep is

    x_new = (D + w L)^{-1} [(1 - w) D x + w b - w U x]

and the SSOR preconditioner is

    M = 1/(w (2 - w)) (D + w L) D^{-1} (D + w U).

The AMG hierarchy uses Ruge-Stuben coarsening driven by the strength
threshold ``theta``, direct interpolation and Galerkin coarse operators.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

from . import _kernels
from .sparse import CsrMatrix, _assemble

log = logging.getLogger(__name__)

__all__ = [
    "PrecondKind",
    "PrecondConfig",
    "PrecondError",
    "sor_iterate",
    "sor_precond_apply",
    "ssor_precond_apply",
    "amg_strength",
    "amg_setup",
    "amg_vcycle_apply",
    "AmgHierarchy",
    "make_preconditioner",
    "PARAM_RANGES",
    "DEFAULT_PARAMS",
]


class PrecondError(ValueError):
    pass


class PrecondKind(str, Enum):
    NONE = "none"
    JACOBI = "jacobi"
    SOR = "sor"
    SSOR = "ssor"
    AMG = "amg"


# open/closed legal ranges of the tunable parameter of each kind
PARAM_RANGES = {
    PrecondKind.SOR: (0.0, 2.0),
    PrecondKind.SSOR: (0.0, 2.0),
    PrecondKind.AMG: (0.0, 1.0),
}
# library defaults: omega = 1 (Gauss-Seidel), theta = 0
DEFAULT_PARAMS = {PrecondKind.SOR: 1.0, PrecondKind.SSOR: 1.0, PrecondKind.AMG: 0.0}

JACOBI_WEIGHT = 2.0 / 3.0


@dataclass(frozen=True)
class PrecondConfig:
    kind: PrecondKind = PrecondKind.NONE
    omega: float = 1.0
    theta: float = 0.0
    sweeps: int = 1
    smoother: str = "jacobi"
    coarse_cap: int = 64

    def __post_init__(self):
        object.__setattr__(self, "kind", PrecondKind(self.kind))
        if self.kind in (PrecondKind.SOR, PrecondKind.SSOR) or (
            self.kind is PrecondKind.AMG and self.smoother == "sor"
        ):
            if not 0.0 < self.omega < 2.0:
                raise PrecondError(f"omega={self.omega} outside (0, 2)")
        if self.kind is PrecondKind.AMG and not 0.0 <= self.theta < 1.0:
            raise PrecondError(f"theta={self.theta} outside [0, 1)")
        if self.sweeps < 1:
            raise PrecondError("sweeps must be >= 1")
        if self.smoother not in ("jacobi", "sor"):
            raise PrecondError(f"unknown smoother {self.smoother!r}")

    @property
    def param(self) -> float | None:
        """The single tunable value for this kind (None if there is none)."""
        if self.kind in (PrecondKind.SOR, PrecondKind.SSOR):
            return self.omega
        if self.kind is PrecondKind.AMG:
            return self.theta
        return None

    def with_param(self, value: float) -> "PrecondConfig":
        if self.kind is PrecondKind.AMG:
            return PrecondConfig(self.kind, self.omega, value, self.sweeps,
                                 self.smoother, self.coarse_cap)
        return PrecondConfig(self.kind, value, self.theta, self.sweeps,
                             self.smoother, self.coarse_cap)

    def to_json(self) -> dict:
        obj = {"kind": self.kind.value}
        if self.kind in (PrecondKind.SOR, PrecondKind.SSOR):
            obj["omega"] = self.omega
        if self.kind is PrecondKind.SOR:
            obj["sweeps"] = self.sweeps
        if self.kind is PrecondKind.AMG:
            obj["theta"] = self.theta
            obj["smoother"] = self.smoother
            if self.smoother == "sor":
                obj["omega"] = self.omega
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PrecondConfig":
        return cls(
            kind=obj["kind"],
            omega=obj.get("omega", 1.0),
            theta=obj.get("theta", 0.0),
            sweeps=obj.get("sweeps", 1),
            smoother=obj.get("smoother", "jacobi"),
        )


# -- relaxation -------------------------------------------------------------


def _checked_diag(A: CsrMatrix) -> np.ndarray:
    d = A.diagonal()
    zero = np.flatnonzero(d == 0.0)
    if len(zero):
        raise PrecondError(f"zero diagonal entry in row {zero[0]}")
    return d


def _check_omega(omega):
    if not 0.0 < omega < 2.0:
        raise PrecondError(f"omega={omega} outside (0, 2)")


def sor_iterate(A: CsrMatrix, b, x, omega: float, diag=None) -> np.ndarray:
    """One forward SOR sweep; returns a new vector."""
    _check_omega(omega)
    d = _checked_diag(A) if diag is None else diag
    out = np.array(x, dtype=np.float64, copy=True)
    _kernels.sor_forward(A.row_offsets, A.col_indices, A.values, d,
                         np.asarray(b, dtype=np.float64), out, float(omega))
    return out


def sor_precond_apply(A: CsrMatrix, r, omega: float, sweeps: int = 1,
                      diag=None) -> np.ndarray:
    """``sweeps`` SOR sweeps on ``A z = r`` from ``z = 0``."""
    _check_omega(omega)
    d = _checked_diag(A) if diag is None else diag
    r = np.asarray(r, dtype=np.float64)
    z = np.zeros_like(r)
    for _ in range(sweeps):
        _kernels.sor_forward(A.row_offsets, A.col_indices, A.values, d, r, z, float(omega))
    return z


def ssor_precond_apply(A: CsrMatrix, r, omega: float, diag=None,
                       check_symmetry: bool = True) -> np.ndarray:
    """``z = M^{-1} r`` for the SSOR preconditioner.

    Applied as a forward triangular solve with ``D + wL``, a diagonal
    scaling by ``D`` and a backward solve with ``D + wU``.
    """
    _check_omega(omega)
    if check_symmetry and not A.is_structurally_symmetric():
        raise PrecondError("SSOR requires a (structurally) symmetric matrix")
    d = _checked_diag(A) if diag is None else diag
    r = np.asarray(r, dtype=np.float64)
    y = _kernels.lower_solve(A.row_offsets, A.col_indices, A.values, d, r, float(omega))
    y *= d
    z = _kernels.upper_solve(A.row_offsets, A.col_indices, A.values, d, y, float(omega))
    z *= omega * (2.0 - omega)
    return z


# -- algebraic multigrid ----------------------------------------------------


def amg_strength(A: CsrMatrix, theta: float) -> CsrMatrix:
    """Classical strength of connection.

    Row ``i`` strongly depends on ``j != i`` when
    ``-s a_ij >= theta * max_{k != i}(-s a_ik)`` with ``s = sign(a_ii)``
    and ``-s a_ij > 0``.  For the usual positive diagonal this is the
    textbook rule over negative off-diagonals.  The result carries the
    original ``a_ij`` on the strong entries.
    """
    if not 0.0 <= theta < 1.0:
        raise PrecondError(f"theta={theta} outside [0, 1)")
    rows = A.row_ids()
    cols = A.col_indices
    sign = np.sign(A.diagonal())
    sign[sign == 0] = 1.0
    neg = -sign[rows] * A.values
    off = rows != cols
    cand = off & (neg > 0)
    row_max = np.zeros(A.nrows)
    np.maximum.at(row_max, rows[cand], neg[cand])
    strong = cand & (neg >= theta * row_max[rows])
    return _assemble(A.nrows, A.ncols, rows[strong], cols[strong], A.values[strong])


def _rs_split(S: CsrMatrix) -> np.ndarray:
    """Ruge-Stuben first-pass C/F splitting; returns a boolean C mask."""
    n = S.nrows
    ST = S.transpose()  # row i of ST: points that strongly depend on i
    lam = np.diff(ST.row_offsets).astype(np.int64)
    UNDECIDED, C, F = 0, 1, 2
    state = np.zeros(n, dtype=np.int8)
    # points that neither influence nor depend on anything are F
    isolated = (lam == 0) & (np.diff(S.row_offsets) == 0)
    state[isolated] = F
    heap = [(-int(lam[i]), i) for i in range(n) if state[i] == UNDECIDED]
    heapq.heapify(heap)
    S_ptr, S_idx = S.row_offsets, S.col_indices
    T_ptr, T_idx = ST.row_offsets, ST.col_indices
    while heap:
        neg_l, i = heapq.heappop(heap)
        if state[i] != UNDECIDED or -neg_l != lam[i]:
            continue
        state[i] = C
        for j in T_idx[T_ptr[i]:T_ptr[i + 1]]:
            if state[j] != UNDECIDED:
                continue
            state[j] = F
            for k in S_idx[S_ptr[j]:S_ptr[j + 1]]:
                if state[k] == UNDECIDED:
                    lam[k] += 1
                    heapq.heappush(heap, (-int(lam[k]), k))
    return state == C


def _direct_interpolation(A: CsrMatrix, S: CsrMatrix, is_c: np.ndarray) -> CsrMatrix:
    n = A.nrows
    cidx = np.full(n, -1, dtype=np.int64)
    cidx[is_c] = np.arange(int(is_c.sum()))
    rows = A.row_ids()
    off = rows != A.col_indices
    diag = A.diagonal()
    row_sum_off = np.zeros(n)
    np.add.at(row_sum_off, rows[off], A.values[off])

    srows = S.row_ids()
    sc = is_c[S.col_indices]
    c_sum = np.zeros(n)
    np.add.at(c_sum, srows[sc], S.values[sc])

    f_rows = srows[sc & ~is_c[srows]]
    f_cols = S.col_indices[sc & ~is_c[srows]]
    f_vals = S.values[sc & ~is_c[srows]]
    alpha = row_sum_off[f_rows] / c_sum[f_rows]
    w = -alpha * f_vals / diag[f_rows]

    c_pts = np.flatnonzero(is_c)
    P_rows = np.concatenate([c_pts, f_rows])
    P_cols = np.concatenate([cidx[c_pts], cidx[f_cols]])
    P_vals = np.concatenate([np.ones(len(c_pts)), w])
    return _assemble(n, len(c_pts), P_rows, P_cols, P_vals)


@dataclass
class AmgLevel:
    A: CsrMatrix
    diag: np.ndarray
    P: CsrMatrix | None = None


@dataclass
class AmgHierarchy:
    levels: list
    coarse_solver: object = None
    theta: float = 0.0
    smoother: str = "jacobi"
    omega: float = 1.0
    jacobi_fallback: bool = False
    warnings: list = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [lvl.A.nrows for lvl in self.levels]

    def operator_complexity(self) -> float:
        return sum(lvl.A.nnz for lvl in self.levels) / self.levels[0].A.nnz


def _coarse_solver(A: CsrMatrix):
    if A.nrows <= 2000:
        lu = scipy.linalg.lu_factor(A.scipy().toarray())
        return lambda r: scipy.linalg.lu_solve(lu, r)
    lu = spla.splu(sparse.csc_matrix(A.scipy()))
    return lu.solve


def amg_setup(A: CsrMatrix, theta: float = 0.0, coarse_cap: int = 64,
              smoother: str = "jacobi", omega: float = 1.0,
              max_levels: int = 25) -> AmgHierarchy:
    """Build a Ruge-Stuben hierarchy down to at most ``coarse_cap`` unknowns."""
    if A.nrows != A.ncols:
        raise PrecondError("AMG needs a square matrix")
    if not 0.0 <= theta < 1.0:
        raise PrecondError(f"theta={theta} outside [0, 1)")
    levels = [AmgLevel(A, _checked_diag(A))]
    H = AmgHierarchy(levels, theta=theta, smoother=smoother, omega=omega)
    while levels[-1].A.nrows > coarse_cap and len(levels) < max_levels:
        Al = levels[-1].A
        S = amg_strength(Al, theta)
        is_c = _rs_split(S)
        nc = int(is_c.sum())
        if nc == 0 or nc == Al.nrows:
            if len(levels) == 1:
                H.jacobi_fallback = True
                H.warnings.append("coarsening stagnated on the finest level; using Jacobi")
                log.warning("AMG coarsening stagnated (theta=%g); Jacobi fallback", theta)
                return H
            H.warnings.append(f"coarsening stagnated at level {len(levels) - 1}")
            break
        P = _direct_interpolation(Al, S, is_c)
        Ps = P.scipy()
        Ac = CsrMatrix.from_scipy((Ps.T @ Al.scipy() @ Ps).tocsr())
        levels[-1].P = P
        levels.append(AmgLevel(Ac, _checked_diag(Ac)))
    H.coarse_solver = _coarse_solver(levels[-1].A)
    return H


def _smooth(H: AmgHierarchy, lvl: AmgLevel, r, x, forward: bool):
    A = lvl.A
    if H.smoother == "sor":
        sweep = _kernels.sor_forward if forward else _kernels.sor_backward
        sweep(A.row_offsets, A.col_indices, A.values, lvl.diag, r, x, H.omega)
        return x
    return x + JACOBI_WEIGHT * (r - A.scipy() @ x) / lvl.diag


def _vcycle(H: AmgHierarchy, k: int, r):
    lvl = H.levels[k]
    if k == len(H.levels) - 1:
        return H.coarse_solver(r)
    x = _smooth(H, lvl, r, np.zeros_like(r), forward=True)
    Ps = lvl.P.scipy()
    rc = Ps.T @ (r - lvl.A.scipy() @ x)
    x = x + Ps @ _vcycle(H, k + 1, rc)
    return _smooth(H, lvl, r, x, forward=False)


def amg_vcycle_apply(H: AmgHierarchy, r) -> np.ndarray:
    """One V(1,1)-cycle on ``A z = r`` from a zero initial guess."""
    r = np.asarray(r, dtype=np.float64)
    if H.jacobi_fallback:
        return r / H.levels[0].diag
    return np.asarray(_vcycle(H, 0, r), dtype=np.float64)


# -- uniform preconditioner interface ---------------------------------------


class Preconditioner:
    """``apply(r)`` returns an approximation of ``A^{-1} r``."""

    symmetric = True

    def __init__(self, A: CsrMatrix, cfg: PrecondConfig):
        self.A = A
        self.cfg = cfg

    def apply(self, r):
        return np.array(r, dtype=np.float64, copy=True)


class _Jacobi(Preconditioner):
    def __init__(self, A, cfg):
        super().__init__(A, cfg)
        self.diag = _checked_diag(A)

    def apply(self, r):
        return r / self.diag


class _Sor(Preconditioner):
    symmetric = False

    def __init__(self, A, cfg):
        super().__init__(A, cfg)
        self.diag = _checked_diag(A)

    def apply(self, r):
        return sor_precond_apply(self.A, r, self.cfg.omega, self.cfg.sweeps, diag=self.diag)


class _Ssor(Preconditioner):
    def __init__(self, A, cfg):
        super().__init__(A, cfg)
        if not A.is_structurally_symmetric():
            raise PrecondError("SSOR requires a (structurally) symmetric matrix")
        self.diag = _checked_diag(A)

    def apply(self, r):
        return ssor_precond_apply(self.A, r, self.cfg.omega, diag=self.diag,
                                  check_symmetry=False)


class _Amg(Preconditioner):
    def __init__(self, A, cfg):
        super().__init__(A, cfg)
        self.hierarchy = amg_setup(A, cfg.theta, cfg.coarse_cap, cfg.smoother, cfg.omega)

    def apply(self, r):
        return amg_vcycle_apply(self.hierarchy, r)


_CLASSES = {
    PrecondKind.NONE: Preconditioner,
    PrecondKind.JACOBI: _Jacobi,
    PrecondKind.SOR: _Sor,
    PrecondKind.SSOR: _Ssor,
    PrecondKind.AMG: _Amg,
}


def make_preconditioner(A: CsrMatrix, cfg: PrecondConfig | None = None) -> Preconditioner:
    cfg = cfg or PrecondConfig()
    return _CLASSES[cfg.kind](A, cfg)
