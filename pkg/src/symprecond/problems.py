"""Linear systems from parameterized PDEs on the unit square.

Four families are supported.  Each discretizes on an ``n x n`` grid of
interior points with spacing ``h = 1/(n+1)`` and numbers unknowns
``k = i + j*n`` (``i`` along x, ``j`` along y).

===========  ==========================================  ==========
family       operator                                     features
===========  ==========================================  ==========
elliptic     a11 u_xx + a12 u_xy + a22 u_yy               6
             + a1 u_x + a2 u_y + a0 u = f
darcy        -div(K grad u) = f, K a 4x4 Chebyshev field  16
poisson      -lap(u) = f, Chebyshev boundary and source   8
thermal      -lap(T) = 0, Chebyshev top/bottom, constant  6
             left/right temperatures
===========  ==========================================  ==========

Everything here is deterministic given (features, grid_n, seed), so a
problem file may omit the assembled matrix and rebuild it on load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .sparse import CsrMatrix, _assemble

__all__ = [
    "Family",
    "FEATURE_COUNTS",
    "ProblemInstance",
    "Cheb2D",
    "cheb2d_eval",
    "gen_elliptic",
    "gen_darcy",
    "gen_poisson",
    "gen_thermal",
    "build_instance",
    "generate_problems",
    "sample_features",
    "instance_seeds",
    "write_problems",
    "read_problems",
    "DEFAULT_GRID_N",
]

DEFAULT_GRID_N = 64


class Family(str, Enum):
    ELLIPTIC = "elliptic"
    DARCY = "darcy"
    POISSON = "poisson"
    THERMAL = "thermal"


FEATURE_COUNTS = {Family.ELLIPTIC: 6, Family.DARCY: 16, Family.POISSON: 8, Family.THERMAL: 6}


class ProblemError(ValueError):
    pass


@dataclass(eq=False)
class ProblemInstance:
    family: Family
    features: np.ndarray
    A: CsrMatrix
    b: np.ndarray
    grid_n: int
    seed: int

    def __post_init__(self):
        self.family = Family(self.family)
        n2 = self.grid_n * self.grid_n
        if not (len(self.b) == self.A.nrows == n2):
            raise ProblemError("b, A and grid size disagree")
        if len(self.features) != FEATURE_COUNTS[self.family]:
            raise ProblemError(
                f"{self.family.value} expects {FEATURE_COUNTS[self.family]} features"
            )

    @property
    def n(self) -> int:
        return self.A.nrows

    def to_json(self, compact: bool = False) -> dict:
        obj = {
            "family": self.family.value,
            "features": [float(v) for v in self.features],
            "grid_n": self.grid_n,
            "seed": int(self.seed),
        }
        if not compact:
            obj["matrix"] = self.A.to_json()
            obj["b"] = [float(v) for v in self.b]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ProblemInstance":
        if "matrix" not in obj:
            return build_instance(obj["family"], obj["features"], obj["grid_n"], obj["seed"])
        return cls(
            family=Family(obj["family"]),
            features=np.asarray(obj["features"], dtype=float),
            A=CsrMatrix.from_json(obj["matrix"]),
            b=np.asarray(obj["b"], dtype=float),
            grid_n=int(obj["grid_n"]),
            seed=int(obj["seed"]),
        )


# -- Chebyshev fields -------------------------------------------------------


@dataclass
class Cheb2D:
    """Tensor Chebyshev series; ``coeffs[j, k]`` multiplies ``T_j(x) T_k(y)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if not np.all(np.isfinite(self.coeffs)):
            raise ProblemError("Chebyshev coefficients must be finite")

    @classmethod
    def from_features(cls, feats: Sequence[float], deg_x: int, deg_y: int) -> "Cheb2D":
        # features run x-fastest: 1, x, x^2, ..., y, xy, ...
        return cls(np.asarray(feats, dtype=float).reshape(deg_y + 1, deg_x + 1).T)

    def __call__(self, x, y):
        return cheb2d_eval(self, x, y)


def _cheb_basis(t, degree):
    t = np.asarray(t, dtype=float)
    out = [np.ones_like(t)]
    if degree >= 1:
        out.append(t.copy())
    for _ in range(2, degree + 1):
        out.append(2.0 * t * out[-1] - out[-2])
    return out


def cheb2d_eval(c: Cheb2D, x, y):
    """Evaluate ``sum c_jk T_j(x) T_k(y)`` for ``x, y`` in ``[-1, 1]``."""
    dx, dy = c.coeffs.shape[0] - 1, c.coeffs.shape[1] - 1
    tx = _cheb_basis(x, dx)
    ty = _cheb_basis(y, dy)
    total = 0.0
    for j in range(dx + 1):
        row = 0.0
        for k in range(dy + 1):
            row = row + c.coeffs[j, k] * ty[k]
        total = total + tx[j] * row
    return total


def _to_ref(s):
    """Map physical [0, 1] to reference [-1, 1]."""
    return 2.0 * np.asarray(s, dtype=float) - 1.0


# -- assembly ---------------------------------------------------------------

# stencil offsets (di, dj) in a 3x3 neighbourhood
def _grid(n):
    h = 1.0 / (n + 1)
    s = np.arange(1, n + 1) * h
    X, Y = np.meshgrid(s, s, indexing="xy")  # X[j, i] = x_i
    return h, X, Y


def _assemble_stencil(n, weights, boundary=None):
    """Assemble a (up to) 9-point operator.

    ``weights[(di, dj)]`` is an ``(n, n)`` array indexed ``[j, i]`` giving
    the coefficient coupling node (i, j) to (i+di, j+dj).  Couplings that
    land on the boundary are dropped from the matrix and, when
    ``boundary(x, y)`` is given, moved to the right-hand side.
    Returns ``(A, rhs_shift)``.
    """
    J, I = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    h = 1.0 / (n + 1)
    rows, cols, vals = [], [], []
    shift = np.zeros((n, n))
    for (di, dj), w in weights.items():
        w = np.broadcast_to(np.asarray(w, dtype=float), (n, n))
        ti, tj = I + di, J + dj
        inside = (ti >= 0) & (ti < n) & (tj >= 0) & (tj < n)
        rows.append((I + J * n)[inside])
        cols.append((ti + tj * n)[inside])
        vals.append(w[inside])
        if boundary is not None and not np.all(inside):
            out = ~inside
            g = boundary((ti[out] + 1) * h, (tj[out] + 1) * h)
            np.subtract.at(shift, (J[out], I[out]), w[out] * g)
    A = _assemble(n * n, n * n, np.concatenate(rows), np.concatenate(cols),
                  np.concatenate(vals))
    return A, shift.ravel()


def _laplacian_weights(n):
    """Weights of -lap on the interior grid (positive diagonal)."""
    h2 = (1.0 / (n + 1)) ** 2
    return {
        (0, 0): 4.0 / h2,
        (1, 0): -1.0 / h2,
        (-1, 0): -1.0 / h2,
        (0, 1): -1.0 / h2,
        (0, -1): -1.0 / h2,
    }


def _smooth_rhs(n, seed, degree=2):
    rng = np.random.default_rng(seed)
    field = Cheb2D(rng.uniform(-1.0, 1.0, size=(degree + 1, degree + 1)))
    _, X, Y = _grid(n)
    return np.asarray(field(_to_ref(X), _to_ref(Y))).ravel()


def _check_grid(grid_n):
    if int(grid_n) < 2:
        raise ProblemError("grid_n must be at least 2")
    return int(grid_n)


def gen_elliptic(coeffs: Sequence[float], grid_n: int = DEFAULT_GRID_N,
                 rhs_seed: int = 0) -> ProblemInstance:
    """Second-order elliptic operator with constant coefficients.

    ``coeffs = (a11, a12, a22, a1, a2, a0)``.  Central differences for all
    terms; the mixed derivative uses the four-corner stencil.  Zero
    Dirichlet boundary, smooth pseudorandom source seeded by ``rhs_seed``.
    """
    a11, a12, a22, a1, a2, a0 = (float(c) for c in coeffs)
    if not 4.0 * a11 * a22 > a12 * a12:
        raise ProblemError(
            f"coefficients are not elliptic: 4*a11*a22={4 * a11 * a22:g} <= a12^2={a12 * a12:g}"
        )
    n = _check_grid(grid_n)
    h = 1.0 / (n + 1)
    h2 = h * h
    w = {
        (0, 0): -2.0 * (a11 + a22) / h2 + a0,
        (1, 0): a11 / h2 + a1 / (2 * h),
        (-1, 0): a11 / h2 - a1 / (2 * h),
        (0, 1): a22 / h2 + a2 / (2 * h),
        (0, -1): a22 / h2 - a2 / (2 * h),
    }
    if a12 != 0.0:
        c = a12 / (4 * h2)
        w.update({(1, 1): c, (-1, -1): c, (1, -1): -c, (-1, 1): -c})
    A, _ = _assemble_stencil(n, w)
    b = _smooth_rhs(n, rhs_seed)
    return ProblemInstance(Family.ELLIPTIC, np.array([a11, a12, a22, a1, a2, a0]),
                           A, b, n, rhs_seed)


def _darcy_permeability(K: Cheb2D, n):
    """Nodal K on the full grid including boundary nodes, clamped positive."""
    s = np.arange(n + 2) / (n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    k = np.asarray(K(_to_ref(X), _to_ref(Y)), dtype=float) * np.ones_like(X)
    floor = 0.1 * np.max(np.abs(k))
    if floor == 0.0:
        raise ProblemError("permeability field vanishes identically")
    return np.maximum(k, floor)


def gen_darcy(K_coeffs, grid_n: int = DEFAULT_GRID_N, rhs_seed: int = 0) -> ProblemInstance:
    """Darcy flow ``-div(K grad u) = f`` with a cubic-by-cubic Chebyshev K.

    ``K_coeffs`` is either a :class:`Cheb2D` or the 16 coefficients in
    feature order.  Face permeabilities are arithmetic means of the two
    adjacent nodal values (after the positivity clamp).
    """
    if isinstance(K_coeffs, Cheb2D):
        K = K_coeffs
        feats = K.coeffs.T.ravel()
    else:
        feats = np.asarray(K_coeffs, dtype=float)
        if len(feats) != 16:
            raise ProblemError("Darcy expects 16 Chebyshev coefficients (cubic per axis)")
        K = Cheb2D.from_features(feats, 3, 3)
    if len(feats) != 16:
        raise ProblemError("Darcy expects a cubic-by-cubic Chebyshev field")
    n = _check_grid(grid_n)
    h2 = (1.0 / (n + 1)) ** 2
    k = _darcy_permeability(K, n)  # k[j, i] on (n+2)^2 nodes
    c = k[1:-1, 1:-1]
    east = 0.5 * (c + k[1:-1, 2:])
    west = 0.5 * (c + k[1:-1, :-2])
    north = 0.5 * (c + k[2:, 1:-1])
    south = 0.5 * (c + k[:-2, 1:-1])
    w = {
        (0, 0): (east + west + north + south) / h2,
        (1, 0): -east / h2,
        (-1, 0): -west / h2,
        (0, 1): -north / h2,
        (0, -1): -south / h2,
    }
    A, _ = _assemble_stencil(n, w)
    b = _smooth_rhs(n, rhs_seed)
    return ProblemInstance(Family.DARCY, np.array(feats, dtype=float), A, b, n, rhs_seed)


def gen_poisson(coeffs: Sequence[float], grid_n: int = DEFAULT_GRID_N,
                rhs_seed: int = 0) -> ProblemInstance:
    """``-lap(u) = f`` with Chebyshev boundary data and source.

    ``coeffs[:4]`` define the boundary function ``g`` and ``coeffs[4:]``
    the source ``f``; each is a 2x2 tensor Chebyshev series in feature
    order ``(1, x, y, xy)``.  Boundary values enter ``b``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if len(coeffs) != 8:
        raise ProblemError("Poisson expects 8 Chebyshev coefficients")
    n = _check_grid(grid_n)
    g = Cheb2D.from_features(coeffs[:4], 1, 1)
    f = Cheb2D.from_features(coeffs[4:], 1, 1)
    A, shift = _assemble_stencil(n, _laplacian_weights(n),
                                 boundary=lambda x, y: g(_to_ref(x), _to_ref(y)))
    _, X, Y = _grid(n)
    src = np.asarray(f(_to_ref(X), _to_ref(Y))) * np.ones_like(X)
    return ProblemInstance(Family.POISSON, coeffs, A, src.ravel() + shift, n, rhs_seed)


THERMAL_LEFT_RANGE = (-100.0, 0.0)
THERMAL_RIGHT_RANGE = (0.0, 100.0)


def gen_thermal(features: Sequence[float], grid_n: int = DEFAULT_GRID_N,
                rhs_seed: int = 0) -> ProblemInstance:
    """Steady heat equation with Dirichlet temperatures on all four sides.

    ``features = (top0, top1, bot0, bot1, left, right)``: the top and
    bottom temperatures are ``c0 + c1 T_1(x)`` series, the left and right
    sides are held at constant values.
    """
    feats = np.asarray(features, dtype=float)
    if len(feats) != 6:
        raise ProblemError("thermal expects 6 features")
    top, bot, left, right = feats[0:2], feats[2:4], feats[4], feats[5]
    if not THERMAL_LEFT_RANGE[0] <= left <= THERMAL_LEFT_RANGE[1]:
        raise ProblemError(f"left temperature {left} outside {THERMAL_LEFT_RANGE}")
    if not THERMAL_RIGHT_RANGE[0] <= right <= THERMAL_RIGHT_RANGE[1]:
        raise ProblemError(f"right temperature {right} outside {THERMAL_RIGHT_RANGE}")
    n = _check_grid(grid_n)

    def boundary(x, y):
        t = _to_ref(x)
        # corners never couple to interior nodes with a 5-point stencil
        return np.where(
            x < 1e-12, left,
            np.where(x > 1.0 - 1e-12, right,
                     np.where(y > 0.5, top[0] + top[1] * t, bot[0] + bot[1] * t)))

    A, shift = _assemble_stencil(n, _laplacian_weights(n), boundary=boundary)
    return ProblemInstance(Family.THERMAL, feats, A, shift, n, rhs_seed)


_BUILDERS = {
    Family.ELLIPTIC: gen_elliptic,
    Family.DARCY: gen_darcy,
    Family.POISSON: gen_poisson,
    Family.THERMAL: gen_thermal,
}


def build_instance(family, features, grid_n, seed) -> ProblemInstance:
    return _BUILDERS[Family(family)](features, grid_n, seed)


# -- sampling ---------------------------------------------------------------


def sample_features(family, rng: np.random.Generator, symmetric: bool = False) -> np.ndarray:
    """Draw a random feature vector for ``family``.

    ``symmetric`` zeroes the first-order elliptic terms so the matrix is
    symmetric (needed for SSOR and AMG with CG).
    """
    family = Family(family)
    if family is Family.ELLIPTIC:
        while True:
            a11, a22, a1, a2, a0 = rng.uniform(-1.0, 1.0, size=5)
            a12 = rng.uniform(-0.01, 0.01)
            if 4.0 * a11 * a22 > a12 * a12:
                break
        c = np.array([a11, a12, a22, a1, a2, a0])
        if a11 < 0:
            c = -c
        if symmetric:
            c[3] = c[4] = 0.0
        return c
    if family is Family.DARCY:
        return rng.uniform(-1.0, 1.0, size=16)
    if family is Family.POISSON:
        return rng.uniform(-1.0, 1.0, size=8)
    top_bot = rng.uniform(-50.0, 50.0, size=4)
    left = rng.uniform(*THERMAL_LEFT_RANGE)
    right = rng.uniform(*THERMAL_RIGHT_RANGE)
    return np.concatenate([top_bot, [left, right]])


def instance_seeds(seed: int, count: int) -> list[int]:
    """Per-instance seeds derived deterministically from a master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def generate_problems(family, count: int, grid_n: int = DEFAULT_GRID_N, seed: int = 0,
                      symmetric: bool = False) -> Iterator[ProblemInstance]:
    for s in instance_seeds(seed, count):
        rng = np.random.default_rng(s)
        yield build_instance(family, sample_features(family, rng, symmetric), grid_n, s)


# -- files ------------------------------------------------------------------


def write_problems(path, problems, compact: bool = False) -> int:
    count = 0
    with open(path, "w") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_json(compact=compact)))
            fh.write("\n")
            count += 1
    return count


def read_problems(path) -> Iterator[ProblemInstance]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield ProblemInstance.from_json(json.loads(line))
