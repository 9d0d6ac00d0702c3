"""Compressed sparse row storage and the handful of kernels built on it.

The matrix type is deliberately small: construction from triplets, a
row-wise product, a dense view for tests, and JSON (de)serialization.
Heavy lifting inside the solvers goes through :meth:`CsrMatrix.scipy`,
a cached ``scipy.sparse.csr_array`` sharing the same arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "CsrMatrix",
    "SparseError",
    "csr_from_triplets",
    "csr_from_dense",
    "spmv",
    "to_dense",
    "DENSE_CAP",
]

# Largest nrows*ncols that to_dense will materialize.
DENSE_CAP = 10**6


class SparseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _scipy: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("row_offsets", "col_indices", "values"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if len(self.row_offsets) != self.nrows + 1:
            raise SparseError("row_offsets must have nrows+1 entries")
        if len(self.col_indices) != len(self.values):
            raise SparseError("col_indices and values differ in length")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.values):
            raise SparseError("row_offsets must start at 0 and end at nnz")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def scipy(self) -> sparse.csr_array:
        """Cached scipy view of the same arrays (no copy)."""
        if self._scipy is None:
            mat = sparse.csr_array(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
            object.__setattr__(self, "_scipy", mat)
        return self._scipy

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.nrows, self.ncols))
        rows = self.row_ids()
        on = rows == self.col_indices
        d[rows[on]] = self.values[on]
        return d

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.nrows), np.diff(self.row_offsets))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def triplets(self) -> list[tuple[int, int, float]]:
        rows = self.row_ids()
        return [
            (int(i), int(j), float(v))
            for i, j, v in zip(rows, self.col_indices, self.values)
        ]

    def transpose(self) -> "CsrMatrix":
        return _assemble(self.ncols, self.nrows, self.col_indices, self.row_ids(), self.values)

    def pattern_equal(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    def equal(self, other: "CsrMatrix") -> bool:
        return self.pattern_equal(other) and np.array_equal(self.values, other.values)

    def is_structurally_symmetric(self) -> bool:
        return self.pattern_equal(self.transpose())

    def is_symmetric(self) -> bool:
        return self.equal(self.transpose())

    def to_json(self) -> dict:
        return {"nrows": self.nrows, "ncols": self.ncols,
                "triplets": [[i, j, v] for i, j, v in self.triplets()]}

    @classmethod
    def from_json(cls, obj: dict) -> "CsrMatrix":
        return csr_from_triplets(obj["nrows"], obj["ncols"],
                                 [tuple(t) for t in obj["triplets"]])

    @classmethod
    def from_scipy(cls, mat) -> "CsrMatrix":
        """Wrap any scipy sparse matrix; duplicates summed, zeros kept."""
        coo = sparse.coo_array(mat)
        return _assemble(coo.shape[0], coo.shape[1], coo.row, coo.col, coo.data)


def _assemble(nrows, ncols, rows, cols, vals) -> CsrMatrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if len(rows):
        if rows.min() < 0 or rows.max() >= nrows:
            raise SparseError(f"row index out of range for {nrows} rows")
        if cols.min() < 0 or cols.max() >= ncols:
            raise SparseError(f"column index out of range for {ncols} columns")
    # values in the key make duplicate runs sum in a canonical order
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows):
        new = np.ones(len(rows), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new)
        vals = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    offsets = np.zeros(nrows + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    np.cumsum(offsets, out=offsets)
    return CsrMatrix(int(nrows), int(ncols), offsets, cols, vals)


def csr_from_triplets(
    nrows: int, ncols: int, triplets: Iterable[Sequence[float]]
) -> CsrMatrix:
    """Build a CSR matrix from ``(i, j, value)`` triplets.

    Duplicate coordinates are summed and explicit zeros are kept as
    structural entries.
    """
    trip = list(triplets)
    rows, cols, vals = zip(*trip) if trip else ((), (), ())
    return _assemble(nrows, ncols, rows, cols, vals)


def csr_from_dense(dense: np.ndarray, keep_zeros: bool = False) -> CsrMatrix:
    dense = np.asarray(dense, dtype=np.float64)
    if keep_zeros:
        rows, cols = np.indices(dense.shape).reshape(2, -1)
    else:
        rows, cols = np.nonzero(dense)
    return _assemble(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])


def spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.ncols,):
        raise SparseError(f"vector of length {x.shape} does not match {A.ncols} columns")
    return A.scipy() @ x


def to_dense(A: CsrMatrix, cap: int = DENSE_CAP) -> np.ndarray:
    if A.nrows * A.ncols > cap:
        raise SparseError(f"{A.nrows}x{A.ncols} exceeds the dense cap of {cap} entries")
    out = np.zeros(A.shape)
    out[A.row_ids(), A.col_indices] = A.values
    return out
