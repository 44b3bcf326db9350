"""Sparse symmetric systems and their direct solution.

Two matrix classes appear in the method: real symmetric positive
definite (regularized cell problems after constraint elimination stay
definite) and complex symmetric non-Hermitian (the macro curl-curl
system and bordered cell systems).  Both are factorized directly; the
sizes stay small enough that a fill-reducing sparse LU is the simplest
robust choice for either class.

Triplet input is canonicalized before compression: entries are ordered
by row, column, and finally the raw bit patterns of their values, and
duplicates are summed in that order.  Identical triplet multisets
therefore compress to bit-identical matrices regardless of insertion
order, which keeps solver output reproducible run to run.
"""

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import LinearOperator, gmres, splu

RESIDUAL_TOL = 1e-10
SYMMETRY_RTOL = 1e-12
PIVOT_RTOL = 1e-14
REAL_SPD = "real-spd"
COMPLEX_SYMMETRIC = "complex-symmetric"
TWO_GRID_EDGE_DAMPING = 0.5
TWO_GRID_NODAL_DAMPING = 0.7
TWO_GRID_RESTART = 100
TWO_GRID_MAX_ROUNDS = 12


class SolverError(RuntimeError):
    """Factorization or residual failure, tagged with the matrix name."""


class SparseSystem:
    """Triplet accumulator compressing to canonical CSR storage."""

    def __init__(self, dim, tag=COMPLEX_SYMMETRIC, name="system"):
        if tag not in (REAL_SPD, COMPLEX_SYMMETRIC):
            raise ValueError(f"unknown symmetry tag {tag!r}")
        self.dim = int(dim)
        self.tag = tag
        self.name = name
        self.dtype = np.float64 if tag == REAL_SPD else np.complex128
        self._rows = []
        self._cols = []
        self._vals = []
        self.matrix = None

    def add(self, rows, cols, values):
        """Accumulate triplets; arrays broadcast together and flatten."""
        rows, cols, values = np.broadcast_arrays(rows, cols, values)
        self._rows.append(np.ravel(rows).astype(np.int64))
        self._cols.append(np.ravel(cols).astype(np.int64))
        self._vals.append(np.ravel(values).astype(self.dtype))

    def compress(self):
        """Canonicalize triplets into CSR and verify symmetry."""
        rows = np.concatenate(self._rows) if self._rows else np.empty(0, np.int64)
        cols = np.concatenate(self._cols) if self._cols else np.empty(0, np.int64)
        vals = np.concatenate(self._vals) if self._vals else np.empty(0, self.dtype)
        if rows.size and (
            rows.min() < 0 or rows.max() >= self.dim
            or cols.min() < 0 or cols.max() >= self.dim
        ):
            raise ValueError(f"{self.name}: triplet index out of range")

        # order by (row, col, value bits) so duplicate summation order,
        # and hence every output bit, is independent of insertion order
        if self.dtype == np.complex128:
            keys = (vals.imag.view(np.uint64), vals.real.view(np.uint64))
        else:
            keys = (vals.view(np.uint64),)
        order = np.lexsort(keys + (cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]

        new_group = np.empty(rows.size, dtype=bool)
        if rows.size:
            new_group[0] = True
            new_group[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new_group)
        data = np.add.reduceat(vals, starts) if starts.size else vals[:0]
        indices = cols[starts]
        row_of = rows[starts]
        indptr = np.zeros(self.dim + 1, dtype=np.int64)
        np.add.at(indptr, row_of + 1, 1)
        np.cumsum(indptr, out=indptr)
        mat = sparse.csr_matrix(
            (data, indices, indptr), shape=(self.dim, self.dim)
        )

        scale = np.abs(mat.data).max() if mat.nnz else 1.0
        asym = abs(mat - mat.T)
        gap = asym.data.max() if asym.nnz else 0.0
        if gap > SYMMETRY_RTOL * scale:
            raise SolverError(
                f"{self.name}: matrix not symmetric "
                f"(|A - A^T| = {gap:.3g} vs scale {scale:.3g})"
            )
        self.matrix = mat
        self._rows = self._cols = self._vals = None
        return self


class Factorization:
    """Immutable sparse LU of a compressed system, reusable across rhs."""

    def __init__(self, system: SparseSystem):
        if system.matrix is None:
            raise ValueError(f"{system.name}: compress before factorizing")
        self.system = system
        mat = system.matrix.tocsc()
        try:
            self._lu = splu(mat, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverError(
                f"{system.name} ({system.tag}): factorization failed: {exc}"
            ) from exc
        pivots = np.abs(self._lu.U.diagonal())
        if pivots.size and pivots.min() < PIVOT_RTOL * pivots.max():
            raise SolverError(
                f"{system.name} ({system.tag}): near-singular factorization "
                f"(pivot ratio {pivots.min() / pivots.max():.3g})"
            )

    def solve(self, rhs):
        """Solve for one rhs vector or a stack of columns (dim, k).

        Each solution is checked against the relative residual tolerance.
        """
        rhs = np.asarray(rhs, dtype=self.system.dtype)
        single = rhs.ndim == 1
        cols = rhs[:, None] if single else rhs
        sol = self._lu.solve(np.ascontiguousarray(cols))
        resid = self.system.matrix @ sol - cols
        scale = np.linalg.norm(cols, axis=0)
        err = np.linalg.norm(resid, axis=0) / np.where(scale > 0, scale, 1.0)
        if err.max() > RESIDUAL_TOL:
            raise SolverError(
                f"{self.system.name} ({self.system.tag}): relative residual "
                f"{err.max():.3g} above {RESIDUAL_TOL:g}"
            )
        return sol[:, 0] if single else sol


def solve_direct(system: SparseSystem, rhs):
    """Factorize and solve in one call; rhs may hold multiple columns."""
    return Factorization(system).solve(rhs)


class TwoGridSolver:
    """Preconditioned GMRES for curl-curl systems too large to factorize.

    The preconditioner is one symmetric two-grid cycle: damped Jacobi
    sweeps on the edge unknowns and on the nodal gradient subspace
    (where the curl part of the operator vanishes) wrapped around a
    direct correction on a half-resolution edge space.  The coarse
    operator is the Galerkin triple product R^T A R, which stays
    spectrally faithful even when the coarse mesh does not resolve
    coefficient oscillations.  Solutions are iterated until they meet
    the same true-residual contract as the direct path.
    """

    def __init__(self, system: SparseSystem, prolongation, gradient_map):
        if system.matrix is None:
            raise ValueError(f"{system.name}: compress before solving")
        a = system.matrix
        if prolongation.shape[0] != a.shape[0]:
            raise ValueError(f"{system.name}: prolongation row count "
                             f"{prolongation.shape[0]} does not match dim")
        if gradient_map.shape[0] != a.shape[0]:
            raise ValueError(f"{system.name}: gradient map row count "
                             f"{gradient_map.shape[0]} does not match dim")
        self.system = system
        self._r = sparse.csr_matrix(prolongation)
        self._g = sparse.csr_matrix(gradient_map)

        coarse = SparseSystem(
            self._r.shape[1], system.tag, name=f"{system.name} (coarse level)"
        )
        rap = (self._r.T @ (a @ self._r)).tocoo()
        coarse.add(rap.row, rap.col, rap.data)
        self._coarse = Factorization(coarse.compress())

        self._diag_edge = a.diagonal()
        self._diag_node = (self._g.T @ (a @ self._g)).diagonal()
        if np.abs(self._diag_edge).min() == 0 or np.abs(self._diag_node).min() == 0:
            raise SolverError(f"{system.name}: zero diagonal in smoother")

    def _cycle(self, r):
        """One symmetric edge/node/coarse/node/edge preconditioner sweep."""
        a = self.system.matrix
        x = TWO_GRID_EDGE_DAMPING * r / self._diag_edge
        res = r - a @ x
        x += self._g @ (
            TWO_GRID_NODAL_DAMPING * (self._g.T @ res) / self._diag_node
        )
        res = r - a @ x
        x += self._r @ self._coarse.solve(self._r.T @ res)
        res = r - a @ x
        x += self._g @ (
            TWO_GRID_NODAL_DAMPING * (self._g.T @ res) / self._diag_node
        )
        res = r - a @ x
        x += TWO_GRID_EDGE_DAMPING * res / self._diag_edge
        return x

    def _solve_column(self, b):
        a = self.system.matrix
        scale = np.linalg.norm(b)
        if scale == 0:
            return np.zeros_like(b)
        op = LinearOperator(a.shape, matvec=self._cycle, dtype=a.dtype)
        x = np.zeros_like(b)
        previous = np.inf
        for _ in range(TWO_GRID_MAX_ROUNDS):
            x, info = gmres(
                a, b, x0=x, M=op, rtol=1e-13, atol=0.0,
                restart=TWO_GRID_RESTART, maxiter=1,
            )
            if info < 0:
                raise SolverError(
                    f"{self.system.name} ({self.system.tag}): "
                    f"iteration breakdown (info {info})"
                )
            err = np.linalg.norm(a @ x - b) / scale
            if err <= RESIDUAL_TOL:
                return x
            if err > 0.5 * previous:
                break
            previous = err
        raise SolverError(
            f"{self.system.name} ({self.system.tag}): iterative solve "
            f"stalled at relative residual {err:.3g} above {RESIDUAL_TOL:g}"
        )

    def solve(self, rhs):
        """Solve for one rhs vector or a stack of columns (dim, k)."""
        rhs = np.asarray(rhs, dtype=self.system.dtype)
        if rhs.ndim == 1:
            return self._solve_column(rhs)
        out = np.empty_like(rhs)
        for k in range(rhs.shape[1]):
            out[:, k] = self._solve_column(rhs[:, k])
        return out
