"""Discrete cell problems on the unit cell and homogenized tensors.

For each macro element the method needs two families of unit-load cell
problems on the periodic micro mesh, with the coefficients frozen at the
element barycenter:

  * the divergence-regularized curl problem: find a periodic zero-mean
    vector field v_k with

        int_Y mu_inv (e_k + curl v_k) . curl psi + div v_k div psi dy = 0

    for all periodic test fields psi, k = 1, 2, 3;

  * the gradient problem: find a periodic zero-mean scalar w_k with

        int_Y kappa (e_k + grad w_k) . grad psi dy = 0.

Both are solved in periodic P1 spaces with one mean-value constraint row
per component appended as a Lagrange multiplier, so the sparse systems
stay symmetric.  The homogenized tensors are the exact integrals of the
piecewise constant integrands

    Mhom[i, k] = int_Y mu_inv (delta_ik + (curl v_k)_i) dy,
    Khom[i, k] = int_Y kappa (delta_ik + (grad w_k)_i) dy.

Unit loads make the per-element work independent of the macro solution:
actual correctors are linear recombinations with the local curl and
field values, taken elsewhere.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import LinearOperator, cg, gmres

from . import fespace as fes
from .coeffs import CoefficientField, SampledCoefficients, sample
from .linsolve import (
    COMPLEX_SYMMETRIC,
    REAL_SPD,
    RESIDUAL_TOL,
    Factorization,
    SolverError,
    SparseSystem,
)
from .mesh import MacroMesh, PeriodicMicroMesh

CELL_ITERATIVE_MIN_DOFS = 30_000
CELL_KRYLOV_TOL = 1e-12
CELL_CG_MAX_ITERS = 600
CELL_GMRES_RESTART = 50
CELL_GMRES_MAX_ROUNDS = 12
AMG_MAX_COARSE = 400


@dataclass(frozen=True)
class CellWorkspace:
    """Micro-mesh operators shared by the cell solves of every element."""

    micro: PeriodicMicroMesh
    vector_space: fes.PeriodicVectorSpace
    scalar_space: fes.PeriodicScalarSpace
    vec_curlcurl: np.ndarray
    vec_divdiv: np.ndarray
    vec_curl_op: np.ndarray
    scal_stiff: np.ndarray
    scal_coup: np.ndarray
    mean: np.ndarray


def cell_workspace(micro: PeriodicMicroMesh) -> CellWorkspace:
    """Precompute the unweighted local operators on the micro mesh."""
    vs = fes.PeriodicVectorSpace(micro)
    ss = vs.scalar
    cc, dd, curl_op, _ = fes.vector_p1_local_matrices(vs)
    stiff, coup, _ = fes.p1_local_matrices(ss)
    return CellWorkspace(
        micro=micro,
        vector_space=vs,
        scalar_space=ss,
        vec_curlcurl=cc,
        vec_divdiv=dd,
        vec_curl_op=curl_op,
        scal_stiff=stiff,
        scal_coup=coup,
        mean=ss.mean_vector(),
    )


def _assemble_unbordered(cell_dofs, blocks, dim, dtype):
    """Sum elementwise blocks straight into CSR without border rows."""
    rows = np.broadcast_to(cell_dofs[:, :, None], blocks.shape)
    cols = np.broadcast_to(cell_dofs[:, None, :], blocks.shape)
    mat = sparse.coo_matrix(
        (
            np.ravel(blocks).astype(dtype),
            (
                np.ravel(rows).astype(np.int32),
                np.ravel(cols).astype(np.int32),
            ),
        ),
        shape=(dim, dim),
    )
    return mat.tocsr()


def _scalar_amg(ws, weights=None):
    """Algebraic multigrid hierarchy of a weighted scalar P1 stiffness.

    The periodic stiffness is singular with the constants as kernel;
    the hierarchy is meant as a preconditioner only, with kernel
    handling done by the caller's projections.
    """
    import pyamg

    ss = ws.scalar_space
    nm = ss.num_dofs
    stiff = ws.scal_stiff
    if weights is not None:
        stiff = weights[:, None, None] * stiff
    mat = _assemble_unbordered(ss.cell_dofs, stiff, nm, np.float64)
    return pyamg.smoothed_aggregation_solver(
        mat, B=np.ones((nm, 1)), max_coarse=AMG_MAX_COARSE
    )


def _zero_component_means(x, nm):
    """Project out the per-component constant modes in place."""
    for c in range(0, len(x), nm):
        x[c:c + nm] -= x[c:c + nm].mean()
    return x


def _zero_integral_representative(x, mean, nm):
    """Shift each component to the zero-cell-integral representative.

    Solutions of the singular cell operators are unique up to constants
    per component; the bordered direct path pins the representative
    with integral zero over the cell, so the iterative path shifts to
    the same one.
    """
    total = mean.sum()
    for c in range(0, len(x), nm):
        x[c:c + nm] -= (mean @ x[c:c + nm]) / total
    return x


def _check_residual(mat, x, b, name):
    scale = np.linalg.norm(b)
    err = np.linalg.norm(mat @ x - b) / (scale if scale > 0 else 1.0)
    if err > RESIDUAL_TOL:
        raise SolverError(
            f"{name}: iterative relative residual {err:.3g} above "
            f"{RESIDUAL_TOL:g}"
        )


def _iterative_curl_solve(ws, blocks, rhs, name):
    """Projected PCG on the singular unbordered curl cell operator.

    The operator is symmetric positive semidefinite with the three
    per-component constants as kernel and the loads are compatible, so
    conjugate gradients on the mean-free subspace converge; a scalar
    multigrid V-cycle applied per component preconditions it through
    the periodic equivalence of curl-curl plus div-div energy with the
    componentwise gradient energy.
    """
    vs = ws.vector_space
    nm = ws.scalar_space.num_dofs
    dim = 3 * nm
    mat = _assemble_unbordered(vs.cell_dofs, blocks, dim, np.float64)
    amg = _scalar_amg(ws).aspreconditioner(cycle="V")

    def precondition(v):
        z = np.empty_like(v)
        for c in range(3):
            z[c * nm:(c + 1) * nm] = amg @ v[c * nm:(c + 1) * nm]
        return _zero_component_means(z, nm)

    a_op = LinearOperator(
        (dim, dim),
        matvec=lambda v: _zero_component_means(mat @ v, nm),
        dtype=np.float64,
    )
    m_op = LinearOperator((dim, dim), matvec=precondition, dtype=np.float64)
    out = np.empty((dim, rhs.shape[1]))
    for k in range(rhs.shape[1]):
        b = _zero_component_means(rhs[:, k].copy(), nm)
        x, _ = cg(
            a_op, b, M=m_op, rtol=CELL_KRYLOV_TOL, atol=0.0,
            maxiter=CELL_CG_MAX_ITERS,
        )
        _zero_integral_representative(x, ws.mean, nm)
        _check_residual(mat, x, b, name)
        out[:, k] = x
    return out


def _iterative_grad_solve(ws, kappa, rhs, name):
    """Projected GMRES on the singular kappa-weighted scalar operator.

    Preconditioning with multigrid on the real-part-weighted stiffness
    keeps the preconditioned field of values away from zero under the
    coefficient sector bounds, so the iteration converges at a rate
    independent of the micro resolution.
    """
    ss = ws.scalar_space
    nm = ss.num_dofs
    blocks = kappa[:, None, None] * ws.scal_stiff
    mat = _assemble_unbordered(ss.cell_dofs, blocks, nm, np.complex128)
    amg = _scalar_amg(ws, weights=kappa.real).aspreconditioner(cycle="V")

    def precondition(v):
        z = (amg @ v.real) + 1j * (amg @ v.imag)
        z -= z.mean()
        return z

    def matvec(v):
        z = mat @ v
        z -= z.mean()
        return z

    a_op = LinearOperator((nm, nm), matvec=matvec, dtype=np.complex128)
    m_op = LinearOperator((nm, nm), matvec=precondition, dtype=np.complex128)
    out = np.empty((nm, rhs.shape[1]), dtype=np.complex128)
    for k in range(rhs.shape[1]):
        b = rhs[:, k] - rhs[:, k].mean()
        x, _ = gmres(
            a_op, b, M=m_op, rtol=CELL_KRYLOV_TOL, atol=0.0,
            restart=CELL_GMRES_RESTART, maxiter=CELL_GMRES_MAX_ROUNDS,
        )
        _zero_integral_representative(x, ws.mean, nm)
        _check_residual(mat, x, b, name)
        out[:, k] = x
    return out


def solve_curl_cells(j, sampled: SampledCoefficients,
                     micro: PeriodicMicroMesh, workspace=None):
    """Unit-load curl cell solves for element j.

    Returns (correctors, mhom): correctors has shape (3, 3 nm) with row
    k the periodic vector P1 coefficients of v_k, and mhom is the real
    3x3 homogenized tensor of mu_inv.  Desk-scale systems are solved
    through the bordered direct factorization; micro meshes whose
    factorization fill would exceed memory go through projected
    conjugate gradients, meeting the same residual tolerance.
    """
    ws = workspace or cell_workspace(micro)
    vs = ws.vector_space
    nm = micro.num_masters
    dim = 3 * nm + 3
    mu = np.asarray(sampled.mu_inv[j], dtype=float)
    vals = mu[:, None, None] * ws.vec_curlcurl + ws.vec_divdiv

    weights = micro.tet_volumes * mu
    load = -weights[:, None, None] * ws.vec_curl_op.transpose(0, 2, 1)
    rhs_top = np.zeros((3 * nm, 3))
    np.add.at(rhs_top, vs.cell_dofs, load)

    if dim > CELL_ITERATIVE_MIN_DOFS:
        sol = _iterative_curl_solve(
            ws, vals, rhs_top, f"curl cell system (element {j})"
        )
        correctors = np.ascontiguousarray(sol.T)
    else:
        system = SparseSystem(
            dim, REAL_SPD, name=f"curl cell system (element {j})"
        )
        system.add(vs.cell_dofs[:, :, None], vs.cell_dofs[:, None, :], vals)
        masters = np.arange(nm)
        for c in range(3):
            system.add(np.full(nm, 3 * nm + c), c * nm + masters, ws.mean)
            system.add(c * nm + masters, np.full(nm, 3 * nm + c), ws.mean)
        system.compress()
        rhs = np.zeros((dim, 3))
        rhs[:3 * nm] = rhs_top
        sol = Factorization(system).solve(rhs)
        correctors = np.ascontiguousarray(sol[:3 * nm].T)

    local = correctors[:, vs.cell_dofs]
    curls = np.einsum("til,ktl->kti", ws.vec_curl_op, local)
    mhom = weights.sum() * np.eye(3) + np.einsum("t,kti->ik", weights, curls)
    return correctors, mhom


def solve_grad_cells(j, sampled: SampledCoefficients,
                     micro: PeriodicMicroMesh, workspace=None):
    """Unit-load gradient cell solves for element j.

    Returns (correctors, khom): correctors has shape (3, nm) with row k
    the periodic scalar P1 coefficients of w_k, and khom is the complex
    symmetric 3x3 homogenized tensor of kappa.
    """
    ws = workspace or cell_workspace(micro)
    ss = ws.scalar_space
    nm = micro.num_masters
    dim = nm + 1
    kappa = np.asarray(sampled.kappa[j], dtype=complex)

    rhs_top = np.zeros((nm, 3), dtype=complex)
    load = -kappa[:, None, None] * ws.scal_coup
    np.add.at(rhs_top, ss.cell_dofs, load)

    if dim > CELL_ITERATIVE_MIN_DOFS:
        sol = _iterative_grad_solve(
            ws, kappa, rhs_top, f"grad cell system (element {j})"
        )
        correctors = np.ascontiguousarray(sol.T)
    else:
        system = SparseSystem(
            dim, COMPLEX_SYMMETRIC, name=f"grad cell system (element {j})"
        )
        vals = kappa[:, None, None] * ws.scal_stiff
        system.add(ss.cell_dofs[:, :, None], ss.cell_dofs[:, None, :], vals)
        masters = np.arange(nm)
        system.add(np.full(nm, nm), masters, ws.mean)
        system.add(masters, np.full(nm, nm), ws.mean)
        system.compress()
        rhs = np.zeros((dim, 3), dtype=complex)
        rhs[:nm] = rhs_top
        sol = Factorization(system).solve(rhs)
        correctors = np.ascontiguousarray(sol[:nm].T)

    grads = np.einsum("tac,kta->ktc", ss.grads, correctors[:, ss.cell_dofs])
    weights = micro.tet_volumes * kappa
    khom = weights.sum() * np.eye(3) + np.einsum("t,ktc->ck", weights, grads)
    return correctors, khom


@dataclass(frozen=True)
class CellCorrectorSet:
    """Unit-load correctors and homogenized tensors for every element.

    curl_correctors has shape (J, 3, 3 nm) and grad_correctors
    (J, nm_dim) shape (J, 3, nm); for x-independent coefficients both
    are stride-0 broadcast views over a single element's solve.  mhom is
    (J, 3, 3) real, khom (J, 3, 3) complex.
    """

    micro: PeriodicMicroMesh
    vector_space: fes.PeriodicVectorSpace
    scalar_space: fes.PeriodicScalarSpace
    curl_correctors: np.ndarray
    grad_correctors: np.ndarray
    mhom: np.ndarray
    khom: np.ndarray
    sampled: SampledCoefficients
    x_independent: bool

    @property
    def num_macro(self):
        return self.curl_correctors.shape[0]


def _freeze_broadcast(row, shape):
    out = np.broadcast_to(row[None], shape)
    return out


def homogenize_all(macro: MacroMesh, micro: PeriodicMicroMesh,
                   coeffs: CoefficientField) -> CellCorrectorSet:
    """Run both cell solves for every macro element.

    For x-independent coefficient fields a single element is solved and
    the result broadcast, which the sampler's preset metadata detects.
    """
    sampled = sample(coeffs, macro, micro)
    ws = cell_workspace(micro)
    num_j = macro.num_tets
    nm = micro.num_masters
    if sampled.x_independent:
        vec, mhom0 = solve_curl_cells(0, sampled, micro, ws)
        sca, khom0 = solve_grad_cells(0, sampled, micro, ws)
        curl_correctors = _freeze_broadcast(vec, (num_j, 3, 3 * nm))
        grad_correctors = _freeze_broadcast(sca, (num_j, 3, nm))
        mhom = _freeze_broadcast(mhom0, (num_j, 3, 3))
        khom = _freeze_broadcast(khom0, (num_j, 3, 3))
    else:
        curl_correctors = np.empty((num_j, 3, 3 * nm))
        grad_correctors = np.empty((num_j, 3, nm), dtype=complex)
        mhom = np.empty((num_j, 3, 3))
        khom = np.empty((num_j, 3, 3), dtype=complex)
        for j in range(num_j):
            curl_correctors[j], mhom[j] = solve_curl_cells(
                j, sampled, micro, ws
            )
            grad_correctors[j], khom[j] = solve_grad_cells(
                j, sampled, micro, ws
            )
    return CellCorrectorSet(
        micro=micro,
        vector_space=ws.vector_space,
        scalar_space=ws.scalar_space,
        curl_correctors=curl_correctors,
        grad_correctors=grad_correctors,
        mhom=mhom,
        khom=khom,
        sampled=sampled,
        x_independent=sampled.x_independent,
    )
