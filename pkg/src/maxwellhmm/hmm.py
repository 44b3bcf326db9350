"""Macro assembly, multiscale solve, and the composite approximation.

The macro problem is posed in the lowest-order edge space with PEC
boundary conditions: find E_H with

    int_Omega Mhom curl E_H . curl psi - Khom E_H . psi dx
        = int_Omega f . psi

for all edge test fields psi, where Mhom and Khom are the per-element
homogenized tensors from the cell problems.  Curls of edge fields are
elementwise constant, so the curl term is exact; the mass term uses a
degree-2 rule, exact for products of first-order fields with constant
tensors; the load uses a degree-4 rule.

The composite approximation adds the fine-scale correctors

    E_HMM(x) = E_H(x) + delta K1(x, x / delta) + grad_y K2(x, x / delta)

where on T_j x Y the correctors are recombinations of the unit-load
cell solutions, K1 = sum_k (c_j)_k v_k with c_j = curl E_H on T_j and
grad_y K2 = sum_k (b_j)_k grad w_k with b_j = E_H at the barycenter.

A fully coupled two-scale system, with corrector unknowns kept as
degrees of freedom next to the macro edges, is provided for testing the
equivalence of the two assembly paths; its Schur complement onto the
macro block reproduces the tensor-assembled matrix.
"""

from dataclasses import dataclass

import numpy as np

from . import fespace as fes
from .cell import CellCorrectorSet, cell_workspace, homogenize_all
from .coeffs import CoefficientField, SampledCoefficients, SourceField
from .linsolve import (
    COMPLEX_SYMMETRIC,
    SparseSystem,
    TwoGridSolver,
    solve_direct,
)
from .mesh import (
    MacroMesh,
    PeriodicMicroMesh,
    build_box_mesh,
    locate_points,
    wrap_to_cell,
)

MASS_DEGREE = 2
LOAD_DEGREE = 4
LOAD_CHUNK = 8192
COUPLED_DOF_GUARD = 200_000
LARGE_SYSTEM_MIN_DOFS = 10_000


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass(frozen=True)
class HmmProblem:
    """Inputs of one multiscale solve."""

    macro: MacroMesh
    micro: PeriodicMicroMesh
    coefficients: CoefficientField
    source: SourceField
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class HmmSolution:
    """Macro solution with the per-element corrector combination data."""

    space: fes.EdgeSpace
    dofs: np.ndarray
    curl_values: np.ndarray
    center_values: np.ndarray
    cells: CellCorrectorSet
    delta: float

    @property
    def macro(self):
        return self.space.mesh


def macro_load_vector(space: fes.EdgeSpace, source: SourceField):
    """Load vector int f . psi with a degree-4 rule, chunked over tets."""
    mesh = space.mesh
    rule = fes.tet_rule(LOAD_DEGREE)
    rhs = np.zeros(space.num_dofs, dtype=complex)
    for start in range(0, mesh.num_tets, LOAD_CHUNK):
        tids = np.arange(start, min(start + LOAD_CHUNK, mesh.num_tets))
        pts = fes.physical_points(mesh, rule, tids)
        fvals = np.asarray(source.evaluate(pts), dtype=complex)
        vals = fes.n0_basis_values(space, rule, tids)
        contrib = np.einsum(
            "t,q,tqc,tqec->te", mesh.tet_volumes[tids], rule.weights,
            fvals, vals,
        )
        dofs = space.cell_dofs[tids]
        keep = dofs >= 0
        np.add.at(rhs, dofs[keep], contrib[keep])
    return rhs


def assemble_macro(macro: MacroMesh, cells: CellCorrectorSet,
                   source: SourceField):
    """Assemble the homogenized macro system and load vector.

    Returns (SparseSystem compressed, rhs).  The curl-curl term carries
    the matrix weight Mhom_j exactly; the mass term carries Khom_j with
    a degree-2 rule.
    """
    if cells.mhom.shape[0] != macro.num_tets:
        raise ValueError(
            f"tensor count {cells.mhom.shape[0]} does not match "
            f"{macro.num_tets} macro tets"
        )
    space = fes.EdgeSpace(macro)
    _, _, curls = fes.n0_local_matrices(space)
    vol = macro.tet_volumes

    blocks = np.einsum(
        "t,tec,tcd,tfd->tef", vol, curls, cells.mhom, curls
    ).astype(complex)
    rule = fes.tet_rule(MASS_DEGREE)
    for q in range(len(rule.weights)):
        one_pt = fes.QuadratureRule(
            rule.points[q:q + 1], rule.weights[q:q + 1], rule.degree
        )
        vals = fes.n0_basis_values(space, one_pt)[:, 0]
        blocks -= np.einsum(
            "t,tec,tcd,tfd->tef", vol * rule.weights[q], vals, cells.khom,
            vals,
        )

    system = SparseSystem(space.num_dofs, COMPLEX_SYMMETRIC, name="macro system")
    dofs = space.cell_dofs
    rows = np.broadcast_to(dofs[:, :, None], blocks.shape)
    cols = np.broadcast_to(dofs[:, None, :], blocks.shape)
    keep = (rows >= 0) & (cols >= 0)
    system.add(rows[keep], cols[keep], blocks[keep])
    system.compress()
    return system, macro_load_vector(space, source)


def solve_macro_system(space: fes.EdgeSpace, system: SparseSystem, rhs):
    """Solve an assembled macro-type system, choosing the method by size.

    Desk-scale systems go through the direct factorization.  Above
    LARGE_SYSTEM_MIN_DOFS unknowns the factorization fill no longer
    fits in memory, so the solve switches to the two-grid iteration
    built on a half-resolution edge space; both paths enforce the same
    residual tolerance.
    """
    mesh = space.mesh
    if space.num_dofs <= LARGE_SYSTEM_MIN_DOFS or mesh.n % 2:
        return solve_direct(system, rhs)
    coarse = fes.EdgeSpace(
        build_box_mesh(mesh.box_lo, mesh.box_hi, mesh.n // 2)
    )
    solver = TwoGridSolver(
        system,
        fes.edge_prolongation(coarse, space),
        fes.gradient_incidence(space),
    )
    return solver.solve(rhs)


def solve_hmm(problem: HmmProblem) -> HmmSolution:
    """Homogenize, assemble, solve, and attach corrector data."""
    try:
        cells = homogenize_all(
            problem.macro, problem.micro, problem.coefficients
        )
    except Exception as exc:
        raise StageError(f"stage homogenize: {exc}") from exc
    try:
        system, rhs = assemble_macro(problem.macro, cells, problem.source)
    except Exception as exc:
        raise StageError(f"stage assemble: {exc}") from exc
    try:
        space = fes.EdgeSpace(problem.macro)
        dofs = solve_macro_system(space, system, rhs)
    except Exception as exc:
        raise StageError(f"stage solve: {exc}") from exc
    try:
        curl_values = fes.element_curls(space, dofs)
        center = np.full((problem.macro.num_tets, 4), 0.25)
        center_values, _ = fes.evaluate_edge_field(
            space, dofs, tets=np.arange(problem.macro.num_tets), bary=center
        )
    except Exception as exc:
        raise StageError(f"stage reconstruct: {exc}") from exc
    return HmmSolution(
        space=space,
        dofs=dofs,
        curl_values=curl_values,
        center_values=center_values,
        cells=cells,
        delta=problem.delta,
    )


def _micro_location(solution: HmmSolution, pts):
    y = wrap_to_cell(pts / solution.delta)
    return locate_points(solution.cells.micro, y)


def _corrector_gradients(cells: CellCorrectorSet, j):
    """Per-micro-tet gradients of the three scalar correctors, (3, nt, 3)."""
    ss = cells.scalar_space
    return np.einsum(
        "tac,kta->ktc", ss.grads, cells.grad_correctors[j][:, ss.cell_dofs]
    )


def evaluate_ehmm(solution: HmmSolution, x):
    """Composite field E_H + delta K1 + grad_y K2 at physical points."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    single = np.asarray(x).ndim == 1
    tids, bary = locate_points(solution.macro, pts)
    vals, _ = fes.evaluate_edge_field(
        solution.space, solution.dofs, tets=tids, bary=bary
    )
    mtids, mbary = _micro_location(solution, pts)

    cells = solution.cells
    vs = cells.vector_space
    c = solution.curl_values[tids]
    b = solution.center_values[tids]
    out = np.array(vals, dtype=complex)
    if cells.x_independent:
        for k in range(3):
            vk = vs.values(cells.curl_correctors[0, k], tets=mtids, bary=mbary)
            out += solution.delta * c[:, k, None] * vk
        grads = _corrector_gradients(cells, 0)
        for k in range(3):
            out += b[:, k, None] * grads[k][mtids]
    else:
        for j in np.unique(tids):
            sel = tids == j
            grads = _corrector_gradients(cells, j)
            for k in range(3):
                vk = vs.values(
                    cells.curl_correctors[j, k],
                    tets=mtids[sel], bary=mbary[sel],
                )
                out[sel] += solution.delta * c[sel, k, None] * vk
                out[sel] += b[sel, k, None] * grads[k][mtids[sel]]
    return out[0] if single else out


def evaluate_composite_curl(solution: HmmSolution, x):
    """curl E_H + curl_y K1 at physical points.

    The x-curl of the elementwise constant K1 vanishes, the y-curl of
    grad_y K2 vanishes, and the remaining delta-scaled terms are
    dropped, matching the two-scale structure of the approximation.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    single = np.asarray(x).ndim == 1
    tids, _ = locate_points(solution.macro, pts)
    mtids, _ = _micro_location(solution, pts)
    cells = solution.cells
    vs = cells.vector_space
    curl_op, _ = fes.vector_p1_operators(vs)
    c = solution.curl_values[tids]
    out = np.array(c, dtype=complex)
    if cells.x_independent:
        local = cells.curl_correctors[0][:, vs.cell_dofs]
        curls = np.einsum("tcl,ktl->ktc", curl_op, local)
        for k in range(3):
            out += c[:, k, None] * curls[k][mtids]
    else:
        for j in np.unique(tids):
            sel = tids == j
            local = cells.curl_correctors[j][:, vs.cell_dofs]
            curls = np.einsum("tcl,ktl->ktc", curl_op, local)
            for k in range(3):
                out[sel] += c[sel, k, None] * curls[k][mtids[sel]]
    return out[0] if single else out


@dataclass(frozen=True)
class CoupledTwoScale:
    """Block system coupling macro edges with per-element correctors.

    Layout: macro edge dofs first, then per element j a vector corrector
    block (3 nm dofs + 3 mean multipliers) followed by four scalar
    corrector blocks (nm dofs + 1 multiplier each), one per in-element
    polynomial moment 1, (x - x_j)_1, (x - x_j)_2, (x - x_j)_3.
    """

    system: SparseSystem
    rhs: np.ndarray
    num_macro: int
    vec_block: int
    scal_block: int

    def element_start(self, j):
        return self.num_macro + j * (self.vec_block + self.scal_block)


def assemble_coupled_two_scale(macro: MacroMesh, micro: PeriodicMicroMesh,
                               sampled: SampledCoefficients,
                               source: SourceField) -> CoupledTwoScale:
    """Assemble the fully coupled two-scale block system.

    Corrector fields are elementwise: the vector corrector is constant
    in x over each macro tet, the scalar corrector is first order in x
    (four moment fields), both with zero-mean multiplier rows.  The
    scalar corrector needs the x-linear moments so that eliminating it
    reproduces the exact first-order mass term of the macro assembly.
    """
    space = fes.EdgeSpace(macro)
    ws = cell_workspace(micro)
    nm = micro.num_masters
    vec_block = 3 * nm + 3
    scal_block = 4 * (nm + 1)
    dim = space.num_dofs + macro.num_tets * (vec_block + scal_block)
    if dim > COUPLED_DOF_GUARD:
        raise ValueError(
            f"coupled two-scale system has {dim} unknowns, above the "
            f"guard of {COUPLED_DOF_GUARD}; use the tensor path instead"
        )

    system = SparseSystem(dim, COMPLEX_SYMMETRIC, name="coupled two-scale system")
    _, mass6, curls = fes.n0_local_matrices(space)
    rule = fes.tet_rule(MASS_DEGREE)
    basis2 = fes.n0_basis_values(space, rule)
    vol = macro.tet_volumes
    vs = ws.vector_space
    ss = ws.scalar_space
    masters = np.arange(nm)
    micro_vol = micro.tet_volumes

    for j in range(macro.num_tets):
        mu = np.asarray(sampled.mu_inv[j], dtype=float)
        kappa = np.asarray(sampled.kappa[j], dtype=complex)
        mu_bar = micro_vol @ mu
        kappa_bar = micro_vol @ kappa
        vj = vol[j]
        base = space.num_dofs + j * (vec_block + scal_block)
        gdofs = space.cell_dofs[j]
        free = gdofs >= 0

        # macro-macro: mean coefficients on curl-curl and mass
        block = mu_bar * vj * (curls[j] @ curls[j].T) - kappa_bar * mass6[j]
        rows = np.broadcast_to(gdofs[:, None], (6, 6))
        cols = np.broadcast_to(gdofs[None, :], (6, 6))
        keep = (rows >= 0) & (cols >= 0)
        system.add(rows[keep], cols[keep], block[keep])

        # macro-vector coupling through the weighted curl load
        lmu = np.zeros((3 * nm, 3))
        np.add.at(
            lmu, vs.cell_dofs,
            (micro_vol * mu)[:, None, None] * ws.vec_curl_op.transpose(0, 2, 1),
        )
        coupling = vj * (curls[j] @ lmu.T)
        vec_dofs = base + np.arange(3 * nm)
        r = np.broadcast_to(gdofs[free][:, None], coupling[free].shape)
        cvd = np.broadcast_to(vec_dofs[None, :], coupling[free].shape)
        system.add(r, cvd, coupling[free])
        system.add(cvd, r, coupling[free])

        # vector-vector: scaled cell operator plus mean constraints
        vals = vj * (mu[:, None, None] * ws.vec_curlcurl + ws.vec_divdiv)
        system.add(
            base + vs.cell_dofs[:, :, None], base + vs.cell_dofs[:, None, :],
            vals,
        )
        for comp in range(3):
            mult = base + 3 * nm + comp
            system.add(np.full(nm, mult), base + comp * nm + masters, ws.mean)
            system.add(base + comp * nm + masters, np.full(nm, mult), ws.mean)

        # in-element moment geometry
        pts = rule.points @ macro.tet_coords(np.array([j]))[0]
        dx = pts - macro.tet_barycenters[j]
        gx = np.zeros((4, 4))
        gx[0, 0] = vj
        gx[0, 1:] = gx[1:, 0] = vj * (rule.weights @ dx)
        gx[1:, 1:] = vj * np.einsum("q,qd,qe->de", rule.weights, dx, dx)
        wmom = np.empty((6, 4, 3))
        wmom[:, 0] = vj * np.einsum("q,qec->ec", rule.weights, basis2[j])
        wmom[:, 1:] = vj * np.einsum(
            "q,qd,qec->edc", rule.weights, dx, basis2[j]
        )

        # macro-scalar coupling through the weighted gradient load
        lka = np.zeros((nm, 3), dtype=complex)
        np.add.at(lka, ss.cell_dofs, kappa[:, None, None] * ws.scal_coup)
        for m in range(4):
            block_ms = -wmom[:, m] @ lka.T
            sdofs = base + vec_block + m * (nm + 1) + masters
            r = np.broadcast_to(gdofs[free][:, None], block_ms[free].shape)
            cs = np.broadcast_to(sdofs[None, :], block_ms[free].shape)
            system.add(r, cs, block_ms[free])
            system.add(cs, r, block_ms[free])

        # scalar-scalar: moment Gram times the weighted stiffness
        stiff_vals = kappa[:, None, None] * ws.scal_stiff
        for m in range(4):
            m_dofs = base + vec_block + m * (nm + 1)
            for mp in range(4):
                if abs(gx[m, mp]) <= 1e-15 * vj:
                    continue
                mp_dofs = base + vec_block + mp * (nm + 1)
                system.add(
                    m_dofs + ss.cell_dofs[:, :, None],
                    mp_dofs + ss.cell_dofs[:, None, :],
                    -gx[m, mp] * stiff_vals,
                )
            mult = m_dofs + nm
            system.add(np.full(nm, mult), m_dofs + masters, ws.mean)
            system.add(m_dofs + masters, np.full(nm, mult), ws.mean)

    system.compress()
    rhs = np.zeros(dim, dtype=complex)
    rhs[:space.num_dofs] = macro_load_vector(space, source)
    return CoupledTwoScale(
        system=system,
        rhs=rhs,
        num_macro=space.num_dofs,
        vec_block=vec_block,
        scal_block=scal_block,
    )
