"""Two-scale energy norms, reference solutions, and error measures.

The energy norm of the coupled two-scale problem,

    |||(u, u1, u2)||| = ||curl u + curl_y u1|| + ||div_y u1||
                        + ||u + grad_y u2||   over Omega x Y,

measures the macro field together with both correctors.  Discrete
corrector derivatives are constant on every micro tet, so all micro
integrals collapse into small Gram matrices accumulated once over the
micro mesh; the x-integrals use a degree-2 rule per macro tet.
Differences of two solutions on nested mesh pairs are measured on the
finer pair, transferring the coarser solution by point location in x
and by containment in y.
"""

from dataclasses import dataclass

import numpy as np

from . import fespace as fes
from .cell import CellCorrectorSet
from .coeffs import CoefficientField, SourceField, preset, source_preset
from .hmm import (
    HmmProblem,
    HmmSolution,
    evaluate_composite_curl,
    evaluate_ehmm,
    macro_load_vector,
    solve_hmm,
    solve_macro_system,
)
from .linsolve import (
    COMPLEX_SYMMETRIC,
    REAL_SPD,
    SparseSystem,
    solve_direct,
)
from .mesh import (
    MacroMesh,
    build_box_mesh,
    build_periodic_cube_mesh,
    locate_points,
    wrap_to_cell,
)

X_QUAD_DEGREE = 2
EXACT_QUAD_DEGREE = 4
RESOLUTION_FACTOR = 8
PERIODICITY_PROBE = 7
MMS_MICRO_N = 2


@dataclass(frozen=True)
class TwoScaleField:
    """A macro field with optional per-element cell correctors.

    The macro part is either a discrete edge field (space, dofs) or an
    analytic callable returning (values, curls) at points.  The
    corrector parts recombine the unit-load cell solutions in ``cells``
    with the per-element coefficient rows ``curl_coeffs`` (weights of
    the vector correctors) and ``field_coeffs`` (weights of the scalar
    correctors); leave ``cells`` None for a corrector-free field.
    """

    space: fes.EdgeSpace = None
    dofs: np.ndarray = None
    analytic: object = None
    cells: CellCorrectorSet = None
    curl_coeffs: np.ndarray = None
    field_coeffs: np.ndarray = None

    def __post_init__(self):
        if (self.space is None) == (self.analytic is None):
            raise ValueError(
                "exactly one of a discrete edge field and an analytic "
                "callable must be given"
            )
        if self.cells is not None and self.space is None:
            raise ValueError("corrector parts require a discrete macro part")
        if self.cells is not None and (
            self.curl_coeffs is None or self.field_coeffs is None
        ):
            raise ValueError("corrector sets require both coefficient rows")


def as_two_scale(obj):
    """View a solution (or pass a TwoScaleField through) uniformly."""
    if isinstance(obj, TwoScaleField):
        return obj
    if isinstance(obj, HmmSolution):
        return TwoScaleField(
            space=obj.space,
            dofs=obj.dofs,
            cells=obj.cells,
            curl_coeffs=obj.curl_values,
            field_coeffs=obj.center_values,
        )
    raise TypeError(f"cannot interpret {type(obj).__name__} as a field")


@dataclass(frozen=True)
class EnergyNorm:
    """The two-scale energy norm and its three summands."""

    curl_part: float
    div_part: float
    l2_part: float

    @property
    def total(self):
        return self.curl_part + self.div_part + self.l2_part


def _unit_corrector_tables(cells):
    """Per-micro-tet derivative tables of the unit-load correctors.

    Returns (curls (nt,3,3), divs (nt,3), grads (nt,3,3)) where
    [t, :, k] holds the curl of the k-th vector corrector or the
    gradient of the k-th scalar corrector on micro tet t and divs[t, k]
    the divergence of the k-th vector corrector.
    """
    vs = cells.vector_space
    ss = cells.scalar_space
    curl_op, div_op = fes.vector_p1_operators(vs)
    vloc = cells.curl_correctors[0][:, vs.cell_dofs]
    curls = np.einsum("tcl,ktl->tck", curl_op, vloc)
    divs = np.einsum("tl,ktl->tk", div_op, vloc)
    sloc = cells.grad_correctors[0][:, ss.cell_dofs]
    grads = np.einsum("tac,kta->tck", ss.grads, sloc)
    return curls, divs, grads


def _corrector_data(field, micro_mesh):
    """Unit-corrector tables of ``field`` on the measuring micro mesh.

    The measuring mesh must refine the field's own micro mesh; each
    measuring tet inherits the constant corrector derivatives of the
    coarse tet containing its barycenter.  Corrector-free fields give
    zero tables.
    """
    nt = micro_mesh.num_tets
    if field.cells is None:
        zero = np.zeros((nt, 3, 3))
        return zero, np.zeros((nt, 3)), zero.astype(complex)
    if not field.cells.x_independent:
        raise ValueError(
            "energy quadrature requires x-independent corrector sets"
        )
    own = field.cells.micro
    if micro_mesh.n % own.n != 0:
        raise ValueError(
            f"measuring micro mesh n={micro_mesh.n} does not refine the "
            f"corrector micro mesh n={own.n}"
        )
    curls, divs, grads = _unit_corrector_tables(field.cells)
    if own.n == micro_mesh.n:
        return curls, divs, grads
    tmap, _ = locate_points(own, micro_mesh.tet_barycenters)
    return curls[tmap], divs[tmap], grads[tmap]


def _coefficient_rows(field, macro_mesh):
    """Corrector coefficient rows of ``field`` per measuring macro tet."""
    nt = macro_mesh.num_tets
    if field.cells is None:
        zero = np.zeros((nt, 3), dtype=complex)
        return zero, zero
    own = field.space.mesh
    if own is macro_mesh or own.n == macro_mesh.n:
        jmap = np.arange(nt)
    else:
        jmap, _ = locate_points(own, macro_mesh.tet_barycenters)
    return field.curl_coeffs[jmap], field.field_coeffs[jmap]


def _macro_values(field, macro_mesh, rule):
    """Values and curls at the rule points of every measuring tet."""
    nq = len(rule.weights)
    nt = macro_mesh.num_tets
    if field.analytic is not None:
        pts = fes.physical_points(macro_mesh, rule).reshape(-1, 3)
        vals, curls = field.analytic(pts)
    elif field.space.mesh is macro_mesh or field.space.mesh.n == macro_mesh.n:
        tets = np.repeat(np.arange(nt), nq)
        bary = np.tile(rule.points, (nt, 1))
        vals, curls = fes.evaluate_edge_field(
            field.space, field.dofs, tets=tets, bary=bary
        )
    else:
        pts = fes.physical_points(macro_mesh, rule).reshape(-1, 3)
        vals, curls = fes.evaluate_edge_field(
            field.space, field.dofs, points=pts
        )
    return vals.reshape(nt, nq, 3), curls.reshape(nt, nq, 3)


def _energy_squares_by_tet(primary, secondary, macro_mesh, micro_mesh):
    """Per-measuring-tet squares of the three energy summands.

    Returns (curl_sq, div_sq, l2_sq), each a real array over the tets of
    ``macro_mesh``; ``secondary`` may be None for a plain norm.
    """
    rule = fes.tet_rule(X_QUAD_DEGREE)
    w = rule.weights
    vol = macro_mesh.tet_volumes
    micro_vol = micro_mesh.tet_volumes

    vals, curls = _macro_values(primary, macro_mesh, rule)
    cu, dv, gr = _corrector_data(primary, micro_mesh)
    coeff_c, coeff_f = _coefficient_rows(primary, macro_mesh)
    if secondary is not None:
        vals_s, curls_s = _macro_values(secondary, macro_mesh, rule)
        cu_s, dv_s, gr_s = _corrector_data(secondary, micro_mesh)
        cc_s, fc_s = _coefficient_rows(secondary, macro_mesh)
        vals = vals - vals_s
        curls = curls - curls_s
        cu = np.concatenate([cu, cu_s], axis=2)
        dv = np.concatenate([dv, dv_s], axis=1)
        gr = np.concatenate([gr, gr_s], axis=2)
        coeff_c = np.concatenate([coeff_c, -cc_s], axis=1)
        coeff_f = np.concatenate([coeff_f, -fc_s], axis=1)

    # integrals over Y collapse into means and Gram matrices of the
    # stacked unit-corrector derivative tables (vector tables are real,
    # scalar ones complex, hence the conjugation)
    mean_cu = np.einsum("i,ick->ck", micro_vol, cu)
    gram_cu = np.einsum("i,ick,icl->kl", micro_vol, cu, cu)
    gram_dv = np.einsum("i,ik,il->kl", micro_vol, dv, dv)
    mean_gr = np.einsum("i,ick->ck", micro_vol, gr)
    gram_gr = np.einsum("i,ick,icl->kl", micro_vol, gr.conj(), gr)

    curl_sq = vol * (
        np.einsum("q,tqc->t", w, np.abs(curls) ** 2)
        + 2.0
        * np.einsum(
            "tc,tc->t", np.einsum("q,tqc->tc", w, curls),
            np.einsum("ck,tk->tc", mean_cu, coeff_c).conj(),
        ).real
        + np.einsum("tk,kl,tl->t", coeff_c.conj(), gram_cu, coeff_c).real
    )
    div_sq = vol * np.einsum(
        "tk,kl,tl->t", coeff_c.conj(), gram_dv, coeff_c
    ).real
    l2_sq = vol * (
        np.einsum("q,tqc->t", w, np.abs(vals) ** 2)
        + 2.0
        * np.einsum(
            "tc,tc->t", np.einsum("q,tqc->tc", w, vals),
            np.einsum("ck,tk->tc", mean_gr, coeff_f).conj(),
        ).real
        + np.einsum("tk,kl,tl->t", coeff_f.conj(), gram_gr, coeff_f).real
    )
    return curl_sq, div_sq, l2_sq


def _energy_of_difference(primary, secondary, macro_mesh, micro_mesh):
    """Energy norm of primary - secondary (secondary may be None)."""
    curl_sq, div_sq, l2_sq = _energy_squares_by_tet(
        primary, secondary, macro_mesh, micro_mesh
    )

    def root(s):
        return float(np.sqrt(max(s, 0.0)))

    return EnergyNorm(root(curl_sq.sum()), root(div_sq.sum()), root(l2_sq.sum()))


def energy_norm(field, macro_mesh, micro_mesh):
    """Two-scale energy norm of a field on the given measuring meshes."""
    return _energy_of_difference(
        as_two_scale(field), None, macro_mesh, micro_mesh
    )


def _difference_meshes(coarse, reference):
    """Validate a coarse/reference pair and pick the measuring meshes."""
    if reference.space is None:
        raise ValueError("the reference field must be discrete")
    macro_mesh = reference.space.mesh
    if coarse.space is not None:
        cm = coarse.space.mesh
        if macro_mesh.n % cm.n != 0 or not (
            np.allclose(cm.box_lo, macro_mesh.box_lo)
            and np.allclose(cm.box_hi, macro_mesh.box_hi)
        ):
            raise ValueError(
                f"reference macro mesh n={macro_mesh.n} does not refine "
                f"the coarse mesh n={cm.n} on the same box"
            )
    if reference.cells is not None:
        micro_mesh = reference.cells.micro
    elif coarse.cells is not None:
        micro_mesh = coarse.cells.micro
    else:
        raise ValueError("error_triple requires at least one corrector set")
    return macro_mesh, micro_mesh


def error_triple(coarse, reference):
    """Energy norm of the difference, measured on the reference meshes.

    Both arguments are solutions or TwoScaleFields; the reference must
    be discrete and its macro and micro meshes must refine the coarse
    ones.
    """
    coarse = as_two_scale(coarse)
    reference = as_two_scale(reference)
    macro_mesh, micro_mesh = _difference_meshes(coarse, reference)
    return _energy_of_difference(reference, coarse, macro_mesh, micro_mesh)


def element_error_norms(coarse, reference):
    """Per-coarse-element energy norms of the difference.

    Returns an array of shape (coarse tets, 3) whose row j holds the
    three energy summands (curl, div, L2 parts) of the error restricted
    to coarse element j; summing a row gives the local energy norm.  The
    coarse field must be discrete so its elements are defined.
    """
    coarse = as_two_scale(coarse)
    reference = as_two_scale(reference)
    if coarse.space is None:
        raise ValueError("per-element errors need a discrete coarse field")
    macro_mesh, micro_mesh = _difference_meshes(coarse, reference)
    squares = _energy_squares_by_tet(
        reference, coarse, macro_mesh, micro_mesh
    )
    coarse_mesh = coarse.space.mesh
    if coarse_mesh.n == macro_mesh.n:
        jmap = np.arange(macro_mesh.num_tets)
    else:
        jmap, _ = locate_points(coarse_mesh, macro_mesh.tet_barycenters)
    parts = np.zeros((coarse_mesh.num_tets, 3))
    for col, sq in enumerate(squares):
        np.add.at(parts[:, col], jmap, sq)
    return np.sqrt(np.clip(parts, 0.0, None))


def corrector_periodicity_gap(cells):
    """Largest corrector mismatch across opposite unit-cell faces.

    Probes the vector and scalar unit correctors at paired points on
    the faces y_d = -1/2 and y_d = +1/2; identification of opposite
    faces in the periodic spaces should keep the gap at roundoff size.
    """
    grid = (
        np.arange(1, PERIODICITY_PROBE + 1) / (PERIODICITY_PROBE + 1) - 0.5
    )
    uu, vv = np.meshgrid(grid, grid, indexing="ij")
    flat = np.stack([uu.ravel(), vv.ravel()], axis=1)
    vs = cells.vector_space
    ss = cells.scalar_space
    # points exactly on the face would wrap onto one another, so probe
    # a distance below interpolation resolution inside each side
    half = 0.5 - 1e-13
    gap = 0.0
    for d in range(3):
        lo = np.insert(flat, d, -half, axis=1)
        hi = np.insert(flat, d, half, axis=1)
        for k in range(3):
            v_lo = vs.values(cells.curl_correctors[0][k], points=lo)
            v_hi = vs.values(cells.curl_correctors[0][k], points=hi)
            gap = max(gap, float(np.abs(v_lo - v_hi).max()))
            s_lo = ss.values(cells.grad_correctors[0][k], points=lo)
            s_hi = ss.values(cells.grad_correctors[0][k], points=hi)
            gap = max(gap, float(np.abs(s_lo - s_hi).max()))
    return gap


def solve_direct_fine(coefficients: CoefficientField, delta,
                      source: SourceField, fine_mesh: MacroMesh,
                      resolution_factor=RESOLUTION_FACTOR):
    """Single-scale edge solve with coefficients sampled at (x, x / delta).

    The fine mesh must resolve the oscillation: cell size at most
    delta / resolution_factor.  Coefficients are frozen at tet
    barycenters; the solve meets the direct-path residual contract.
    """
    h = float(fine_mesh.cell_sizes.max())
    if h > delta / resolution_factor + 1e-14:
        width = float((fine_mesh.box_hi - fine_mesh.box_lo).max())
        needed = int(np.ceil(resolution_factor * width / delta))
        raise ValueError(
            f"fine mesh n={fine_mesh.n} does not resolve delta={delta:g}: "
            f"cell size {h:g} exceeds delta/{resolution_factor:g}; "
            f"need n >= {needed}"
        )
    bary = fine_mesh.tet_barycenters
    y = wrap_to_cell(bary / delta)
    mu = np.asarray(coefficients.mu_inv(bary, y), dtype=float)
    kap = np.asarray(coefficients.kappa(bary, y), dtype=complex)

    space = fes.EdgeSpace(fine_mesh)
    kc, mass, _ = fes.n0_local_matrices(space)
    blocks = mu[:, None, None] * kc - kap[:, None, None] * mass
    system = SparseSystem(
        space.num_dofs, COMPLEX_SYMMETRIC,
        name=f"fine single-scale system (n={fine_mesh.n})",
    )
    dofs = space.cell_dofs
    rows = np.broadcast_to(dofs[:, :, None], blocks.shape)
    cols = np.broadcast_to(dofs[:, None, :], blocks.shape)
    keep = (rows >= 0) & (cols >= 0)
    system.add(rows[keep], cols[keep], blocks[keep])
    system.compress()
    rhs = macro_load_vector(space, source)
    sol = solve_macro_system(space, system, rhs)
    return TwoScaleField(space=space, dofs=sol)


def modeling_error(fine_field: TwoScaleField, solution: HmmSolution):
    """L2 distances between a fine solve and the composite approximation.

    Returns (l2_field, l2_curl): the field part compares E_delta with
    the composite E_H + delta K1 + grad_y K2, the curl part compares
    curl E_delta with curl E_H + curl_y K1, both integrated with a
    degree-2 rule on the fine mesh.
    """
    mesh = fine_field.space.mesh
    rule = fes.tet_rule(X_QUAD_DEGREE)
    nq = len(rule.weights)
    pts = fes.physical_points(mesh, rule).reshape(-1, 3)
    tets = np.repeat(np.arange(mesh.num_tets), nq)
    bary = np.tile(rule.points, (mesh.num_tets, 1))
    vals_f, curls_f = fes.evaluate_edge_field(
        fine_field.space, fine_field.dofs, tets=tets, bary=bary
    )
    vals_h = evaluate_ehmm(solution, pts)
    curls_h = evaluate_composite_curl(solution, pts)
    wv = np.repeat(mesh.tet_volumes, nq) * np.tile(rule.weights, mesh.num_tets)
    l2 = np.sqrt(np.sum(wv * (np.abs(vals_f - vals_h) ** 2).sum(-1)))
    curl = np.sqrt(np.sum(wv * (np.abs(curls_f - curls_h) ** 2).sum(-1)))
    return float(l2), float(curl)


def mms_field():
    """The manufactured solution and its curl as a points callable."""

    def evaluate(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s2 = np.sin(np.pi * x[:, 1])
        s3 = np.sin(np.pi * x[:, 2])
        c2 = np.cos(np.pi * x[:, 1])
        c3 = np.cos(np.pi * x[:, 2])
        vals = np.zeros_like(x)
        vals[:, 0] = s2 * s3
        curls = np.zeros_like(x)
        curls[:, 1] = np.pi * s2 * c3
        curls[:, 2] = -np.pi * c2 * s3
        return vals, curls

    return evaluate


def hcurl_error(space: fes.EdgeSpace, dofs, exact):
    """H(curl) distance to an analytic (values, curls) callable."""
    mesh = space.mesh
    rule = fes.tet_rule(EXACT_QUAD_DEGREE)
    nq = len(rule.weights)
    pts = fes.physical_points(mesh, rule).reshape(-1, 3)
    tets = np.repeat(np.arange(mesh.num_tets), nq)
    bary = np.tile(rule.points, (mesh.num_tets, 1))
    vals, curls = fes.evaluate_edge_field(space, dofs, tets=tets, bary=bary)
    evals, ecurls = exact(pts)
    wv = np.repeat(mesh.tet_volumes, nq) * np.tile(rule.weights, mesh.num_tets)
    err = np.sum(wv * (np.abs(vals - evals) ** 2).sum(-1))
    err += np.sum(wv * (np.abs(curls - ecurls) ** 2).sum(-1))
    return float(np.sqrt(err))


def fit_rate(sizes, errors):
    """Least-squares slope of log error against log mesh size (1/n)."""
    x = np.log(1.0 / np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def mms_reference(kappa0, sizes, micro_n=MMS_MICRO_N):
    """Convergence table of the constant-coefficient manufactured solution.

    Runs the multiscale pipeline with unit mu and constant kappa0 on
    unit-cube meshes of the given sizes; the source
    (2 pi^2 - kappa0) sin(pi x2) sin(pi x3) e1 makes
    sin(pi x2) sin(pi x3) e1 the exact solution, so the H(curl) error
    is computable directly.  Returns a list of {n, hcurl_error, rate}
    rows; the rate is the common log-log regression slope.
    """
    kappa0 = complex(kappa0)
    if not (kappa0.real > 0 and kappa0.imag < 0):
        raise ValueError(
            f"kappa0 must have positive real and negative imaginary "
            f"part, got {kappa0}"
        )
    micro = build_periodic_cube_mesh(micro_n)
    coeffs = preset("constant", {"m0": 1.0, "k0": kappa0})
    source = source_preset(
        "mms_sine", {"amplitude": 2.0 * np.pi**2 - kappa0}
    )
    exact = mms_field()
    rows = []
    for n in sizes:
        macro = build_box_mesh((0, 0, 0), (1, 1, 1), int(n))
        sol = solve_hmm(HmmProblem(macro, micro, coeffs, source, delta=1.0))
        rows.append({
            "n": int(n),
            "hcurl_error": hcurl_error(sol.space, sol.dofs, exact),
        })
    rate = (
        fit_rate([r["n"] for r in rows], [r["hcurl_error"] for r in rows])
        if len(rows) >= 2 else float("nan")
    )
    for r in rows:
        r["rate"] = rate
    return rows


def helmholtz_split(space: fes.EdgeSpace, dofs, split_mesh: MacroMesh):
    """Discrete Helmholtz split of an edge field on a refined mesh.

    Solves (grad theta, grad phi) = (e, grad phi) in the P1 space with
    zero boundary trace on the split mesh and returns the L2 norms
    (theta_norm, z_norm) with z = e - grad theta.
    """
    if split_mesh.n % space.mesh.n != 0:
        raise ValueError(
            f"split mesh n={split_mesh.n} does not refine the field mesh "
            f"n={space.mesh.n}"
        )
    nodal = fes.NodalSpace(split_mesh)
    stiff, mass = fes.nodal_local_matrices(nodal)
    system = SparseSystem(
        nodal.num_dofs, REAL_SPD, name="gradient-part system"
    )
    cd = nodal.cell_dofs
    rows = np.broadcast_to(cd[:, :, None], stiff.shape)
    cols = np.broadcast_to(cd[:, None, :], stiff.shape)
    keep = (rows >= 0) & (cols >= 0)
    system.add(rows[keep], cols[keep], stiff[keep])
    system.compress()

    rule = fes.tet_rule(X_QUAD_DEGREE)
    nq = len(rule.weights)
    nt = split_mesh.num_tets
    if split_mesh.n == space.mesh.n:
        tets = np.repeat(np.arange(nt), nq)
        bary = np.tile(rule.points, (nt, 1))
        vals, _ = fes.evaluate_edge_field(space, dofs, tets=tets, bary=bary)
    else:
        pts = fes.physical_points(split_mesh, rule).reshape(-1, 3)
        vals, _ = fes.evaluate_edge_field(space, dofs, points=pts)
    vals = vals.reshape(nt, nq, 3)
    # rhs_a = int e . grad hat_a with the hat gradient constant per tet
    contrib = np.einsum(
        "t,q,tqc,tac->ta", split_mesh.tet_volumes, rule.weights, vals,
        nodal.grads,
    )
    rhs = np.zeros(nodal.num_dofs, dtype=complex)
    np.add.at(rhs, np.clip(cd, 0, None), np.where(cd >= 0, contrib, 0.0))
    parts = solve_direct(system, np.stack([rhs.real, rhs.imag], axis=1))
    theta = parts[:, 0] + 1j * parts[:, 1]

    loc = np.where(cd >= 0, theta[np.clip(cd, 0, None)], 0.0)
    theta_sq = np.einsum("ta,tab,tb->", loc.conj(), mass, loc).real
    grad_theta = np.einsum("ta,tac->tc", loc, nodal.grads)
    z = vals - grad_theta[:, None, :]
    z_sq = np.einsum(
        "t,q,tqc->", split_mesh.tet_volumes, rule.weights, np.abs(z) ** 2
    )
    return float(np.sqrt(max(theta_sq, 0.0))), float(np.sqrt(z_sq))
