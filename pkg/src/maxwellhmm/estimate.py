"""Residual error indicators for the multiscale solution.

The a posteriori bound splits the error into five groups: element
residuals of the homogenized equation, tangential and normal flux jumps
across interior macro faces, flux jumps across interior micro faces of
the corrector fields, and two data-oscillation groups measuring the
polynomial approximation of the source and the barycenter sampling of
the coefficients.  Each group aggregates by root-sum-of-squares and the
groups are reported separately, never pooled.

Micro-level contributions exist per (macro element, micro entity) pair,
which is too large to materialize; all micro sums collapse into small
Gram matrices over the micro mesh (shared by every macro element when
the coefficients do not depend on the slow variable), so the table
stores one square-sum per macro element for each micro-level kind.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import fespace as fes
from .cell import CellCorrectorSet
from .errors import error_triple
from .hmm import HmmSolution
from .mesh import LOCAL_EDGES

X_QUAD_DEGREE = 2
FACE_QUAD_DEGREE = 2
MICRO_QUAD_DEGREE = 2
SOURCE_QUAD_DEGREE = 4
SOURCE_DEGREES = (0, 1)
PAIR_BLOCK_ENTRIES = 2_000_000
CSV_HEADER = ("kind", "element", "other", "value")


@dataclass(frozen=True)
class IndicatorTable:
    """All residual indicators of one multiscale solution.

    Per macro element j: ``element_residual`` (volume residual of the
    homogenized equation), ``element_divergence`` (divergence of the
    averaged electric flux), and ``source_mismatch`` (distance of the
    source to its elementwise polynomial projection).  Per interior
    macro face: ``face_tangential`` and ``face_normal`` flux jumps, with
    the adjacent element pair in ``face_elements``.  Micro-level kinds
    are stored as per-element square-sums over all interior micro faces
    (``micro_tangential_sq``, ``micro_normal_sq``) and over all micro
    elements (``coefficient_mismatch_sq``).

    The five totals aggregate their group by root-sum-of-squares;
    ``residual_total`` sums the three residual group totals and
    ``total`` adds the two data groups.
    """

    element_residual: np.ndarray
    element_divergence: np.ndarray
    source_mismatch: np.ndarray
    face_elements: np.ndarray
    face_tangential: np.ndarray
    face_normal: np.ndarray
    micro_tangential_sq: np.ndarray
    micro_normal_sq: np.ndarray
    coefficient_mismatch_sq: np.ndarray
    element_total: float
    face_total: float
    micro_total: float
    source_total: float
    coefficient_total: float

    @property
    def residual_total(self):
        """Sum of the three residual group aggregates."""
        return self.element_total + self.face_total + self.micro_total

    @property
    def total(self):
        """Residual aggregates plus both data-oscillation aggregates."""
        return self.residual_total + self.source_total + self.coefficient_total


def _root(values):
    return np.sqrt(np.clip(values, 0.0, None))


def _project_source(mesh, source, degree):
    """Elementwise L2 projection data of the source field.

    Returns (rule, fvals, offsets, const, slope): the degree-4 rule with
    the source values and point offsets from the element barycenters,
    plus the projection's constant term (per element) and slope matrix
    (zero for degree 0).  The moment matrix of the offsets is exact at
    degree 2 and block-diagonal because offsets average to zero.
    """
    rule = fes.tet_rule(SOURCE_QUAD_DEGREE)
    pts = fes.physical_points(mesh, rule)
    fvals = np.asarray(source.evaluate(pts), dtype=complex)
    offsets = pts - mesh.tet_barycenters[:, None, :]
    const = np.einsum("q,tqc->tc", rule.weights, fvals)
    if degree == 0:
        slope = np.zeros((mesh.num_tets, 3, 3), dtype=complex)
    else:
        r2 = fes.tet_rule(X_QUAD_DEGREE)
        off2 = fes.physical_points(mesh, r2) - mesh.tet_barycenters[:, None, :]
        moment = np.einsum("q,tqa,tqb->tab", r2.weights, off2, off2)
        rhs = np.einsum("q,tqa,tqc->tac", rule.weights, offsets, fvals)
        slope = np.linalg.solve(moment, rhs)
    return rule, fvals, offsets, const, slope


def _edge_values_at(space, loc, tids, bary):
    """Edge-field values on the given tets at barycentric points.

    ``loc`` are the orientation-folded coefficients from
    space.local_values(dofs); ``bary`` has shape (n, nq, 4) and the
    result (n, nq, 3).
    """
    grads = space.grads[tids]
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    basis = (
        bary[:, :, a, None] * grads[:, None, b]
        - bary[:, :, b, None] * grads[:, None, a]
    )
    return np.einsum("fe,fqec->fqc", loc[tids], basis)


def _barycentric_in_tets(mesh, tids, pts):
    """Barycentric coordinates of physical points within known tets."""
    grads = mesh.barycentric_gradients()[tids]
    centers = mesh.tet_barycenters[tids]
    return 0.25 + np.einsum("fad,fqd->fqa", grads, pts - centers[:, None, :])


def _micro_tables(cells: CellCorrectorSet, j, curl_op, div_op):
    """Per-micro-tet derivative tables of element j's correctors.

    Returns (tmat, divs, wmat): tmat[t, :, k] is e_k plus the curl of
    the k-th vector corrector on micro tet t (real), divs[t, k] its
    divergence, and wmat[t, :, k] the gradient of the k-th scalar
    corrector (complex).
    """
    vs = cells.vector_space
    ss = cells.scalar_space
    vloc = cells.curl_correctors[j][:, vs.cell_dofs]
    tmat = np.einsum("tcl,ktl->tck", curl_op, vloc)
    tmat += np.eye(3)[None, :, :]
    divs = np.einsum("tl,ktl->tk", div_op, vloc)
    sloc = cells.grad_correctors[j][:, ss.cell_dofs]
    wmat = np.einsum("tac,kta->tck", ss.grads, sloc)
    return tmat, divs, wmat


def _face_grams(micro, mu, kappa, tmat, divs, wmat):
    """Gram matrices of the micro-face jump terms.

    The magnetic flux jump across a micro face is linear in the element
    curl vector, jump = (nd - crossed) c, and the electric flux jump is
    linear in the macro field value at the slow point.  Both collapse
    into 3x3 Grams weighted by face diameter times area:

      tangential: real, quadratic form in the curl vector;
      charge / cross / normal: the |jump|^2 expansion of the electric
      term into its field-field, field-corrector, and
      corrector-corrector moments.
    """
    own = micro.face_owner
    nei = micro.face_neighbor
    nrm = micro.face_normals
    wf = micro.face_diameters * micro.face_areas

    tang = mu[:, None, None] * tmat
    dmat = tang[own] - tang[nei]
    crossed = np.cross(
        nrm[:, None, :], dmat.transpose(0, 2, 1)
    ).transpose(0, 2, 1)
    ddiv = divs[own] - divs[nei]
    bmat = nrm[:, :, None] * ddiv[:, None, :] - crossed
    tangential = np.einsum("f,fck,fcl->kl", wf, bmat, bmat)

    kw = kappa[:, None, None] * wmat
    dk = kappa[own] - kappa[nei]
    dkw = kw[own] - kw[nei]
    nn = nrm[:, :, None] * nrm[:, None, :]
    charge = np.einsum("f,fab->ab", wf * np.abs(dk) ** 2, nn)
    cross = np.einsum("f,fab,fbc->ac", wf * dk, nn, dkw.conj())
    normal = np.einsum("f,fba,fbc,fcd->ad", wf, dkw.conj(), nn, dkw)
    return tangential, charge, cross, normal


def _micro_face_squares(vol, c, b, smat, grams):
    """Per-element square-sums of both micro-face jump kinds."""
    tangential, charge, cross, normal = grams
    tan_sq = vol * np.einsum("jk,kl,jl->j", c.conj(), tangential, c).real
    nor_sq = (
        np.einsum("ab,jab->j", charge, smat).real
        + 2.0 * vol * np.einsum("ja,ab,jb->j", b, cross, b.conj()).real
        + vol * np.einsum("ja,ab,jb->j", b.conj(), normal, b).real
    )
    return np.clip(tan_sq, 0.0, None), np.clip(nor_sq, 0.0, None)


def _coefficient_moments(coefficients, micro, xpts, mu_h, kappa_h):
    """Squared mismatch of the sampled against the true coefficients.

    Integrates |coefficient(x, y) - barycenter sample|^2 over every
    micro tet with a degree-2 rule; xpts is an (nx, 3) array of slow
    points, the result a pair of (nx, micro tets) arrays.
    """
    rule = fes.tet_rule(MICRO_QUAD_DEGREE)
    ypts = fes.physical_points(micro, rule)
    xs = xpts[:, None, None, :]
    mu = np.asarray(coefficients.mu_inv(xs, ypts[None]), dtype=float)
    ka = np.asarray(coefficients.kappa(xs, ypts[None]), dtype=complex)
    dmu = (mu - mu_h[None, :, None]) ** 2
    dka = np.abs(ka - kappa_h[None, :, None]) ** 2
    mv = micro.tet_volumes
    d_mu = mv[None, :] * np.einsum("q,xiq->xi", rule.weights, dmu)
    d_ka = mv[None, :] * np.einsum("q,xiq->xi", rule.weights, dka)
    return d_mu, d_ka


def _mismatch_squares_shared(vol, c, b, trs, d_mu, d_ka, tmat, wmat):
    """Per-element square-sum of the coefficient mismatch indicators.

    Shared-corrector fast path: the square of each (element, micro tet)
    term expands into quadratic forms of per-micro-tet moment matrices,
    evaluated as real matrix products over j-blocks so the (j, i) array
    never exceeds the block budget.
    """
    num_j = len(vol)
    num_i = len(d_mu)
    ttg = np.einsum("ick,icl->ikl", tmat, tmat).reshape(num_i, 9)
    whw = np.einsum("ick,icl->ikl", wmat.conj(), wmat)
    whw_re = whw.real.reshape(num_i, 9)
    whw_im = whw.imag.reshape(num_i, 9)
    w_re = wmat.real.reshape(num_i, 9)
    w_im = wmat.imag.reshape(num_i, 9)

    cc = (c.conj()[:, :, None] * c[:, None, :]).real.reshape(num_j, 9)
    bb = b.conj()[:, :, None] * b[:, None, :]
    bb_re = bb.real.reshape(num_j, 9)
    bb_im = bb.imag.reshape(num_j, 9)

    out = np.empty(num_j)
    block = max(1, PAIR_BLOCK_ENTRIES // max(1, num_i))
    for lo in range(0, num_j, block):
        hi = min(lo + block, num_j)
        sl = slice(lo, hi)
        curl_sq = cc[sl] @ ttg.T
        grad_sq = bb_re[sl] @ whw_re.T - bb_im[sl] @ whw_im.T
        field_dot = bb_re[sl] @ w_re.T - bb_im[sl] @ w_im.T
        beta = (
            trs[sl, None]
            + vol[sl, None] * (2.0 * field_dot + grad_sq)
        )
        mag = vol[sl, None] * curl_sq * d_mu[None, :]
        ele = np.clip(beta, 0.0, None) * d_ka[None, :]
        np.clip(mag, 0.0, None, out=mag)
        out[sl] = (mag + ele + 2.0 * np.sqrt(mag * ele)).sum(axis=1)
    return out


def compute_indicators(solution: HmmSolution, coefficients, source,
                       source_degree=1) -> IndicatorTable:
    """Evaluate every residual indicator of a multiscale solution.

    ``coefficients`` must be the field the solution was computed from
    (its exact values enter only the coefficient-mismatch group) and
    ``source`` the load field; ``source_degree`` picks the elementwise
    polynomial degree of the projected source, 0 or 1.
    """
    if source_degree not in SOURCE_DEGREES:
        raise ValueError(
            f"source projection degree must be one of {SOURCE_DEGREES}, "
            f"got {source_degree}"
        )
    space = solution.space
    mesh = space.mesh
    cells = solution.cells
    micro = cells.micro
    sampled = cells.sampled
    vol = mesh.tet_volumes
    diam = mesh.tet_diameters
    micro_vol = micro.tet_volumes
    c = np.asarray(solution.curl_values, dtype=complex)
    b = np.asarray(solution.center_values, dtype=complex)
    loc = np.asarray(space.local_values(solution.dofs), dtype=complex)

    if sampled.x_independent:
        kavg = np.full(mesh.num_tets, complex(sampled.kappa[0] @ micro_vol))
    else:
        kavg = sampled.kappa @ micro_vol
    moment = np.einsum("jik,jk->ji", cells.khom, b) - kavg[:, None] * b

    # volume residual: source projection plus the averaged electric
    # flux, affine on each element, integrated exactly at degree 2
    rule4, fvals, offsets, const, slope = _project_source(
        mesh, source, source_degree
    )
    rule2 = fes.tet_rule(X_QUAD_DEGREE)
    off2 = fes.physical_points(mesh, rule2) - mesh.tet_barycenters[:, None, :]
    basis2 = fes.n0_basis_values(space, rule2)
    evals = np.einsum("te,tqec->tqc", space.gather(solution.dofs), basis2)
    fh2 = const[:, None, :] + np.einsum("tqa,tac->tqc", off2, slope)
    resid = fh2 + kavg[:, None, None] * evals + moment[:, None, :]
    element_residual = diam * _root(
        vol * np.einsum("q,tqc->t", rule2.weights, np.abs(resid) ** 2)
    )

    # divergence residual: the trace of the field Jacobian vanishes
    # identically for the edge elements, so this evaluates to zero
    ea = LOCAL_EDGES[:, 0]
    eb = LOCAL_EDGES[:, 1]
    div_basis = np.einsum(
        "tec,tec->te", space.grads[:, ea], space.grads[:, eb]
    ) - np.einsum("tec,tec->te", space.grads[:, eb], space.grads[:, ea])
    div_vals = np.einsum("te,te->t", loc, div_basis)
    element_divergence = np.abs(kavg * div_vals) * diam * np.sqrt(vol)

    # source oscillation against the projection, degree-4 rule
    gap = fvals - const[:, None, :] - np.einsum("tqa,tac->tqc", offsets, slope)
    source_mismatch = diam * _root(
        vol * np.einsum("q,tqc->t", rule4.weights, np.abs(gap) ** 2)
    )

    # macro-face jumps of both averaged fluxes; the magnetic jump is
    # constant per face, the electric one affine
    interior = np.flatnonzero(~mesh.boundary_face_mask)
    own = mesh.face_owner[interior]
    nei = mesh.face_neighbor[interior]
    nrm = mesh.face_normals[interior]
    wf = mesh.face_diameters[interior] * mesh.face_areas[interior]
    face_elements = np.stack([own, nei], axis=1)
    flux = np.einsum("jik,jk->ji", cells.mhom, c)
    jump = np.cross(flux[own] - flux[nei], nrm)
    face_tangential = np.sqrt(wf) * np.linalg.norm(jump, axis=1)

    tri = fes.triangle_rule(FACE_QUAD_DEGREE)
    fpts = np.einsum(
        "qa,fav->fqv", tri.points, mesh.vertices[mesh.faces[interior]]
    )
    charge = []
    for tids in (own, nei):
        bary = _barycentric_in_tets(mesh, tids, fpts)
        vals = _edge_values_at(space, loc, tids, bary)
        charge.append(
            kavg[tids][:, None] * np.einsum("fqc,fc->fq", vals, nrm)
            + np.einsum("fc,fc->f", moment[tids], nrm)[:, None]
        )
    alpha = charge[0] - charge[1]
    face_normal = _root(
        wf * np.einsum("q,fq->f", tri.weights, np.abs(alpha) ** 2)
    )

    # micro-level groups: shared Grams when the coefficients ignore the
    # slow variable, otherwise one pass per macro element
    smat = vol[:, None, None] * np.einsum(
        "q,tqa,tqb->tab", rule2.weights, evals, evals.conj()
    )
    trs = np.einsum("jaa->j", smat).real
    curl_op, div_op = fes.vector_p1_operators(cells.vector_space)
    if cells.x_independent:
        tmat, divs, wmat = _micro_tables(cells, 0, curl_op, div_op)
        grams = _face_grams(
            micro, sampled.mu_inv[0], sampled.kappa[0], tmat, divs, wmat
        )
        micro_tangential_sq, micro_normal_sq = _micro_face_squares(
            vol, c, b, smat, grams
        )
        d_mu, d_ka = _coefficient_moments(
            coefficients, micro, mesh.tet_barycenters[:1],
            np.asarray(sampled.mu_inv[0]), np.asarray(sampled.kappa[0]),
        )
        coefficient_mismatch_sq = _mismatch_squares_shared(
            vol, c, b, trs, d_mu[0], d_ka[0], tmat, wmat
        )
    else:
        micro_tangential_sq = np.empty(mesh.num_tets)
        micro_normal_sq = np.empty(mesh.num_tets)
        coefficient_mismatch_sq = np.empty(mesh.num_tets)
        xq = fes.physical_points(mesh, rule2)
        for j in range(mesh.num_tets):
            tmat, divs, wmat = _micro_tables(cells, j, curl_op, div_op)
            grams = _face_grams(
                micro, sampled.mu_inv[j], sampled.kappa[j], tmat, divs, wmat
            )
            tan_sq, nor_sq = _micro_face_squares(
                vol[j:j + 1], c[j:j + 1], b[j:j + 1], smat[j:j + 1], grams
            )
            micro_tangential_sq[j] = tan_sq[0]
            micro_normal_sq[j] = nor_sq[0]
            d_mu, d_ka = _coefficient_moments(
                coefficients, micro, xq[j],
                np.asarray(sampled.mu_inv[j]), np.asarray(sampled.kappa[j]),
            )
            curl_sq = (
                np.abs(np.einsum("ick,k->ic", tmat, c[j])) ** 2
            ).sum(axis=1)
            wb = np.einsum("ick,k->ic", wmat, b[j])
            full_sq = (
                np.abs(evals[j][:, None, :] + wb[None, :, :]) ** 2
            ).sum(axis=2)
            mag = vol[j] * (rule2.weights @ d_mu) * curl_sq
            ele = vol[j] * np.einsum(
                "x,xi,xi->i", rule2.weights, d_ka, full_sq
            )
            np.clip(mag, 0.0, None, out=mag)
            np.clip(ele, 0.0, None, out=ele)
            coefficient_mismatch_sq[j] = (
                mag + ele + 2.0 * np.sqrt(mag * ele)
            ).sum()

    element_total = float(np.sqrt(
        (element_residual ** 2).sum() + (element_divergence ** 2).sum()
    ))
    face_total = float(np.sqrt(
        (face_tangential ** 2).sum() + (face_normal ** 2).sum()
    ))
    micro_total = float(np.sqrt(
        micro_tangential_sq.sum() + micro_normal_sq.sum()
    ))
    source_total = float(np.sqrt((source_mismatch ** 2).sum()))
    coefficient_total = float(np.sqrt(coefficient_mismatch_sq.sum()))
    return IndicatorTable(
        element_residual=element_residual,
        element_divergence=element_divergence,
        source_mismatch=source_mismatch,
        face_elements=face_elements,
        face_tangential=face_tangential,
        face_normal=face_normal,
        micro_tangential_sq=micro_tangential_sq,
        micro_normal_sq=micro_normal_sq,
        coefficient_mismatch_sq=coefficient_mismatch_sq,
        element_total=element_total,
        face_total=face_total,
        micro_total=micro_total,
        source_total=source_total,
        coefficient_total=coefficient_total,
    )


def effectivity(solution, reference, table: IndicatorTable):
    """Ratio of the residual estimator to the reference error.

    The numerator sums the three residual group aggregates; the
    denominator is the two-scale energy norm of the difference against
    the overkill reference.  A zero error (exactly reproduced solution)
    leaves the ratio undefined, reported as NaN.
    """
    err = error_triple(solution, reference).total
    if err == 0.0:
        return float("nan")
    return table.residual_total / err


def local_efficiency(table: IndicatorTable, local_errors):
    """Per-element ratio of local indicators to local error plus data.

    ``local_errors`` holds the per-element energy norms of the error
    against a reference, either as totals (n,) or as the (n, 3) summand
    array of errors.element_error_norms.  The numerator collects the
    element-level indicator squares, the denominator adds the element's
    data-oscillation terms to the local error.  Zero-over-zero entries
    report 0; positive-over-zero report inf.
    """
    local = np.asarray(local_errors, dtype=float)
    if local.ndim == 2:
        local = local.sum(axis=1)
    num = np.sqrt(
        table.element_residual ** 2
        + table.element_divergence ** 2
        + table.micro_tangential_sq
        + table.micro_normal_sq
    )
    den = local + table.source_mismatch + np.sqrt(
        table.coefficient_mismatch_sq
    )
    out = np.zeros_like(num)
    positive = den > 0.0
    out[positive] = num[positive] / den[positive]
    out[~positive & (num > 0.0)] = np.inf
    return out


def _format(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "undefined"
    return f"{value:.17g}"


def indicator_rows(table: IndicatorTable, effectivity_value=None):
    """All CSV rows of a table: one per entity plus the summary block.

    Entity rows carry (kind, element, other, value); micro-level kinds
    report the stored per-element square-sums.  The summary block lists
    the five group aggregates, the residual and grand totals, and the
    effectivity when one is supplied.
    """
    rows = []
    for j, value in enumerate(table.element_residual):
        rows.append(("element_residual", j, "", value))
    for j, value in enumerate(table.element_divergence):
        rows.append(("element_divergence", j, "", value))
    for j, value in enumerate(table.source_mismatch):
        rows.append(("source_mismatch", j, "", value))
    for (jown, jnei), tan, nor in zip(
        table.face_elements, table.face_tangential, table.face_normal
    ):
        rows.append(("face_tangential", jown, jnei, tan))
        rows.append(("face_normal", jown, jnei, nor))
    for j, value in enumerate(table.micro_tangential_sq):
        rows.append(("micro_tangential_sq", j, "", value))
    for j, value in enumerate(table.micro_normal_sq):
        rows.append(("micro_normal_sq", j, "", value))
    for j, value in enumerate(table.coefficient_mismatch_sq):
        rows.append(("coefficient_mismatch_sq", j, "", value))
    rows.append(("aggregate", "element", "", table.element_total))
    rows.append(("aggregate", "face", "", table.face_total))
    rows.append(("aggregate", "micro", "", table.micro_total))
    rows.append(("aggregate", "source", "", table.source_total))
    rows.append(("aggregate", "coefficient", "", table.coefficient_total))
    rows.append(("aggregate", "residual_total", "", table.residual_total))
    rows.append(("aggregate", "total", "", table.total))
    if effectivity_value is not None:
        rows.append(("aggregate", "effectivity", "", effectivity_value))
    return rows


def write_indicator_csv(table: IndicatorTable, path, effectivity_value=None):
    """Write the indicator table to a CSV file."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for kind, id_a, id_b, value in indicator_rows(
            table, effectivity_value
        ):
            writer.writerow(
                [kind, _format(id_a), _format(id_b), _format(value)]
            )
