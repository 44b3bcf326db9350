"""Finite element ingredients on Kuhn meshes.

Lowest-order edge elements (fields a x x + b, one tangential degree of
freedom per edge) discretize the macro curl-curl problem; continuous P1
spaces on the periodically identified unit cell, scalar and 3-component,
discretize the cell problems.  Quadrature rules are barycentric with
weights summing to one, so integrals are volume * sum(w_q f(x_q)).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.special import roots_jacobi, roots_legendre

from .mesh import LOCAL_EDGES, MacroMesh, PeriodicMicroMesh, locate_points


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric quadrature rule on the reference tet or triangle."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _conical_rule(q):
    """Gauss-Jacobi conical product rule, exact for degree 2q - 1."""
    xt, wt = roots_jacobi(q, 2.0, 0.0)
    xs, ws = roots_jacobi(q, 1.0, 0.0)
    xr, wr = roots_legendre(q)
    t = (xt + 1) / 2
    s = (xs + 1) / 2
    r = (xr + 1) / 2
    pts = []
    wgt = []
    for i in range(q):
        for j in range(q):
            for k in range(q):
                x = t[i]
                y = s[j] * (1 - t[i])
                z = r[k] * (1 - t[i]) * (1 - s[j])
                pts.append((1 - x - y - z, x, y, z))
                wgt.append(wt[i] * ws[j] * wr[k])
    pts = np.array(pts)
    wgt = np.array(wgt)
    return pts, wgt / wgt.sum()


_STROUD4 = None


def tet_rule(degree):
    """Quadrature rule on the reference tet; supported degrees 1, 2, 4."""
    if degree == 1:
        return QuadratureRule(np.full((1, 4), 0.25), np.ones(1), 1)
    if degree == 2:
        a = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
        b = (5.0 - np.sqrt(5.0)) / 20.0
        pts = np.full((4, 4), b)
        np.fill_diagonal(pts, a)
        return QuadratureRule(pts, np.full(4, 0.25), 2)
    if degree == 4:
        pts, w = _conical_rule(3)
        return QuadratureRule(pts, w, 4)
    raise ValueError(f"unsupported quadrature degree {degree}")


def triangle_rule(degree):
    """Quadrature rule on the reference triangle; supported degrees 1, 2."""
    if degree == 1:
        return QuadratureRule(np.full((1, 3), 1.0 / 3.0), np.ones(1), 1)
    if degree == 2:
        pts = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        return QuadratureRule(pts, np.full(3, 1.0 / 3.0), 2)
    raise ValueError(f"unsupported triangle quadrature degree {degree}")


def physical_points(mesh, rule, tids=None):
    """Map rule points into the given tets, shape (nt, nq, 3)."""
    coords = mesh.tet_coords(tids)
    return np.einsum("qa,tac->tqc", rule.points, coords)


class EdgeSpace:
    """Lowest-order edge element space, zero tangential trace by default."""

    def __init__(self, mesh: MacroMesh, constrained=True):
        self.mesh = mesh
        self.constrained = constrained
        free = ~mesh.boundary_edge_mask if constrained else np.ones(
            mesh.num_edges, dtype=bool
        )
        self.edge_dof = np.full(mesh.num_edges, -1, dtype=np.int64)
        self.edge_dof[free] = np.arange(int(free.sum()))
        self.free_edges = np.flatnonzero(free)
        self.num_dofs = int(free.sum())
        self.cell_dofs = self.edge_dof[mesh.tet_edges]
        self.signs = mesh.tet_edge_signs.astype(float)
        self.grads = mesh.barycentric_gradients()

    def gather(self, dofs):
        """Per-tet coefficient vectors with constrained edges zeroed.

        Pairs with the sign-folded local matrices of n0_local_matrices.
        """
        return np.where(
            self.cell_dofs >= 0,
            np.asarray(dofs)[np.clip(self.cell_dofs, 0, None)],
            0.0,
        )

    def local_values(self, dofs):
        """Like gather but with orientation signs applied to the
        coefficients, for evaluation against the unsigned reference basis."""
        return self.gather(dofs) * self.signs


def n0_basis_values(space: EdgeSpace, rule: QuadratureRule, tids=None):
    """Signed basis values at rule points, shape (nt, nq, 6, 3).

    Pairs with space.gather(dofs), like the local matrices.
    """
    grads = space.grads if tids is None else space.grads[tids]
    signs = space.signs if tids is None else space.signs[tids]
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    lam = rule.points
    # phi_(a,b)(x_q) = lam_a grad_b - lam_b grad_a, signed
    return (
        lam[None, :, a, None] * grads[:, None, b]
        - lam[None, :, b, None] * grads[:, None, a]
    ) * signs[:, None, :, None]


def n0_local_matrices(space: EdgeSpace, mass_rule=None):
    """Unweighted local matrices of the edge space.

    Returns (curlcurl (nt,6,6), mass (nt,6,6), curls (nt,6,3)) with
    orientation signs folded in, so they pair with space.gather(dofs).
    The mass uses an exact degree-2 rule.
    """
    mesh = space.mesh
    grads = space.grads
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    curls = 2.0 * np.cross(grads[:, a], grads[:, b]) * space.signs[:, :, None]
    vol = mesh.tet_volumes
    curlcurl = np.einsum("t,tec,tfc->tef", vol, curls, curls)

    rule = mass_rule or tet_rule(2)
    vals = n0_basis_values(space, rule)
    mass = np.einsum("t,q,tqec,tqfc->tef", vol, rule.weights, vals, vals)
    return curlcurl, mass, curls


def evaluate_edge_field(space: EdgeSpace, dofs, points=None, tets=None, bary=None):
    """Values and curls of an edge field at arbitrary points.

    Either physical points (located in the mesh) or precomputed
    (tets, bary) pairs may be given.  Returns (values, curls), each
    (npts, 3), complex if the coefficients are.
    """
    if tets is None:
        tets, bary = locate_points(space.mesh, points)
    loc = space.local_values(dofs)[tets]
    grads = space.grads[tets]
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    lam = bary
    vals = np.einsum(
        "pe,pec->pc",
        loc,
        lam[:, a, None] * grads[:, b] - lam[:, b, None] * grads[:, a],
    )
    curls = np.einsum("pe,pec->pc", loc, 2.0 * np.cross(grads[:, a], grads[:, b]))
    return vals, curls


def element_curls(space: EdgeSpace, dofs):
    """Constant curl per tet of an edge field, shape (nt, 3)."""
    loc = space.local_values(dofs)
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    curls = 2.0 * np.cross(space.grads[:, a], space.grads[:, b])
    return np.einsum("te,tec->tc", loc, curls)


def interpolate_edge(space: EdgeSpace, f):
    """Edge interpolant of an analytic field: dof = edge tangential integral."""
    mesh = space.mesh
    ends = mesh.vertices[mesh.edges[space.free_edges]]
    p0, p1 = ends[:, 0], ends[:, 1]
    xg, wg = roots_legendre(4)
    tg = (xg + 1) / 2
    wg = wg / 2
    dofs = None
    for t, w in zip(tg, wg):
        pts = p0 + t * (p1 - p0)
        fv = np.asarray(f(pts))
        contrib = w * np.einsum("ec,ec->e", fv, (p1 - p0))
        dofs = contrib if dofs is None else dofs + contrib
    return dofs


class PeriodicScalarSpace:
    """Continuous P1 on the periodic unit cell, one dof per master vertex."""

    def __init__(self, mesh: PeriodicMicroMesh):
        self.mesh = mesh
        self.num_dofs = mesh.num_masters
        self.cell_dofs = mesh.vertex_master[mesh.tets]
        self.grads = mesh.barycentric_gradients()

    def mean_vector(self):
        """m[d] = integral of the d-th hat function over the cell."""
        m = np.zeros(self.num_dofs)
        np.add.at(m, self.cell_dofs, 0.25 * self.mesh.tet_volumes[:, None])
        return m

    def gradients(self, u):
        """Constant gradient per tet of a P1 field, (nt, 3)."""
        return np.einsum("ta,tac->tc", np.asarray(u)[self.cell_dofs], self.grads)

    def values(self, u, points=None, tets=None, bary=None):
        if tets is None:
            tets, bary = locate_points(self.mesh, points)
        return np.einsum("pa,pa->p", np.asarray(u)[self.cell_dofs[tets]], bary)


def p1_local_matrices(space: PeriodicScalarSpace):
    """Local stiffness, unit-load coupling, and mass of the scalar P1 space.

    stiffness[a,b] = V grad_a . grad_b, coupling[a,k] = V (grad_a)_k
    (the load integral of e_k . grad of the a-th hat), mass exact.
    """
    vol = space.mesh.tet_volumes
    grads = space.grads
    stiff = np.einsum("t,tac,tbc->tab", vol, grads, grads)
    coup = vol[:, None, None] * grads
    mass = np.full((len(vol), 4, 4), 1.0 / 20.0)
    mass += np.eye(4) / 20.0
    mass *= vol[:, None, None]
    return stiff, coup, mass


class PeriodicVectorSpace:
    """Three-component P1 on the periodic cell, dofs blocked by component."""

    def __init__(self, mesh: PeriodicMicroMesh):
        self.mesh = mesh
        self.scalar = PeriodicScalarSpace(mesh)
        self.num_dofs = 3 * mesh.num_masters
        # local dof l = 3 a + c for vertex a, component c
        nm = mesh.num_masters
        self.cell_dofs = (
            self.scalar.cell_dofs[:, :, None] + nm * np.arange(3)[None, None, :]
        ).reshape(-1, 12)
        self.grads = self.scalar.grads

    def curl_div(self, u):
        """Constant curl and div per tet of a vector P1 field."""
        u = np.asarray(u)
        loc = u[self.cell_dofs]  # (nt, 12)
        curl_op, div_op = vector_p1_operators(self)
        return (
            np.einsum("tcl,tl->tc", curl_op, loc),
            np.einsum("tl,tl->t", div_op, loc),
        )

    def values(self, u, points=None, tets=None, bary=None):
        if tets is None:
            tets, bary = locate_points(self.mesh, points)
        loc = np.asarray(u)[self.cell_dofs[tets]].reshape(len(tets), 4, 3)
        return np.einsum("pac,pa->pc", loc, bary)


def vector_p1_operators(space: PeriodicVectorSpace):
    """Per-tet curl (3x12) and div (1x12) operators of the vector P1 element."""
    grads = space.grads
    nt = len(grads)
    eye = np.eye(3)
    # basis l = 3a + c is lam_a e_c; curl = grad lam_a x e_c, div = (grad lam_a)_c
    curl_op = np.cross(grads[:, :, None, :], eye[None, None, :, :]).reshape(nt, 12, 3)
    curl_op = np.transpose(curl_op, (0, 2, 1))
    div_op = grads.reshape(nt, 12)
    return curl_op, div_op


def vector_p1_local_matrices(space: PeriodicVectorSpace):
    """Local curl-curl and div-div matrices plus the curl load columns.

    Returns (curlcurl (nt,12,12), divdiv (nt,12,12), curl_op (nt,3,12),
    div_op (nt,12)).  Weighting by coefficients is done by callers.
    """
    curl_op, div_op = vector_p1_operators(space)
    vol = space.mesh.tet_volumes
    curlcurl = np.einsum("t,tcl,tcm->tlm", vol, curl_op, curl_op)
    divdiv = np.einsum("t,tl,tm->tlm", vol, div_op, div_op)
    return curlcurl, divdiv, curl_op, div_op


class NodalSpace:
    """Continuous P1 on a box mesh with zero boundary trace."""

    def __init__(self, mesh: MacroMesh):
        self.mesh = mesh
        free = ~mesh.boundary_vertex_mask
        self.vertex_dof = np.full(mesh.num_vertices, -1, dtype=np.int64)
        self.vertex_dof[free] = np.arange(int(free.sum()))
        self.num_dofs = int(free.sum())
        self.cell_dofs = self.vertex_dof[mesh.tets]
        self.grads = mesh.barycentric_gradients()

    def gather(self, dofs):
        """Per-tet nodal coefficients with boundary vertices zeroed."""
        return np.where(
            self.cell_dofs >= 0,
            np.asarray(dofs)[np.clip(self.cell_dofs, 0, None)],
            0.0,
        )

    def values(self, dofs, points=None, tets=None, bary=None):
        if tets is None:
            tets, bary = locate_points(self.mesh, points)
        return np.einsum("pa,pa->p", self.gather(dofs)[tets], bary)

    def element_gradients(self, dofs):
        """Constant gradient per tet, (nt, 3)."""
        return np.einsum("ta,tac->tc", self.gather(dofs), self.grads)


def nodal_local_matrices(space: NodalSpace):
    """Local stiffness and exact mass matrices of the nodal P1 space."""
    vol = space.mesh.tet_volumes
    grads = space.grads
    stiff = np.einsum("t,tac,tbc->tab", vol, grads, grads)
    mass = np.full((len(vol), 4, 4), 1.0 / 20.0)
    mass += np.eye(4) / 20.0
    mass *= vol[:, None, None]
    return stiff, mass


def gradient_incidence(space: EdgeSpace):
    """Sparse map from interior nodal values to edge circulations.

    Column p holds the edge dofs of the gradient of the p-th interior
    hat function: the circulation of a gradient along edge (a, b) is
    the endpoint difference, so G[e, .] = +1 at b and -1 at a.  The
    range of G spans the discrete gradient subspace of the edge space.
    """
    mesh = space.mesh
    free = ~mesh.boundary_vertex_mask
    vertex_dof = np.full(mesh.num_vertices, -1, dtype=np.int64)
    vertex_dof[free] = np.arange(int(free.sum()))
    ends = mesh.edges[space.free_edges]
    rows = np.arange(space.num_dofs)
    rc = []
    for col_sign, side in ((1.0, 1), (-1.0, 0)):
        node = vertex_dof[ends[:, side]]
        keep = node >= 0
        rc.append((rows[keep], node[keep], np.full(int(keep.sum()), col_sign)))
    rows_all = np.concatenate([t[0] for t in rc])
    cols_all = np.concatenate([t[1] for t in rc])
    vals_all = np.concatenate([t[2] for t in rc])
    return sparse.csr_matrix(
        (vals_all, (rows_all, cols_all)),
        shape=(space.num_dofs, int(free.sum())),
    )


def edge_prolongation(coarse: EdgeSpace, fine: EdgeSpace):
    """Sparse interpolation from a coarse edge space into a nested fine one.

    Each fine edge dof is the tangential line integral of the coarse
    field along that edge; the coarse field is affine there, so the
    midpoint value dotted with the edge vector is exact.  Tangential
    trace continuity makes the value independent of which coarse tet
    contains the midpoint.  Exactness requires the fine mesh vertices
    to contain the coarse ones (same box, fine n a multiple of coarse n).
    """
    cmesh, fmesh = coarse.mesh, fine.mesh
    if np.any(cmesh.box_lo != fmesh.box_lo) or np.any(
        cmesh.box_hi != fmesh.box_hi
    ) or fmesh.n % cmesh.n != 0:
        raise ValueError("fine mesh does not nest inside the coarse mesh")
    ends = fmesh.vertices[fmesh.edges[fine.free_edges]]
    mids = 0.5 * (ends[:, 0] + ends[:, 1])
    tang = ends[:, 1] - ends[:, 0]
    tets, bary = locate_points(cmesh, mids)
    grads = coarse.grads[tets]
    a = LOCAL_EDGES[:, 0]
    b = LOCAL_EDGES[:, 1]
    basis = (
        bary[:, a, None] * grads[:, b] - bary[:, b, None] * grads[:, a]
    ) * coarse.signs[tets][:, :, None]
    vals = np.einsum("pec,pc->pe", basis, tang)
    cols = coarse.cell_dofs[tets]
    rows = np.broadcast_to(np.arange(fine.num_dofs)[:, None], cols.shape)
    keep = cols >= 0
    return sparse.csr_matrix(
        (vals[keep], (rows[keep], cols[keep])),
        shape=(fine.num_dofs, coarse.num_dofs),
    )
