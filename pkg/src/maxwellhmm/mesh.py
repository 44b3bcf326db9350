"""Structured tetrahedral meshes built by Kuhn subdivision.

Each axis-aligned grid cell is split into six tetrahedra sharing the
cell's main diagonal.  Translating the same split to every cell gives a
conforming mesh that is nested under n -> 2n refinement and makes point
location an O(1) grid lookup followed by at most six barycentric tests.
Two variants are provided: a box mesh with boundary entities flagged,
and a unit-cell mesh on [-1/2, 1/2)^3 whose opposite faces are glued so
that every entity of the torus appears exactly once.
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np

GEOM_TOL = 1e-10

LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
LOCAL_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])


class MeshError(ValueError):
    """Raised for invalid mesh construction parameters."""


class OutOfDomainError(MeshError):
    """Raised when a point lies outside the meshed domain."""


def _kuhn_templates():
    """Corner templates of the six Kuhn tets of the unit cell, positively oriented."""
    eye = np.eye(3, dtype=np.int64)
    temps = np.empty((6, 4, 3), dtype=np.int64)
    for p, perm in enumerate(permutations(range(3))):
        corners = np.zeros((4, 3), dtype=np.int64)
        corners[1] = eye[perm[0]]
        corners[2] = eye[perm[0]] + eye[perm[1]]
        corners[3] = 1
        parity = sum(
            1 for i in range(3) for j in range(i + 1, 3) if perm[i] > perm[j]
        )
        if parity % 2:
            corners[[2, 3]] = corners[[3, 2]]
        temps[p] = corners
    return temps


KUHN_TEMPLATES = _kuhn_templates()


def _grid_tets(n):
    """Full-grid vertex indices (each in 0..n) of all 6*n^3 tets, (nt, 4, 3)."""
    cells = np.stack(
        np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    idx = cells[:, None, None, :] + KUHN_TEMPLATES[None, :, :, :]
    return idx.reshape(-1, 4, 3)


def _linear_ids(idx, n):
    m = n + 1
    return (idx[..., 0] * m + idx[..., 1]) * m + idx[..., 2]


@dataclass
class MacroMesh:
    """Conforming Kuhn mesh of an axis-aligned box."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    n: int
    vertices: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    faces: np.ndarray
    tet_edges: np.ndarray
    tet_edge_signs: np.ndarray
    tet_faces: np.ndarray
    face_owner: np.ndarray
    face_neighbor: np.ndarray
    face_local: np.ndarray
    face_normals: np.ndarray
    face_areas: np.ndarray
    face_diameters: np.ndarray
    tet_volumes: np.ndarray
    tet_diameters: np.ndarray
    tet_barycenters: np.ndarray
    boundary_face_mask: np.ndarray
    boundary_edge_mask: np.ndarray
    boundary_vertex_mask: np.ndarray

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_tets(self):
        return len(self.tets)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def cell_sizes(self):
        return (self.box_hi - self.box_lo) / self.n

    @property
    def H(self):
        return float(self.tet_diameters.max())

    def tet_coords(self, tids=None):
        """Vertex coordinates of the given tets, shape (nt, 4, 3)."""
        t = self.tets if tids is None else self.tets[tids]
        return self.vertices[t]

    def barycentric_gradients(self):
        """Gradients of the four barycentric coordinates per tet, (nt, 4, 3).

        Only six tet shapes occur, so the gradients are computed per
        template and tiled.
        """
        grads6 = np.empty((6, 4, 3))
        h = self.cell_sizes
        for p in range(6):
            corners = KUHN_TEMPLATES[p] * h
            ginv = np.linalg.inv((corners[1:] - corners[0]).T)
            grads6[p, 1:] = ginv
            grads6[p, 0] = -ginv.sum(axis=0)
        return np.tile(grads6, (self.num_tets // 6, 1, 1))


@dataclass
class PeriodicMicroMesh(MacroMesh):
    """Kuhn mesh of the unit cell with opposite faces identified.

    Tets reference full-grid vertices for geometry; ``vertex_master``
    maps every grid vertex to its torus representative, and edge/face
    arrays list each torus entity exactly once.
    """

    vertex_master: np.ndarray = None
    num_masters: int = 0

    @property
    def master_coords(self):
        """Coordinates of the representative copy of each master vertex."""
        n = self.n
        ijk = np.stack(
            np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        return self.box_lo + ijk / n


def _tet_geometry(vertices, tets):
    coords = vertices[tets]
    e10 = coords[:, 1] - coords[:, 0]
    e20 = coords[:, 2] - coords[:, 0]
    e30 = coords[:, 3] - coords[:, 0]
    vol6 = np.einsum("ij,ij->i", e10, np.cross(e20, e30))
    if np.any(vol6 <= 0):
        raise MeshError("degenerate or inverted tet in construction")
    volumes = vol6 / 6.0
    barycenters = coords.mean(axis=1)
    dists = np.linalg.norm(
        coords[:, LOCAL_EDGES[:, 0]] - coords[:, LOCAL_EDGES[:, 1]], axis=2
    )
    return volumes, barycenters, dists.max(axis=1)


def _face_geometry(vertices, tets, face_owner, face_local):
    nf = len(face_owner)
    fverts = vertices[
        tets[face_owner][np.arange(nf)[:, None], LOCAL_FACES[face_local]]
    ]
    cr = np.cross(fverts[:, 1] - fverts[:, 0], fverts[:, 2] - fverts[:, 0])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    normals = cr / np.linalg.norm(cr, axis=1)[:, None]
    opp = vertices[tets[face_owner, face_local]]
    flip = np.einsum("ij,ij->i", normals, fverts[:, 0] - opp) < 0
    normals[flip] *= -1
    side = np.linalg.norm(fverts[:, [1, 2, 0]] - fverts[:, [0, 1, 2]], axis=2)
    return areas, normals, side.max(axis=1)


def _edge_topology(key_ids, big):
    """Identify edges from per-slot key ids (nt, 6, 2); orient lower -> higher key."""
    ek = key_ids.min(axis=2) * big + key_ids.max(axis=2)
    uniq, inv = np.unique(ek, return_inverse=True)
    tet_edges = inv.reshape(key_ids.shape[0], 6)
    edges = np.stack([uniq // big, uniq % big], axis=1)
    signs = np.where(key_ids[:, :, 0] < key_ids[:, :, 1], 1, -1).astype(np.int8)
    return edges, tet_edges, signs, uniq


def _face_topology(key_ids, big, require_paired):
    """Identify faces from per-slot key triples (nt, 4, 3); owner = lower tet id."""
    nt = key_ids.shape[0]
    trip = np.sort(key_ids, axis=2)
    fk = (trip[:, :, 0] * big + trip[:, :, 1]) * big + trip[:, :, 2]
    uniq, inv = np.unique(fk.ravel(), return_inverse=True)
    tet_faces = inv.reshape(nt, 4)
    nf = len(uniq)

    slot_tet = np.repeat(np.arange(nt), 4)
    slot_loc = np.tile(np.arange(4), nt)
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv, minlength=nf)
    if counts.max() > 2:
        raise MeshError("non-manifold face detected")
    if require_paired and not np.all(counts == 2):
        raise MeshError("periodic identification left unpaired faces")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    owner = slot_tet[order[starts]]
    local = slot_loc[order[starts]]
    neighbor = np.full(nf, -1, dtype=np.int64)
    two = counts == 2
    neighbor[two] = slot_tet[order[starts[two] + 1]]
    faces = np.stack(
        [uniq // (big * big), (uniq // big) % big, uniq % big], axis=1
    )
    return faces, tet_faces, owner, neighbor, local, uniq


def build_box_mesh(box_lo, box_hi, n):
    """Kuhn mesh of the box [lo, hi] with n subdivisions per axis."""
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    if box_lo.shape != (3,) or box_hi.shape != (3,):
        raise MeshError("box corners must be 3-vectors")
    if not np.all(box_hi > box_lo):
        raise MeshError("box must have positive extent in every axis")
    n = int(n)
    if n < 1:
        raise MeshError(f"need n >= 1 subdivisions, got {n}")

    m = n + 1
    grid = np.stack(
        np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    vertices = box_lo + grid * (box_hi - box_lo) / n
    tidx = _grid_tets(n)
    tets = _linear_ids(tidx, n)

    big = np.int64(m) ** 3
    edges, tet_edges, signs, uniq_e = _edge_topology(
        tets[:, LOCAL_EDGES].astype(np.int64), big
    )
    faces, tet_faces, owner, neighbor, local, _ = _face_topology(
        tets[:, LOCAL_FACES].astype(np.int64), big, require_paired=False
    )
    volumes, barycenters, diameters = _tet_geometry(vertices, tets)
    areas, normals, fdiam = _face_geometry(vertices, tets, owner, local)

    boundary_face_mask = neighbor < 0
    boundary_edge_mask = np.zeros(len(edges), dtype=bool)
    boundary_vertex_mask = np.zeros(len(vertices), dtype=bool)
    bfaces = faces[boundary_face_mask]
    for a, b in ((0, 1), (0, 2), (1, 2)):
        k = bfaces[:, a] * big + bfaces[:, b]
        boundary_edge_mask[np.searchsorted(uniq_e, k)] = True
    boundary_vertex_mask[bfaces.ravel()] = True

    return MacroMesh(
        box_lo=box_lo,
        box_hi=box_hi,
        n=n,
        vertices=vertices,
        tets=tets,
        edges=edges,
        faces=faces,
        tet_edges=tet_edges,
        tet_edge_signs=signs,
        tet_faces=tet_faces,
        face_owner=owner,
        face_neighbor=neighbor,
        face_local=local,
        face_normals=normals,
        face_areas=areas,
        face_diameters=fdiam,
        tet_volumes=volumes,
        tet_diameters=diameters,
        tet_barycenters=barycenters,
        boundary_face_mask=boundary_face_mask,
        boundary_edge_mask=boundary_edge_mask,
        boundary_vertex_mask=boundary_vertex_mask,
    )


def build_periodic_cube_mesh(n):
    """Kuhn mesh of the unit cell [-1/2, 1/2)^3 with periodic identification."""
    n = int(n)
    if n < 2:
        raise MeshError(f"periodic identification needs n >= 2, got {n}")

    m = n + 1
    lo = np.full(3, -0.5)
    hi = np.full(3, 0.5)
    grid = np.stack(
        np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    vertices = lo + grid / n
    tidx = _grid_tets(n)
    tets = _linear_ids(tidx, n)

    def canonical(idx):
        # shift any axis in which the entity lies entirely in the far
        # boundary plane back by one period; copies of a torus entity
        # then share identical key ids slot by slot
        mins = idx.min(axis=-2, keepdims=True)
        shift = np.where(mins == n, n, 0)
        return _linear_ids(idx - shift, n)

    big = np.int64(m) ** 3
    edges, tet_edges, signs, _ = _edge_topology(canonical(tidx[:, LOCAL_EDGES, :]), big)
    faces, tet_faces, owner, neighbor, local, _ = _face_topology(
        canonical(tidx[:, LOCAL_FACES, :]), big, require_paired=True
    )
    volumes, barycenters, diameters = _tet_geometry(vertices, tets)
    areas, normals, fdiam = _face_geometry(vertices, tets, owner, local)

    gm = grid % n
    vertex_master = (gm[:, 0] * n + gm[:, 1]) * n + gm[:, 2]

    return PeriodicMicroMesh(
        box_lo=lo,
        box_hi=hi,
        n=n,
        vertices=vertices,
        tets=tets,
        edges=edges,
        faces=faces,
        tet_edges=tet_edges,
        tet_edge_signs=signs,
        tet_faces=tet_faces,
        face_owner=owner,
        face_neighbor=neighbor,
        face_local=local,
        face_normals=normals,
        face_areas=areas,
        face_diameters=fdiam,
        tet_volumes=volumes,
        tet_diameters=diameters,
        tet_barycenters=barycenters,
        boundary_face_mask=np.zeros(len(faces), dtype=bool),
        boundary_edge_mask=np.zeros(len(edges), dtype=bool),
        boundary_vertex_mask=np.zeros(len(vertices), dtype=bool),
        vertex_master=vertex_master,
        num_masters=n ** 3,
    )


def wrap_to_cell(y):
    """Translate points into the unit cell [-1/2, 1/2)^3."""
    return ((np.asarray(y, dtype=float) + 0.5) % 1.0) - 0.5


def _template_inverses(mesh):
    h = mesh.cell_sizes
    invs = np.empty((6, 3, 3))
    for p in range(6):
        corners = KUHN_TEMPLATES[p] * h
        invs[p] = np.linalg.inv((corners[1:] - corners[0]).T)
    return invs


def locate_points(mesh, pts):
    """Find containing tets and barycentric coordinates for many points.

    Returns (tet_ids, bary) with bary of shape (npts, 4).  Points outside
    a box mesh raise OutOfDomainError; for periodic meshes points are
    wrapped into the unit cell first.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if isinstance(mesh, PeriodicMicroMesh):
        pts = wrap_to_cell(pts)
    else:
        tol = GEOM_TOL * np.linalg.norm(mesh.box_hi - mesh.box_lo)
        inside = np.all(pts >= mesh.box_lo - tol, axis=1) & np.all(
            pts <= mesh.box_hi + tol, axis=1
        )
        if not np.all(inside):
            bad = pts[~inside][0]
            raise OutOfDomainError(
                f"point {bad} outside box [{mesh.box_lo}, {mesh.box_hi}]"
            )
        pts = np.clip(pts, mesh.box_lo, mesh.box_hi)

    h = mesh.cell_sizes
    rel = (pts - mesh.box_lo) / h
    cell = np.clip(rel.astype(np.int64), 0, mesh.n - 1)
    local = pts - (mesh.box_lo + cell * h)
    invs = _template_inverses(mesh)
    sub = np.einsum("pij,nj->npi", invs, local)
    bary = np.empty((len(pts), 6, 4))
    bary[:, :, 1:] = sub
    bary[:, :, 0] = 1.0 - sub.sum(axis=2)
    best = bary.min(axis=2).argmax(axis=1)
    rows = np.arange(len(pts))
    b = np.clip(bary[rows, best], 0.0, None)
    b /= b.sum(axis=1)[:, None]
    cell_lin = (cell[:, 0] * mesh.n + cell[:, 1]) * mesh.n + cell[:, 2]
    return cell_lin * 6 + best, b


def locate_point(mesh, x):
    """Single-point version of locate_points."""
    tids, b = locate_points(mesh, np.asarray(x, dtype=float)[None, :])
    return int(tids[0]), b[0]
