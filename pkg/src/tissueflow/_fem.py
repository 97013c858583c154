"""Finite element kernels shared by the cell, macro, and reference solvers.

Four discrete spaces cover every variational problem in the package:
continuous vector P2 (viscous velocities), lowest-order Raviart-Thomas
(Darcy fluxes), elementwise constants (pressures), and nodal P1
(scalar correctors and macroscopic concentrations). Everything is
assembled per tagged subdomain of a SimplicialMesh; coupling happens
through sparse constraint reduction (periodic identification, fixed
fluxes, tangential pins) plus explicit mortar rows built by the caller.

Raviart-Thomas degrees of freedom are edge fluxes with respect to a
reference normal fixed by the local vertex ordering, so orientation
bookkeeping lives here and nowhere else.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolveError

# barycentric midedge quadrature: exact for polynomials of degree 2
_QBARY = np.array(
    [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]], dtype=np.float64
)
_QW = np.full(3, 1.0 / 3.0)


# ---------------------------------------------------------------------------
# submesh extraction


class SubMesh:
    """Cells of a SimplicialMesh carrying one of `tags`, renumbered locally.

    Exposes the edge complex used by the element kernels:

    - `edges` are local vertex pairs sorted ascending; the reference edge
      normal is the tangent (lo -> hi) rotated by -90 degrees.
    - `edge_cells[:, 0]` is the cell the reference normal points out of
      (-1 when absent); `edge_cells[:, 1]` the one it points into.
    - `cell_edges[c, k]` is the edge opposite local vertex k and
      `cell_edge_sign[c, k]` is +1 when the reference normal is outward
      for that cell.
    """

    def __init__(self, mesh, tags):
        tags = {int(t) for t in (tags if np.iterable(tags) else [tags])}
        mask = np.isin(mesh.cell_tags, list(tags))
        self.mesh = mesh
        self.tags = frozenset(tags)
        self.cell_ids = np.flatnonzero(mask)
        if len(self.cell_ids) == 0:
            raise SolveError(f"subdomain with tags {sorted(tags)} has no cells")
        gcells = mesh.cells[self.cell_ids].astype(np.int64)

        vids = np.unique(gcells)
        vmap = np.full(len(mesh.vertices), -1, dtype=np.int64)
        vmap[vids] = np.arange(len(vids))
        self.vertex_ids = vids
        self.vertices = mesh.vertices[vids]
        self.cells = vmap[gcells]
        self._vmap = vmap

        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        flip = area2 < 0
        if flip.any():
            self.cells[flip] = self.cells[flip][:, [0, 2, 1]]
            p = self.vertices[self.cells]
            d1 = p[:, 1] - p[:, 0]
            d2 = p[:, 2] - p[:, 0]
            area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.areas = 0.5 * area2

        # edge complex; cell_edges[c, k] opposite local vertex k
        raw = self.cells[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        fwd = raw[:, 0] < raw[:, 1]
        srt = np.where(fwd[:, None], raw, raw[:, ::-1])
        self.edges, inv = np.unique(srt, axis=0, return_inverse=True)
        self.cell_edges = inv.reshape(-1, 3)
        self.cell_edge_sign = np.where(fwd, 1, -1).reshape(-1, 3).astype(np.int64)

        ne = len(self.edges)
        self.edge_cells = np.full((ne, 2), -1, dtype=np.int64)
        for k in range(3):
            e = self.cell_edges[:, k]
            s = self.cell_edge_sign[:, k]
            self.edge_cells[e[s > 0], 0] = np.flatnonzero(s > 0)
            self.edge_cells[e[s < 0], 1] = np.flatnonzero(s < 0)

        t = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_lengths = np.hypot(t[:, 0], t[:, 1])
        self.edge_normals = (
            np.stack([t[:, 1], -t[:, 0]], axis=-1) / self.edge_lengths[:, None]
        )
        self.boundary_edges = np.flatnonzero((self.edge_cells < 0).any(axis=1))
        # +1 when the reference normal is outward on a boundary edge
        self.boundary_outward = np.where(
            self.edge_cells[self.boundary_edges, 0] >= 0, 1, -1
        ).astype(np.int64)

        # barycentric gradients, constant per cell: grad lam_k
        self.grad_lam = np.empty((len(self.cells), 3, 2))
        inv2a = 1.0 / (2.0 * self.areas)
        for k in range(3):
            q = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
            self.grad_lam[:, k, 0] = -q[:, 1] * inv2a
            self.grad_lam[:, k, 1] = q[:, 0] * inv2a

        self._edge_lookup = None

    @property
    def nv(self):
        return len(self.vertices)

    @property
    def nc(self):
        return len(self.cells)

    @property
    def ne(self):
        return len(self.edges)

    def quad_points(self, bary=_QBARY):
        """Physical coordinates of barycentric points, shape (nc, nq, 2)."""
        p = self.vertices[self.cells]
        return np.einsum("qk,ckd->cqd", bary, p)

    def local_edges_of_facets(self, facet_ids):
        """Map parent facet indices to (local edge, sign).

        `sign` is +1 when the parent facet normal (left cell into right
        cell) agrees with the local reference normal.
        """
        if self._edge_lookup is None:
            key = self.vertex_ids[self.edges]
            self._edge_lookup = {
                (int(a), int(b)): k for k, (a, b) in enumerate(key)
            }
        fv = self.mesh.facet_vertices[facet_ids]
        nrm = self.mesh.facet_normals()[facet_ids]
        out_e = np.empty(len(facet_ids), dtype=np.int64)
        out_s = np.empty(len(facet_ids), dtype=np.int64)
        for k, (a, b) in enumerate(fv):
            a, b = int(a), int(b)
            e = self._edge_lookup.get((a, b) if a < b else (b, a))
            if e is None:
                raise SolveError("facet is not an edge of this subdomain")
            out_e[k] = e
            out_s[k] = 1 if float(nrm[k] @ self.edge_normals[e]) > 0.0 else -1
        return out_e, out_s


# ---------------------------------------------------------------------------
# sparse accumulation


class CooBuilder:
    def __init__(self, nrows, ncols):
        self.shape = (int(nrows), int(ncols))
        self._r, self._c, self._v = [], [], []

    def add(self, rows, cols, vals):
        r = np.asarray(rows, dtype=np.int64).ravel()
        c = np.asarray(cols, dtype=np.int64).ravel()
        v = np.asarray(vals, dtype=np.float64).ravel()
        if not (len(r) == len(c) == len(v)):
            raise SolveError("COO triplet arrays disagree in length")
        self._r.append(r)
        self._c.append(c)
        self._v.append(v)

    def add_block(self, rows, cols, block):
        """Outer-product scatter: block[i, j] at (rows[i], cols[j])."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        rr = np.repeat(rows, len(cols))
        cc = np.tile(cols, len(rows))
        self.add(rr, cc, np.asarray(block, dtype=np.float64))

    def tocsr(self):
        if self._r:
            r = np.concatenate(self._r)
            c = np.concatenate(self._c)
            v = np.concatenate(self._v)
        else:
            r = c = v = np.zeros(0)
        return sp.coo_matrix((v, (r, c)), shape=self.shape).tocsr()


class BlockLayout:
    """Named contiguous index blocks inside one flat DOF vector."""

    def __init__(self, **sizes):
        self.names = list(sizes)
        self.sizes = {k: int(v) for k, v in sizes.items()}
        off = 0
        self.offsets = {}
        for k in self.names:
            self.offsets[k] = off
            off += self.sizes[k]
        self.total = off

    def sl(self, name):
        o = self.offsets[name]
        return slice(o, o + self.sizes[name])

    def idx(self, name, local):
        return self.offsets[name] + np.asarray(local, dtype=np.int64)


# ---------------------------------------------------------------------------
# vector P2


class P2Grid:
    """Scalar P2 node tables on a submesh: vertices then edge midpoints.

    Vector DOF convention throughout: dof = 2 * node + component.
    """

    def __init__(self, sub: SubMesh):
        self.sub = sub
        self.n_scalar = sub.nv + sub.ne
        self.cell_nodes = np.concatenate(
            [sub.cells, sub.nv + sub.cell_edges], axis=1
        )
        self.node_coords = np.concatenate(
            [
                sub.vertices,
                0.5
                * (sub.vertices[sub.edges[:, 0]] + sub.vertices[sub.edges[:, 1]]),
            ],
            axis=0,
        )

    def facet_nodes(self, local_edges):
        """Scalar nodes (end, end, midpoint) of the given local edges."""
        e = np.asarray(local_edges, dtype=np.int64)
        return np.stack(
            [self.sub.edges[e, 0], self.sub.edges[e, 1], self.sub.nv + e], axis=-1
        )


def _p2_shape_gradients(sub: SubMesh, bary=_QBARY):
    """Gradients of the six P2 shape functions, shape (nc, nq, 6, 2)."""
    gl = sub.grad_lam  # (nc, 3, 2)
    nq = len(bary)
    G = np.empty((sub.nc, nq, 6, 2))
    for q in range(nq):
        lam = bary[q]
        for i in range(3):
            G[:, q, i, :] = (4.0 * lam[i] - 1.0) * gl[:, i, :]
            j, k = (i + 1) % 3, (i + 2) % 3
            G[:, q, 3 + i, :] = 4.0 * (lam[j] * gl[:, k, :] + lam[k] * gl[:, j, :])
    return G


def _p2_shape_values(bary=_QBARY):
    nq = len(bary)
    N = np.empty((nq, 6))
    for q in range(nq):
        lam = bary[q]
        for i in range(3):
            N[q, i] = lam[i] * (2.0 * lam[i] - 1.0)
            N[q, 3 + i] = 4.0 * lam[(i + 1) % 3] * lam[(i + 2) % 3]
    return N


def p2_strain_stiffness(sub: SubMesh, grid: P2Grid, two_eta: float):
    """2*eta * int S(u):S(v) over the subdomain, on vector P2 DOFs."""
    G = _p2_shape_gradients(sub)
    w = sub.areas[:, None] * _QW[None, :]  # (nc, nq)
    eta = 0.5 * float(two_eta)
    # entry ((a,i),(b,j)) = eta * sum_q w_q [ (i==j) Ga.Gb + Ga_j Gb_i ]
    dots = np.einsum("cq,cqad,cqbd->cab", w, G, G)
    loc = np.zeros((sub.nc, 12, 12))
    for i in range(2):
        for j in range(2):
            blk = eta * np.einsum("cq,cqa,cqb->cab", w, G[..., j], G[..., i])
            if i == j:
                blk = blk + eta * dots
            loc[:, i::2, j::2] = blk
    nodes = grid.cell_nodes
    dofs = np.empty((sub.nc, 12), dtype=np.int64)
    dofs[:, 0::2] = 2 * nodes
    dofs[:, 1::2] = 2 * nodes + 1
    A = CooBuilder(2 * grid.n_scalar, 2 * grid.n_scalar)
    rr = np.repeat(dofs, 12, axis=1).ravel()
    cc = np.tile(dofs, (1, 12)).ravel()
    A.add(rr, cc, loc)
    return A.tocsr()


def p2_divergence_rows(sub: SubMesh, grid: P2Grid):
    """Rows int_T div(phi) per cell, columns vector P2 DOFs (csr nc x 2N)."""
    G = _p2_shape_gradients(sub)
    w = sub.areas[:, None] * _QW[None, :]
    ints = np.einsum("cq,cqad->cad", w, G)  # (nc, 6, 2)
    nodes = grid.cell_nodes
    B = CooBuilder(sub.nc, 2 * grid.n_scalar)
    rows = np.repeat(np.arange(sub.nc), 6)
    for comp in range(2):
        B.add(rows, (2 * nodes + comp).ravel(), ints[:, :, comp])
    return B.tocsr()


def p2_load_constant(sub: SubMesh, grid: P2Grid, vec):
    """int f . phi for constant f: only midside nodes carry mass (|T|/3)."""
    vec = np.asarray(vec, dtype=np.float64)
    F = np.zeros(2 * grid.n_scalar)
    wm = sub.areas / 3.0
    for k in range(3):
        mid = sub.nv + sub.cell_edges[:, k]
        for comp in range(2):
            np.add.at(F, 2 * mid + comp, wm * vec[comp])
    return F


def p2_facet_normal_rows(sub: SubMesh, grid: P2Grid, local_edges, normals):
    """Simpson rows int_f (phi . n) per facet, exact for the P2 trace."""
    e = np.asarray(local_edges, dtype=np.int64)
    n = np.asarray(normals, dtype=np.float64).reshape(len(e), 2)
    L = sub.edge_lengths[e]
    nodes = grid.facet_nodes(e)  # (nf, 3): end, end, mid
    wts = np.array([1.0, 1.0, 4.0]) / 6.0
    C = CooBuilder(len(e), 2 * grid.n_scalar)
    rows = np.arange(len(e))
    for k in range(3):
        for comp in range(2):
            C.add(rows, 2 * nodes[:, k] + comp, L * wts[k] * n[:, comp])
    return C.tocsr()


def p2_integral(sub: SubMesh, grid: P2Grid, dofs):
    """int w dy of a vector P2 field (midside weights |T|/3)."""
    u = np.asarray(dofs, dtype=np.float64)
    out = np.zeros(2)
    wm = sub.areas / 3.0
    for k in range(3):
        mid = sub.nv + sub.cell_edges[:, k]
        for comp in range(2):
            out[comp] += float(wm @ u[2 * mid + comp])
    return out


def p2_values(sub: SubMesh, grid: P2Grid, dofs, bary=_QBARY):
    """Vector field values at barycentric points, shape (nc, nq, 2)."""
    u = np.asarray(dofs, dtype=np.float64)
    N = _p2_shape_values(bary)  # (nq, 6)
    nodal = np.stack(
        [u[2 * grid.cell_nodes], u[2 * grid.cell_nodes + 1]], axis=-1
    )  # (nc, 6, 2)
    return np.einsum("qa,cad->cqd", N, nodal)


def p2_interpolate(sub: SubMesh, grid: P2Grid, func):
    """Nodal interpolant of a callable func(points (n,2)) -> (n,2)."""
    vals = np.asarray(func(grid.node_coords), dtype=np.float64)
    out = np.empty(2 * grid.n_scalar)
    out[0::2] = vals[:, 0]
    out[1::2] = vals[:, 1]
    return out


# ---------------------------------------------------------------------------
# lowest-order Raviart-Thomas

# basis on cell c for edge e opposite local vertex k:
#   phi_e(x) = sign(c, e) (x - x_k) / (2 |T|),  int_e phi_e . n_ref = 1


def rt0_mass(sub: SubMesh, kinv):
    """int Kinv phi_e . phi_f with constant SPD Kinv (scalar or 2x2)."""
    kinv = np.asarray(kinv, dtype=np.float64)
    if kinv.ndim == 0:
        kinv = kinv * np.eye(2)
    pts = sub.quad_points()  # (nc, 3, 2)
    opp = sub.vertices[sub.cells]  # (nc, 3, 2): vertex k opposite edge k
    inv2a = 1.0 / (2.0 * sub.areas)
    # values (nc, nq, 3, 2)
    V = (pts[:, :, None, :] - opp[:, None, :, :]) * inv2a[:, None, None, None]
    V = V * sub.cell_edge_sign[:, None, :, None]
    w = sub.areas[:, None] * _QW[None, :]
    KV = np.einsum("de,cqae->cqad", kinv, V)
    loc = np.einsum("cq,cqad,cqbd->cab", w, V, KV)
    M = CooBuilder(sub.ne, sub.ne)
    rr = np.repeat(sub.cell_edges, 3, axis=1).ravel()
    cc = np.tile(sub.cell_edges, (1, 3)).ravel()
    M.add(rr, cc, loc)
    return M.tocsr()


def rt0_divergence_rows(sub: SubMesh):
    """Rows int_T div(phi) per cell = orientation sign (csr nc x ne)."""
    B = CooBuilder(sub.nc, sub.ne)
    rows = np.repeat(np.arange(sub.nc), 3)
    B.add(rows, sub.cell_edges.ravel(), sub.cell_edge_sign.astype(np.float64))
    return B.tocsr()


def rt0_load_constant(sub: SubMesh, vec):
    """int f . phi_e for constant f: sign * f . (centroid - opposite) / 2."""
    vec = np.asarray(vec, dtype=np.float64)
    cen = sub.quad_points(np.array([[1, 1, 1]]) / 3.0)[:, 0, :]
    opp = sub.vertices[sub.cells]
    contrib = 0.5 * sub.cell_edge_sign * np.einsum(
        "ckd,d->ck", cen[:, None, :] - opp, vec
    )
    F = np.zeros(sub.ne)
    np.add.at(F, sub.cell_edges.ravel(), contrib.ravel())
    return F


def rt0_cell_values(sub: SubMesh, dofs, bary=_QBARY):
    """Field values at barycentric points, shape (nc, nq, 2)."""
    u = np.asarray(dofs, dtype=np.float64)
    pts = sub.quad_points(bary)
    opp = sub.vertices[sub.cells]
    inv2a = 1.0 / (2.0 * sub.areas)
    coef = (u[sub.cell_edges] * sub.cell_edge_sign) * inv2a[:, None]  # (nc, 3)
    diff = pts[:, :, None, :] - opp[:, None, :, :]  # (nc, nq, 3, 2)
    return np.einsum("ck,cqkd->cqd", coef, diff)


def rt0_integral(sub: SubMesh, dofs):
    """int w dy over the subdomain."""
    u = np.asarray(dofs, dtype=np.float64)
    cen = sub.quad_points(np.array([[1, 1, 1]]) / 3.0)[:, 0, :]
    opp = sub.vertices[sub.cells]
    coef = 0.5 * u[sub.cell_edges] * sub.cell_edge_sign  # (nc, 3)
    return np.einsum("ck,ckd->d", coef, cen[:, None, :] - opp)


def rt0_interpolate(sub: SubMesh, func):
    """Edge-flux interpolant of a smooth field, by Simpson on each edge."""
    a = sub.vertices[sub.edges[:, 0]]
    b = sub.vertices[sub.edges[:, 1]]
    vals = sum(
        w * np.einsum("ed,ed->e", np.asarray(func(a + t * (b - a)), dtype=np.float64), sub.edge_normals)
        for t, w in ((0.0, 1 / 6), (0.5, 4 / 6), (1.0, 1 / 6))
    )
    return vals * sub.edge_lengths


# ---------------------------------------------------------------------------
# P1 scalars


def cellwise_tensor(sub: SubMesh, D):
    """Broadcast a diffusion coefficient to one 2x2 tensor per cell.

    Accepts a scalar, a 2x2 tensor, per-cell scalars (nc,), per-cell
    tensors (nc,2,2), or a callable evaluated at cell centroids that
    returns one of the per-cell forms.
    """
    if callable(D):
        cen = sub.quad_points(np.array([[1, 1, 1]]) / 3.0)[:, 0, :]
        D = D(cen)
    D = np.asarray(D, dtype=np.float64)
    if D.ndim == 0:
        return np.broadcast_to(float(D) * np.eye(2), (sub.nc, 2, 2))
    if D.shape == (2, 2):
        return np.broadcast_to(D, (sub.nc, 2, 2))
    if D.shape == (sub.nc,):
        return D[:, None, None] * np.eye(2)[None]
    if D.shape == (sub.nc, 2, 2):
        return D
    raise SolveError(f"cannot broadcast coefficient of shape {D.shape}")


def p1_stiffness(sub: SubMesh, D):
    """int (D grad u) . grad v; D scalar, 2x2, per-cell (nc,), or (nc,2,2)."""
    D = cellwise_tensor(sub, D)
    gl = sub.grad_lam
    loc = np.einsum("c,cad,cde,cbe->cab", sub.areas, gl, D, gl)
    A = CooBuilder(sub.nv, sub.nv)
    rr = np.repeat(sub.cells, 3, axis=1).ravel()
    cc = np.tile(sub.cells, (1, 3)).ravel()
    A.add(rr, cc, loc)
    return A.tocsr()


def p1_gradient_load(sub: SubMesh, cell_field):
    """int f . grad v with piecewise-constant f given per cell (nc, 2)."""
    f = np.asarray(cell_field, dtype=np.float64).reshape(sub.nc, 2)
    contrib = sub.areas[:, None] * np.einsum("cad,cd->ca", sub.grad_lam, f)
    F = np.zeros(sub.nv)
    np.add.at(F, sub.cells.ravel(), contrib.ravel())
    return F


def p1_lumped_mass(sub: SubMesh):
    m = np.zeros(sub.nv)
    np.add.at(m, sub.cells.ravel(), np.repeat(sub.areas / 3.0, 3))
    return m


def p1_cell_gradients(sub: SubMesh, u):
    u = np.asarray(u, dtype=np.float64)
    return np.einsum("cad,ca->cd", sub.grad_lam, u[sub.cells])


def p1_integral(sub: SubMesh, u):
    u = np.asarray(u, dtype=np.float64)
    return float((sub.areas / 3.0) @ u[sub.cells].sum(axis=1))


def p1_values(sub: SubMesh, u, bary=_QBARY):
    u = np.asarray(u, dtype=np.float64)
    return np.einsum("qk,ck->cq", bary, u[sub.cells])


# ---------------------------------------------------------------------------
# constraint reduction


class Reduction:
    """Affine reduction full = T @ reduced + g.

    Built from three constraint kinds that never overlap in this package:
    signed identifications u_i = s * u_j (periodic quotients), fixed values
    (strong flux data, sealed channel walls), and node rotations
    (u_x, u_y) = q * nhat (tangential velocity pinned on interfaces).
    """

    def __init__(self, T, g):
        self.T = T.tocsr()
        self.g = g

    @property
    def n_full(self):
        return self.T.shape[0]

    @property
    def n_reduced(self):
        return self.T.shape[1]

    @staticmethod
    def build(ndof, identify=(), fixed=(), rotations=()):
        parent = np.arange(ndof, dtype=np.int64)
        sign = np.ones(ndof, dtype=np.int64)

        def find(i):
            s = 1
            while parent[i] != i:
                s *= sign[i]
                i = parent[i]
            return i, s

        for i, j, s in identify:
            i, j, s = int(i), int(j), int(s)
            ri, si = find(i)
            rj, sj = find(j)
            if ri == rj:
                if si != s * sj:
                    raise SolveError("inconsistent signed identification")
                continue
            # u_i = s u_j: root ri absorbs rj
            parent[rj] = ri
            sign[rj] = si * s * sj

        root = np.empty(ndof, dtype=np.int64)
        rsign = np.empty(ndof, dtype=np.int64)
        for i in range(ndof):
            root[i], rsign[i] = find(i)

        fixed_val = {}
        for d, v in fixed:
            r, s = int(root[d]), int(rsign[d])
            v = float(v) * s  # u_d = rsign * u_root
            if r in fixed_val and abs(fixed_val[r] - v) > 1e-12 * max(1.0, abs(v)):
                raise SolveError("conflicting fixed values after identification")
            fixed_val[r] = v

        rot_members = {}
        for dx, dy, n in rotations:
            dx, dy = int(dx), int(dy)
            for d in (dx, dy):
                if root[d] != d or d in fixed_val:
                    raise SolveError("rotated DOF is otherwise constrained")
            rot_members[dx] = (0, dx, dy, n)
            rot_members[dy] = (1, dx, dy, n)

        col = {}
        nred = 0
        for r in np.unique(root):
            r = int(r)
            if r in fixed_val or r in rot_members:
                continue
            col[r] = nred
            nred += 1
        rot_col = {}
        for dx, dy, n in rotations:
            rot_col[int(dx)] = nred
            nred += 1

        g = np.zeros(ndof)
        rows, cols, vals = [], [], []
        for i in range(ndof):
            r, s = int(root[i]), int(rsign[i])
            if r in fixed_val:
                g[i] = s * fixed_val[r]
            elif r in rot_members:
                comp, dx, dy, n = rot_members[r]
                rows.append(i)
                cols.append(rot_col[dx])
                vals.append(s * float(n[comp]))
            else:
                rows.append(i)
                cols.append(col[r])
                vals.append(float(s))
        T = sp.coo_matrix((vals, (rows, cols)), shape=(ndof, nred))
        return Reduction(T, g)

    @staticmethod
    def identity(ndof):
        return Reduction(sp.identity(ndof, format="csr"), np.zeros(ndof))

    def reduce_system(self, A, b):
        A = A.tocsr()
        Ared = (self.T.T @ A @ self.T).tocsc()
        bred = self.T.T @ (np.asarray(b, dtype=np.float64) - A @ self.g)
        return Ared, bred

    def expand(self, xred):
        return self.T @ np.asarray(xred, dtype=np.float64) + self.g


def p1_periodic_identifications(sub: SubMesh):
    """Signed identifications gluing periodic partner vertices of the parent.

    Pairs are kept when both endpoints lie in the submesh; a pair with
    exactly one endpoint present means the subdomain was truncated
    inconsistently with the periodic tiling.
    """
    vmap = sub._vmap
    out = []
    for i, j, _axis in sub.mesh.periodic_vertex_pairs:
        li, lj = int(vmap[i]), int(vmap[j])
        if li < 0 and lj < 0:
            continue
        if li < 0 or lj < 0:
            raise SolveError("periodic vertex pair straddles the subdomain")
        out.append((lj, li, 1))
    return out


def rt0_periodic_identifications(sub: SubMesh):
    """Signed RT0 flux identifications across the periodic quotient.

    Outward flux on the high wall equals inward flux on the low wall, so
    in reference-normal DOFs: dof_hi = -s_hi * s_lo * dof_lo.
    """
    mesh = sub.mesh
    keep = []
    for lo, hi, _axis in mesh.periodic_facet_pairs:
        tags = mesh.cell_tags[mesh.facet_cells[[lo, hi], 0]]
        inside = [int(t) in sub.tags for t in tags]
        if all(inside):
            keep.append((int(lo), int(hi)))
        elif any(inside):
            raise SolveError("periodic facet pair straddles the subdomain")
    if not keep:
        return []
    keep = np.asarray(keep, dtype=np.int64)
    e_lo, s_lo = sub.local_edges_of_facets(keep[:, 0])
    e_hi, s_hi = sub.local_edges_of_facets(keep[:, 1])
    return [
        (int(eh), int(el), int(-sh * sl))
        for eh, el, sh, sl in zip(e_hi, e_lo, s_hi, s_lo)
    ]


def solve_sparse(A, b, label="linear system", rtol=1e-7):
    """Direct sparse solve with a residual guard."""
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    try:
        lu = spla.splu(A)
        x = lu.solve(b)
    except (RuntimeError, ValueError) as exc:
        raise SolveError(f"{label}: factorization failed ({exc})") from exc
    if not np.isfinite(x).all():
        raise SolveError(f"{label}: non-finite solution entries")
    scale = max(float(np.linalg.norm(b)), 1e-300)
    res = float(np.linalg.norm(A @ x - b)) / scale
    if res > rtol:
        raise SolveError(f"{label}: residual {res:.3e} exceeds {rtol:.1e}")
    return x


def symmetry_defect(A):
    A = A.tocsr()
    d = A - A.T
    nrm = spla.norm(A)
    return float(spla.norm(d) / nrm) if nrm > 0 else 0.0


def inf_sup_constant(B, row_weights, col_weights, kernel_dim=1, max_dense=6_000_000):
    """Smallest nontrivial singular value of the scaled constraint block.

    B maps velocity DOFs (columns) to constraint rows; weights are the
    diagonal scalings (typically lumped masses). `kernel_dim` known zero
    singular values (the pressure gauge mode) are discarded.
    """
    B = sp.csr_matrix(B)
    if B.shape[0] * B.shape[1] > max_dense:
        raise SolveError("constraint block too large for a dense SVD check")
    rw = 1.0 / np.sqrt(np.asarray(row_weights, dtype=np.float64))
    cw = 1.0 / np.sqrt(np.asarray(col_weights, dtype=np.float64))
    S = sp.diags(rw) @ B @ sp.diags(cw)
    svals = np.linalg.svd(S.toarray(), compute_uv=False)
    svals = np.sort(svals)
    return float(svals[kernel_dim]) if kernel_dim < len(svals) else float(svals[0])
