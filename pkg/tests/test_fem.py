"""Element-kernel validation: patch tests with polynomial exactness,
periodic quotients, and manufactured-solution convergence."""

import numpy as np
import pytest
import scipy.sparse as sp

from tissueflow import _fem as fem
from tissueflow.errors import SolveError
from tissueflow.geometry import (
    CellTag,
    FacetTag,
    build_unit_cell,
    default_unit_cell_spec,
    mesh_unit_cell,
    structured_rectangle_mesh,
)


def grid_submesh(n, periodic=False):
    mesh = structured_rectangle_mesh(n, n, periodic=periodic)
    return mesh, fem.SubMesh(mesh, int(CellTag.MACRO))


# -- submesh structure -------------------------------------------------------


def test_submesh_edge_complex():
    mesh, sub = grid_submesh(4)
    assert sub.areas.min() > 0
    assert abs(sub.areas.sum() - 1.0) < 1e-14
    # interior edges have two cells, boundary edges one
    interior = (sub.edge_cells >= 0).all(axis=1)
    assert interior.sum() + len(sub.boundary_edges) == sub.ne
    # Euler characteristic of a disk-like domain: v - e + c = 1
    assert sub.nv - sub.ne + sub.nc == 1
    # reference normal points out of edge_cells[:, 0]
    for e in range(sub.ne):
        mid = sub.vertices[sub.edges[e]].mean(axis=0)
        c0 = sub.edge_cells[e, 0]
        if c0 >= 0:
            cen = sub.vertices[sub.cells[c0]].mean(axis=0)
            assert (mid - cen) @ sub.edge_normals[e] > 0


def test_submesh_boundary_outward_sign():
    mesh, sub = grid_submesh(3)
    for e, s in zip(sub.boundary_edges, sub.boundary_outward):
        c = sub.edge_cells[e].max()
        cen = sub.vertices[sub.cells[c]].mean(axis=0)
        mid = sub.vertices[sub.edges[e]].mean(axis=0)
        assert s * ((mid - cen) @ sub.edge_normals[e]) > 0


def test_submesh_rejects_empty_tag_set():
    mesh, _ = grid_submesh(2)
    with pytest.raises(SolveError):
        fem.SubMesh(mesh, int(CellTag.Z))


def test_local_edges_of_facets_signs():
    mesh, sub = grid_submesh(3)
    bnd = mesh.facets_by_tag(int(FacetTag.EXTERIOR))
    edges, signs = sub.local_edges_of_facets(bnd)
    normals = mesh.facet_normals()[bnd]
    agreed = np.einsum("ed,ed->e", normals, sub.edge_normals[edges])
    assert np.allclose(signs, np.sign(agreed))
    assert np.allclose(np.abs(agreed), 1.0, atol=1e-12)


# -- vector P2 ---------------------------------------------------------------


def test_p2_strain_annihilates_rigid_motions():
    mesh, sub = grid_submesh(3)
    grid = fem.P2Grid(sub)
    A = fem.p2_strain_stiffness(sub, grid, two_eta=2.0)
    x = grid.node_coords
    for mode in [
        np.stack([np.ones(len(x)), np.zeros(len(x))], axis=-1),
        np.stack([np.zeros(len(x)), np.ones(len(x))], axis=-1),
        np.stack([-x[:, 1], x[:, 0]], axis=-1),  # rotation
    ]:
        u = np.empty(2 * grid.n_scalar)
        u[0::2], u[1::2] = mode[:, 0], mode[:, 1]
        assert np.abs(A @ u).max() < 1e-12


def test_p2_strain_energy_of_linear_field():
    # u = (x, -y): S(u) = diag(1, -1), 2*eta*|S|^2 = 4*eta on the unit square
    mesh, sub = grid_submesh(4)
    grid = fem.P2Grid(sub)
    A = fem.p2_strain_stiffness(sub, grid, two_eta=2.0 * 0.7)
    u = fem.p2_interpolate(sub, grid, lambda p: np.stack([p[:, 0], -p[:, 1]], axis=-1))
    assert abs(u @ (A @ u) - 4.0 * 0.7) < 1e-12


def test_p2_divergence_rows_exact():
    mesh, sub = grid_submesh(3)
    grid = fem.P2Grid(sub)
    B = fem.p2_divergence_rows(sub, grid)
    u = fem.p2_interpolate(
        sub, grid, lambda p: np.stack([2.0 * p[:, 0] + p[:, 1], 3.0 * p[:, 1]], axis=-1)
    )
    assert np.allclose(B @ u, 5.0 * sub.areas, atol=1e-14)


def test_p2_load_and_integral():
    mesh, sub = grid_submesh(5)
    grid = fem.P2Grid(sub)
    F = fem.p2_load_constant(sub, grid, [1.0, 0.0])
    u = fem.p2_interpolate(
        sub, grid, lambda p: np.stack([p[:, 0] ** 2, p[:, 0] * p[:, 1]], axis=-1)
    )
    # int x^2 over the unit square
    assert abs(F @ u - 1.0 / 3.0) < 1e-14
    val = fem.p2_integral(sub, grid, u)
    assert abs(val[0] - 1.0 / 3.0) < 1e-14
    assert abs(val[1] - 0.25) < 1e-14


def test_p2_facet_simpson_exact_for_quadratic():
    mesh, sub = grid_submesh(4)
    grid = fem.P2Grid(sub)
    bnd = mesh.facets_by_tag(int(FacetTag.EXTERIOR))
    right = bnd[np.isclose(mesh.vertices[mesh.facet_vertices[bnd, 0], 0], 1.0)
                & np.isclose(mesh.vertices[mesh.facet_vertices[bnd, 1], 0], 1.0)]
    edges, _ = sub.local_edges_of_facets(right)
    C = fem.p2_facet_normal_rows(sub, grid, edges, mesh.facet_normals()[right])
    u = fem.p2_interpolate(
        sub, grid,
        lambda p: np.stack([p[:, 0] ** 2 + p[:, 1], p[:, 0] * p[:, 1]], axis=-1),
    )
    vals = C @ u
    for k, f in enumerate(right):
        ya, yb = sorted(mesh.vertices[mesh.facet_vertices[f], 1])
        exact = (yb - ya) + 0.5 * (yb**2 - ya**2)  # int (1 + y) dy, n = +e_x
        assert abs(vals[k] - exact) < 1e-14


# -- RT0 -----------------------------------------------------------------


def test_rt0_represents_constant_and_radial_fields():
    mesh, sub = grid_submesh(4)
    c = np.array([0.3, -1.2])
    u = fem.rt0_interpolate(sub, lambda p: np.broadcast_to(c, p.shape))
    vals = fem.rt0_cell_values(sub, u, np.array([[0.2, 0.5, 0.3]]))
    assert np.allclose(vals[:, 0, :], c, atol=1e-13)
    B = fem.rt0_divergence_rows(sub)
    assert np.abs(B @ u).max() < 1e-13
    # radial field b + s*x is in RT0: divergence 2s per unit area
    u2 = fem.rt0_interpolate(sub, lambda p: 0.5 + 2.0 * p)
    assert np.allclose(B @ u2, 4.0 * sub.areas, atol=1e-13)
    assert np.allclose(fem.rt0_integral(sub, u2), [0.5 + 1.0, 0.5 + 1.0], atol=1e-13)


def test_rt0_mass_energy():
    mesh, sub = grid_submesh(3)
    kinv = np.array([[2.0, 0.5], [0.5, 1.0]])
    M = fem.rt0_mass(sub, kinv)
    c = np.array([1.0, -2.0])
    u = fem.rt0_interpolate(sub, lambda p: np.broadcast_to(c, p.shape))
    assert abs(u @ (M @ u) - c @ kinv @ c) < 1e-12
    assert fem.symmetry_defect(M) < 1e-15


def test_rt0_load_constant_matches_mass():
    # int f . w = u^T M u when f = Kinv w and w constant
    mesh, sub = grid_submesh(3)
    c = np.array([0.7, 0.4])
    u = fem.rt0_interpolate(sub, lambda p: np.broadcast_to(c, p.shape))
    F = fem.rt0_load_constant(sub, c)
    assert abs(F @ u - c @ c) < 1e-13


# -- P1 ----------------------------------------------------------------------


def test_p1_stiffness_exact_for_linear():
    mesh, sub = grid_submesh(4)
    A = fem.p1_stiffness(sub, np.eye(2))
    u = sub.vertices @ np.array([2.0, -1.0])
    # grad u constant: energy = |grad|^2 * area
    assert abs(u @ (A @ u) - 5.0) < 1e-13
    v = sub.vertices[:, 0]
    G = fem.p1_cell_gradients(sub, v)
    assert np.allclose(G, [1.0, 0.0], atol=1e-14)
    assert abs(fem.p1_integral(sub, v) - 0.5) < 1e-14
    assert abs(fem.p1_lumped_mass(sub).sum() - 1.0) < 1e-14


def test_p1_gradient_load_is_stiffness_action():
    mesh, sub = grid_submesh(3)
    A = fem.p1_stiffness(sub, 1.0)
    u = np.sin(sub.vertices @ np.array([1.0, 2.0]))
    f = fem.p1_cell_gradients(sub, u)
    F = fem.p1_gradient_load(sub, f)
    assert np.allclose(F, A @ u, atol=1e-13)


# -- reduction ---------------------------------------------------------------


def test_reduction_signed_chain():
    red = fem.Reduction.build(
        5, identify=[(1, 0, 1), (2, 1, -1), (3, 2, -1)]
    )
    T = red.T.toarray()
    assert T.shape == (5, 2)
    cls = T[:4]
    k = np.flatnonzero(np.abs(cls).sum(axis=0))[0]
    assert np.allclose(cls[:, k], [1, 1, -1, 1])
    assert red.g @ red.g == 0


def test_reduction_fixed_through_identification():
    red = fem.Reduction.build(3, identify=[(1, 0, -1)], fixed=[(1, 2.0)])
    # u1 = -u0 and u1 = 2 -> u0 = -2
    x = red.expand(np.zeros(red.n_reduced))
    assert abs(x[0] + 2.0) < 1e-14 and abs(x[1] - 2.0) < 1e-14


def test_reduction_conflicts_raise():
    with pytest.raises(SolveError):
        fem.Reduction.build(2, identify=[(1, 0, 1), (1, 0, -1)])
    with pytest.raises(SolveError):
        fem.Reduction.build(
            2, identify=[(1, 0, 1)], rotations=[(0, 1, np.array([1.0, 0.0]))]
        )


def test_reduction_rotation_column():
    n = np.array([0.6, 0.8])
    red = fem.Reduction.build(4, rotations=[(0, 1, n)])
    q = np.zeros(red.n_reduced)
    q[-1] = 2.0  # rotation columns are appended after the free roots
    x = red.expand(q)
    assert np.allclose(x[:2], 2.0 * n)
    assert np.allclose(x[2:], 0.0)
    A = sp.identity(4, format="csr")
    Ar, br = red.reduce_system(A, np.zeros(4))
    assert abs(Ar[0, 0] - 1.0) < 1e-14  # n is unit: n^T I n = 1


# -- periodic quotients --------------------------------------------------------


def test_periodic_p1_poisson_convergence():
    errs = []
    for n in (8, 16, 32):
        mesh, sub = grid_submesh(n, periodic=True)
        red = fem.Reduction.build(
            sub.nv, identify=fem.p1_periodic_identifications(sub)
        )
        A = fem.p1_stiffness(sub, 1.0)
        m = fem.p1_lumped_mass(sub)
        x = sub.vertices
        ustar = np.sin(2 * np.pi * x[:, 0]) * np.cos(2 * np.pi * x[:, 1])
        F = m * (8.0 * np.pi**2) * ustar
        Ar, br = red.reduce_system(A, F)
        wr = red.T.T @ m
        S = sp.bmat([[Ar, wr[:, None]], [wr[None, :], None]], format="csc")
        sol = fem.solve_sparse(S, np.concatenate([br, [0.0]]), "poisson")
        u = red.expand(sol[:-1])
        u -= (m @ u) / m.sum()
        v = ustar - (m @ ustar) / m.sum()
        errs.append(np.sqrt(m @ (u - v) ** 2))
    order = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
    assert min(order) > 1.9


def test_periodic_rt0_darcy_constant_flow():
    k = 0.7
    mesh, sub = grid_submesh(6, periodic=True)
    ident = fem.rt0_periodic_identifications(sub)
    red = fem.Reduction.build(sub.ne, identify=ident)
    M = fem.rt0_mass(sub, 1.0 / k)
    B = -fem.rt0_divergence_rows(sub)  # b(w, q) = -int q div w
    F = fem.rt0_load_constant(sub, [1.0, 0.0])
    lay = fem.BlockLayout(u=red.n_reduced, p=sub.nc, g=1)
    Ar = red.T.T @ M @ red.T
    Br = B @ red.T
    S = fem.CooBuilder(lay.total, lay.total)
    S.add(*_coo(Ar, lay.offsets["u"], lay.offsets["u"]))
    S.add(*_coo(Br, lay.offsets["p"], lay.offsets["u"]))
    S.add(*_coo(Br.T, lay.offsets["u"], lay.offsets["p"]))
    areas = sub.areas
    S.add(np.full(sub.nc, lay.offsets["g"]), lay.idx("p", np.arange(sub.nc)), areas)
    S.add(lay.idx("p", np.arange(sub.nc)), np.full(sub.nc, lay.offsets["g"]), areas)
    rhs = np.zeros(lay.total)
    rhs[lay.sl("u")] = red.T.T @ F
    sol = fem.solve_sparse(S.tocsr(), rhs, "darcy")
    u = red.expand(sol[lay.sl("u")])
    vals = fem.rt0_cell_values(sub, u, np.array([[1, 1, 1]]) / 3.0)
    assert np.abs(vals[:, 0, 0] - k).max() < 1e-12
    assert np.abs(vals[:, 0, 1]).max() < 1e-12
    assert np.abs(sol[lay.sl("p")]).max() < 1e-12


def _coo(A, roff, coff):
    A = sp.coo_matrix(A)
    return A.row + roff, A.col + coff, A.data


def test_stokes_patch_quadratic_exact():
    mesh, sub = grid_submesh(4)
    grid = fem.P2Grid(sub)
    eta = 0.3

    def ustar(p):
        return np.stack([p[:, 1] ** 2, -p[:, 0] ** 2], axis=-1)

    uex = fem.p2_interpolate(sub, grid, ustar)
    bnd_nodes = np.flatnonzero(
        np.isclose(grid.node_coords[:, 0], 0.0)
        | np.isclose(grid.node_coords[:, 0], 1.0)
        | np.isclose(grid.node_coords[:, 1], 0.0)
        | np.isclose(grid.node_coords[:, 1], 1.0)
    )
    fixed = []
    for nd in bnd_nodes:
        fixed.append((2 * nd, uex[2 * nd]))
        fixed.append((2 * nd + 1, uex[2 * nd + 1]))
    red = fem.Reduction.build(2 * grid.n_scalar, fixed=fixed)
    A = fem.p2_strain_stiffness(sub, grid, 2.0 * eta)
    B = -fem.p2_divergence_rows(sub, grid)
    F = fem.p2_load_constant(sub, grid, [-2.0 * eta, 2.0 * eta])
    lay = fem.BlockLayout(u=red.n_reduced, p=sub.nc, g=1)
    S = fem.CooBuilder(lay.total, lay.total)
    S.add(*_coo(red.T.T @ A @ red.T, 0, 0))
    Br = B @ red.T
    S.add(*_coo(Br, lay.offsets["p"], 0))
    S.add(*_coo(Br.T, 0, lay.offsets["p"]))
    pr = lay.idx("p", np.arange(sub.nc))
    S.add(np.full(sub.nc, lay.offsets["g"]), pr, sub.areas)
    S.add(pr, np.full(sub.nc, lay.offsets["g"]), sub.areas)
    rhs = np.zeros(lay.total)
    rhs[lay.sl("u")] = red.T.T @ (F - A @ red.g)
    rhs[lay.sl("p")] = -(B @ red.g)
    sol = fem.solve_sparse(S.tocsr(), rhs, "stokes patch")
    u = red.expand(sol[lay.sl("u")])
    assert np.abs(u - uex).max() < 1e-10
    assert np.abs(sol[lay.sl("p")]).max() < 1e-9


def test_inf_sup_of_periodic_darcy():
    mesh, sub = grid_submesh(8, periodic=True)
    red = fem.Reduction.build(
        sub.ne, identify=fem.rt0_periodic_identifications(sub)
    )
    M = fem.rt0_mass(sub, 1.0)
    B = fem.rt0_divergence_rows(sub) @ red.T
    Mr = red.T.T @ M @ red.T
    sigma = fem.inf_sup_constant(
        B, sub.areas, np.asarray(Mr.diagonal()).ravel(), kernel_dim=1
    )
    assert sigma > 1e-6


def test_quotient_on_unit_cell_mesh():
    # RT0 constant field survives the periodic quotient on a curved cell mesh
    geom = build_unit_cell(default_unit_cell_spec())
    mesh = mesh_unit_cell(geom, 0.16)
    sub = fem.SubMesh(mesh, [int(CellTag.AW), int(CellTag.AS)])
    ident = fem.rt0_periodic_identifications(sub)
    assert ident
    u = fem.rt0_interpolate(sub, lambda p: np.broadcast_to([1.0, 0.5], p.shape))
    for i, j, s in ident:
        assert abs(u[i] - s * u[j]) < 1e-12 * max(1.0, abs(u[i]))
