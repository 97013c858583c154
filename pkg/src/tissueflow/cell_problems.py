"""Unit-cell solvers on the tagged periodic mesh.

Four problem families live here: the coupled Stokes-Darcy permeability
problems (one per coordinate direction), the osmotic forcing problem,
and the scalar diffusion and convection correctors per transport side.

Flow discretization: continuous vector P2 / elementwise-constant
pressure in the symplast, lowest-order facet fluxes / constants in the
wall and channel regions. The channel region carries two flux fields
at once: the apoplast continuation and the plasmodesmata flux. A
facetwise multiplier on the membrane enforces normal-mass continuity
(w_z.n = w_a.n, plus the plasmodesmata share at channel mouths), the
tangential viscous velocity is pinned, the membrane resistance enters
as a Robin term on the apoplast flux, and a single scalar multiplier
gauges the joint pressure mean to zero.

Interface data convention, used by every solver in the package: the
``kappa`` argument is the membrane RESISTANCE (normal-stress jump per
unit normal flux) and ``delta`` is the osmotic jump data, per
interface class (the symplast|wall membrane and the channel mouths).
`interface_data` derives both from membrane coefficients; no other
code path performs that conversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import _fem as fem
from .errors import (
    CompatibilityError,
    GeometryError,
    ParameterError,
    SolveError,
)
from .geometry import CellTag, FacetTag
from .membrane_kinetics import MembraneCoefficients, velocity_cutoff

_SIDES = ("a", "s")

# vertex rows then midedge rows; gives every edge its Simpson stencil
_QFLUX = np.vstack([np.eye(3), fem._QBARY])


def side_tags(side):
    """Cell tags making up the transport region Y_l of a side."""
    if side == "a":
        return (int(CellTag.AW), int(CellTag.AS))
    if side == "s":
        return (int(CellTag.Z), int(CellTag.AS))
    raise ParameterError(f"unknown transport side {side!r}")


def interface_data(membrane_z: MembraneCoefficients, membrane_as: MembraneCoefficients):
    """Resistance/osmotic-jump data pairs (Gamma_z value, Gamma_as value).

    The membrane law reads v.n = delta*[c] - kappa*(stress + [p]); the
    cell problems need it solved for the stress jump, which divides
    everything by the water conductance.
    """
    kappa = (1.0 / membrane_z.kappa, 1.0 / membrane_as.kappa)
    delta = (membrane_z.delta / membrane_z.kappa, membrane_as.delta / membrane_as.kappa)
    return kappa, delta


def _spd_tensor(value, name):
    t = np.asarray(value, dtype=np.float64)
    if t.ndim == 0:
        t = float(t) * np.eye(2)
    if t.shape != (2, 2):
        raise ParameterError(f"{name} must be a scalar or a 2x2 tensor")
    if abs(t[0, 1] - t[1, 0]) > 1e-12 * max(1.0, float(np.abs(t).max())):
        raise ParameterError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(0.5 * (t + t.T))
    if ev.min() <= 0:
        raise ParameterError(f"{name} must be positive definite (eigenvalues {ev})")
    return 0.5 * (t + t.T)


def _pair(value, name, positive):
    arr = np.asarray(value, dtype=np.float64).ravel()
    if arr.size == 1:
        arr = np.repeat(arr, 2)
    if arr.size != 2:
        raise ParameterError(f"{name} must be a scalar or a (Gamma_z, Gamma_as) pair")
    if positive and (arr <= 0).any():
        raise ParameterError(f"{name} must be positive")
    return arr


# ---------------------------------------------------------------------------
# flow discretization


@dataclass
class MixedDiscretization:
    """Assembled spaces and couplings for the flow cell problems.

    The inf-sup health of the pairing is checked numerically by
    `inf_sup_constant`, the smallest nontrivial singular value of the
    scaled constraint block (divergence rows plus interface mortars).
    """

    mesh: object
    sub_z: Optional[fem.SubMesh]
    grid_z: Optional[fem.P2Grid]
    sub_a: fem.SubMesh
    sub_sp: Optional[fem.SubMesh]
    facets: np.ndarray          # interface facets, Gamma_z then Gamma_as
    n_gamma_z: int
    normals: np.ndarray
    lengths: np.ndarray
    edge_a: np.ndarray          # interface DOF of the apoplast flux
    sign_a: np.ndarray
    edge_sp: np.ndarray         # channel-mouth DOF of the plasmodesmata flux
    sign_sp: np.ndarray
    edge_z: Optional[np.ndarray]
    rotations: list = field(repr=False, default_factory=list)
    sealed_sp: np.ndarray = None  # Gamma_aw edges of the channel flux

    @property
    def has_stokes(self):
        return self.sub_z is not None

    @property
    def has_channels(self):
        return self.sub_sp is not None

    @staticmethod
    def build(mesh):
        tags = set(np.unique(mesh.cell_tags).tolist())
        has_z = int(CellTag.Z) in tags
        has_as = int(CellTag.AS) in tags
        if not has_z and has_as:
            raise GeometryError("channel cells present without a symplast region")
        darcy_tags = [int(CellTag.AW)] + ([int(CellTag.AS)] if has_as else [])
        sub_a = fem.SubMesh(mesh, darcy_tags)

        if not has_z:
            return MixedDiscretization(
                mesh=mesh, sub_z=None, grid_z=None, sub_a=sub_a, sub_sp=None,
                facets=np.zeros(0, dtype=np.int64), n_gamma_z=0,
                normals=np.zeros((0, 2)), lengths=np.zeros(0),
                edge_a=np.zeros(0, dtype=np.int64), sign_a=np.zeros(0, dtype=np.int64),
                edge_sp=np.zeros(0, dtype=np.int64), sign_sp=np.zeros(0, dtype=np.int64),
                edge_z=None, rotations=[], sealed_sp=np.zeros(0, dtype=np.int64),
            )

        sub_z = fem.SubMesh(mesh, int(CellTag.Z))
        grid_z = fem.P2Grid(sub_z)
        f_z = mesh.facets_by_tag(int(FacetTag.GAMMA_Z))
        f_as = mesh.facets_by_tag(int(FacetTag.GAMMA_AS))
        facets = np.concatenate([f_z, f_as])
        normals = mesh.facet_normals()[facets]
        lengths = mesh.facet_lengths()[facets]
        edge_a, sign_a = sub_a.local_edges_of_facets(facets)
        edge_z, _ = sub_z.local_edges_of_facets(facets)

        sub_sp = fem.SubMesh(mesh, int(CellTag.AS)) if has_as else None
        if sub_sp is not None and len(f_as):
            edge_sp, sign_sp = sub_sp.local_edges_of_facets(f_as)
            sealed, _ = sub_sp.local_edges_of_facets(
                mesh.facets_by_tag(int(FacetTag.GAMMA_AW))
            )
        else:
            edge_sp = np.zeros(0, dtype=np.int64)
            sign_sp = np.zeros(0, dtype=np.int64)
            sealed = np.zeros(0, dtype=np.int64)

        # tangential pin: averaged normal per interface P2 node
        acc = {}
        for k, e in enumerate(edge_z):
            n, L = normals[k], lengths[k]
            for node, w in (
                (int(sub_z.edges[e, 0]), 0.5 * L),
                (int(sub_z.edges[e, 1]), 0.5 * L),
                (sub_z.nv + int(e), L),
            ):
                acc[node] = acc.get(node, np.zeros(2)) + w * n
        rotations = []
        for node, v in sorted(acc.items()):
            nh = v / np.linalg.norm(v)
            rotations.append((node, nh))

        return MixedDiscretization(
            mesh=mesh, sub_z=sub_z, grid_z=grid_z, sub_a=sub_a, sub_sp=sub_sp,
            facets=facets, n_gamma_z=len(f_z), normals=normals, lengths=lengths,
            edge_a=edge_a, sign_a=sign_a, edge_sp=edge_sp, sign_sp=sign_sp,
            edge_z=edge_z, rotations=rotations, sealed_sp=sealed,
        )

    def facet_class_values(self, pair):
        """Per-interface-facet values from a (Gamma_z, Gamma_as) pair."""
        vals = np.empty(len(self.facets))
        vals[: self.n_gamma_z] = pair[0]
        vals[self.n_gamma_z:] = pair[1]
        return vals


# ---------------------------------------------------------------------------
# the coupled flow engine


@dataclass
class CellFlowSolution:
    """One flow cell solution: unit-forcing index 1..d or 'osmotic'."""

    index: object
    disc: MixedDiscretization
    w_z: Optional[np.ndarray]
    w_a: np.ndarray
    w_sp: Optional[np.ndarray]
    pi_z: Optional[np.ndarray]
    pi_a: np.ndarray
    pi_sp: Optional[np.ndarray]
    lam: Optional[np.ndarray]
    residual: float
    energy: dict

    def integral(self):
        """int w dy summed over all carried fields (|Y| = 1)."""
        out = fem.rt0_integral(self.disc.sub_a, self.w_a)
        if self.w_z is not None:
            out = out + fem.p2_integral(self.disc.sub_z, self.disc.grid_z, self.w_z)
        if self.w_sp is not None:
            out = out + fem.rt0_integral(self.disc.sub_sp, self.w_sp)
        return out

    def interface_flux(self, which):
        """Net membrane flux: 'a' tests the Darcy trace, 'z' the viscous one."""
        d = self.disc
        if which == "a":
            return float(np.sum(self.sign_flux_a()))
        rows = fem.p2_facet_normal_rows(d.sub_z, d.grid_z, d.edge_z, d.normals)
        return float(np.sum(rows @ self.w_z))

    def sign_flux_a(self):
        return self.disc.sign_a * self.w_a[self.disc.edge_a]

    def divergence_report(self):
        """Elementwise divergence (P0 moments) per field, relative L2."""
        out = {}
        d = self.disc
        pairs = [("a", d.sub_a, self.w_a, "rt0")]
        if self.w_z is not None:
            pairs.append(("z", d.sub_z, self.w_z, "p2"))
        if self.w_sp is not None:
            pairs.append(("sp", d.sub_sp, self.w_sp, "rt0"))
        for name, sub, dofs, kind in pairs:
            if kind == "rt0":
                div = (fem.rt0_divergence_rows(sub) @ dofs) / sub.areas
                vals = fem.rt0_cell_values(sub, dofs)
            else:
                div = (fem.p2_divergence_rows(sub, self.disc.grid_z) @ dofs) / sub.areas
                vals = fem.p2_values(sub, self.disc.grid_z, dofs)
            w = sub.areas[:, None] / 3.0
            norm = np.sqrt(float(np.sum(w * (vals**2).sum(axis=-1))))
            divl2 = np.sqrt(float(sub.areas @ div**2))
            out[name] = (divl2, max(norm, 1e-300))
        return out

    def velocity_quadrature(self, side, global_cells, bary=None):
        """Velocity of side 'a'/'s' at barycentric points of given cells.

        The symplast side uses the viscous field on Z cells and the
        plasmodesmata flux in channels. The osmotic solution carries no
        separate channel field (channel water is merged into the apoplast
        continuum there), so its channel velocity is the apoplast field;
        anything else would lose the mouth flux and leave the convection
        corrector data incompatible.
        """
        bary = fem._QBARY if bary is None else bary
        global_cells = np.asarray(global_cells, dtype=np.int64)
        d = self.disc
        out = np.zeros((len(global_cells), len(bary), 2))
        tags = d.mesh.cell_tags[global_cells]

        def fill(sub, vals_all, member_tags):
            ok = np.isin(tags, member_tags)
            if not ok.any():
                return
            pos = np.searchsorted(sub.cell_ids, global_cells[ok])
            sel = np.minimum(pos, len(sub.cell_ids) - 1)
            if not (sub.cell_ids[sel] == global_cells[ok]).all():
                raise SolveError("cells are not part of the field's subdomain")
            out[ok] = vals_all[sel]

        if side == "a":
            fill(d.sub_a, fem.rt0_cell_values(d.sub_a, self.w_a, bary),
                 [int(CellTag.AW), int(CellTag.AS)])
        elif side == "s":
            if self.w_z is not None:
                fill(d.sub_z, fem.p2_values(d.sub_z, d.grid_z, self.w_z, bary),
                     [int(CellTag.Z)])
            if self.w_sp is not None:
                fill(d.sub_sp, fem.rt0_cell_values(d.sub_sp, self.w_sp, bary),
                     [int(CellTag.AS)])
            elif d.sub_sp is not None:
                fill(d.sub_a, fem.rt0_cell_values(d.sub_a, self.w_a, bary),
                     [int(CellTag.AS)])
        else:
            raise ParameterError(f"unknown transport side {side!r}")
        return out


def _assemble_flow_system(
    disc,
    eta,
    K_a,
    K_sp,
    kappa_facets,
    *,
    include_sp,
    volume_force=None,
    delta_facets=None,
    fixed_flux_a=(),
    fixed_flux_sp=(),
    periodic=True,
):
    """Build the saddle system for one flow problem.

    Returns (layout, reduction, S_full, rhs_full). `kappa_facets` and
    `delta_facets` are per-interface-facet resistance / osmotic data;
    fixed fluxes are (local edge, outward flux) pairs used by the
    reference solver in place of periodicity.
    """
    has_z = disc.has_stokes
    use_sp = include_sp and disc.has_channels and has_z
    sub_a = disc.sub_a

    lay = fem.BlockLayout(
        uz=2 * disc.grid_z.n_scalar if has_z else 0,
        ua=sub_a.ne,
        usp=disc.sub_sp.ne if use_sp else 0,
        pz=disc.sub_z.nc if has_z else 0,
        pa=sub_a.nc,
        psp=disc.sub_sp.nc if use_sp else 0,
        lam=len(disc.facets) if has_z else 0,
        g=1,
    )
    S = fem.CooBuilder(lay.total, lay.total)
    rhs = np.zeros(lay.total)

    def put(block, roff, coff, transpose_too=False):
        co = sp.coo_matrix(block)
        S.add(co.row + roff, co.col + coff, co.data)
        if transpose_too:
            S.add(co.col + coff, co.row + roff, co.data)

    o = lay.offsets

    Ma = fem.rt0_mass(sub_a, np.linalg.inv(_spd_tensor(K_a, "K_a")))
    put(Ma, o["ua"], o["ua"])
    Ba = -fem.rt0_divergence_rows(sub_a)
    put(Ba, o["pa"], o["ua"], transpose_too=True)
    if volume_force is not None:
        rhs[lay.sl("ua")] += fem.rt0_load_constant(sub_a, volume_force)

    gauge_rows = [(o["pa"], sub_a.areas)]

    if has_z:
        sub_z, grid_z = disc.sub_z, disc.grid_z
        Az = fem.p2_strain_stiffness(sub_z, grid_z, 2.0 * float(eta))
        put(Az, o["uz"], o["uz"])
        Bz = -fem.p2_divergence_rows(sub_z, grid_z)
        put(Bz, o["pz"], o["uz"], transpose_too=True)
        gauge_rows.append((o["pz"], sub_z.areas))
        if volume_force is not None:
            rhs[lay.sl("uz")] += fem.p2_load_constant(sub_z, grid_z, volume_force)

        # membrane resistance on the apoplast flux trace
        S.add(
            o["ua"] + disc.edge_a,
            o["ua"] + disc.edge_a,
            np.asarray(kappa_facets) / disc.lengths,
        )
        # mortar rows: w_z.n - w_a.n (- w_sp.n at channel mouths) = 0
        Cz = fem.p2_facet_normal_rows(sub_z, grid_z, disc.edge_z, disc.normals)
        put(Cz, o["lam"], o["uz"], transpose_too=True)
        rows = o["lam"] + np.arange(len(disc.facets))
        S.add(rows, o["ua"] + disc.edge_a, -disc.sign_a.astype(float))
        S.add(o["ua"] + disc.edge_a, rows, -disc.sign_a.astype(float))
        if delta_facets is not None:
            rhs[o["ua"] + disc.edge_a] -= np.asarray(delta_facets) * disc.sign_a

    if use_sp:
        sub_sp = disc.sub_sp
        Msp = fem.rt0_mass(sub_sp, np.linalg.inv(_spd_tensor(K_sp, "K_sp")))
        put(Msp, o["usp"], o["usp"])
        Bsp = -fem.rt0_divergence_rows(sub_sp)
        put(Bsp, o["psp"], o["usp"], transpose_too=True)
        gauge_rows.append((o["psp"], sub_sp.areas))
        if volume_force is not None:
            rhs[lay.sl("usp")] += fem.rt0_load_constant(sub_sp, volume_force)
        mouth_rows = o["lam"] + disc.n_gamma_z + np.arange(len(disc.edge_sp))
        S.add(mouth_rows, o["usp"] + disc.edge_sp, -disc.sign_sp.astype(float))
        S.add(o["usp"] + disc.edge_sp, mouth_rows, -disc.sign_sp.astype(float))

    for roff, areas in gauge_rows:
        cols = roff + np.arange(len(areas))
        S.add(np.full(len(areas), o["g"]), cols, areas)
        S.add(cols, np.full(len(areas), o["g"]), areas)

    # constraints
    identify = []
    fixed = []
    rotations = []
    if periodic:
        for i, j, s in fem.rt0_periodic_identifications(sub_a):
            identify.append((o["ua"] + i, o["ua"] + j, s))
        if use_sp:
            for i, j, s in fem.rt0_periodic_identifications(disc.sub_sp):
                identify.append((o["usp"] + i, o["usp"] + j, s))
    for e, val in fixed_flux_a:
        fixed.append((o["ua"] + int(e), float(val)))
    if use_sp:
        for e in disc.sealed_sp:
            fixed.append((o["usp"] + int(e), 0.0))
        for e, val in fixed_flux_sp:
            fixed.append((o["usp"] + int(e), float(val)))
    if has_z:
        for node, nh in disc.rotations:
            rotations.append((o["uz"] + 2 * node, o["uz"] + 2 * node + 1, nh))

    red = fem.Reduction.build(
        lay.total, identify=identify, fixed=fixed, rotations=rotations
    )
    return lay, red, S.tocsr(), rhs


def _solve_flow(disc, lay, red, S, rhs, label):
    Sr, br = red.reduce_system(S, rhs)
    xr = fem.solve_sparse(Sr, br, label)
    # residual in the constrained (reduced) space; raw rows of pinned or
    # identified DOFs carry the constraint forces and never vanish
    res = float(np.linalg.norm(Sr @ xr - br))
    scale = max(float(np.linalg.norm(br)), 1e-300)
    return red.expand(xr), res / scale


def _flow_solution(index, disc, lay, x, residual, energy):
    has_z = disc.has_stokes
    use_sp = lay.sizes["usp"] > 0
    return CellFlowSolution(
        index=index,
        disc=disc,
        w_z=x[lay.sl("uz")].copy() if has_z else None,
        w_a=x[lay.sl("ua")].copy(),
        w_sp=x[lay.sl("usp")].copy() if use_sp else None,
        pi_z=x[lay.sl("pz")].copy() if has_z else None,
        pi_a=x[lay.sl("pa")].copy(),
        pi_sp=x[lay.sl("psp")].copy() if use_sp else None,
        lam=x[lay.sl("lam")].copy() if has_z else None,
        residual=residual,
        energy=energy,
    )


def _flow_energy(disc, lay, x, rhs, eta, K_a, K_sp, kappa_facets, use_sp):
    """Bilinear energy pieces of a flow solution (for the identity check)."""
    out = {}
    ua = x[lay.sl("ua")]
    Ma = fem.rt0_mass(disc.sub_a, np.linalg.inv(_spd_tensor(K_a, "K_a")))
    out["darcy_a"] = float(ua @ (Ma @ ua))
    if disc.has_stokes:
        uz = x[lay.sl("uz")]
        Az = fem.p2_strain_stiffness(disc.sub_z, disc.grid_z, 2.0 * float(eta))
        out["viscous"] = float(uz @ (Az @ uz))
        tr = disc.sign_a * ua[disc.edge_a]
        out["membrane"] = float(np.sum(np.asarray(kappa_facets) * tr**2 / disc.lengths))
    if use_sp:
        usp = x[lay.sl("usp")]
        Msp = fem.rt0_mass(disc.sub_sp, np.linalg.inv(_spd_tensor(K_sp, "K_sp")))
        out["darcy_sp"] = float(usp @ (Msp @ usp))
    out["forcing"] = float(rhs @ x)
    out["total"] = sum(v for k, v in out.items() if k != "forcing")
    return out


def solve_permeability_cell(mesh, i, eta, K_a, K_sp, kappa):
    """Unit-forcing flow cell problem for direction i in {1, ..., d}.

    `kappa` is the interface resistance per class (scalar or pair).
    """
    if i not in (1, 2):
        raise ParameterError("direction index must be 1 or 2")
    if not float(eta) > 0:
        raise ParameterError("viscosity must be positive")
    kpair = _pair(kappa, "kappa", positive=True)
    disc = MixedDiscretization.build(mesh)
    kfac = disc.facet_class_values(kpair)
    ei = np.eye(2)[i - 1]
    lay, red, S, rhs = _assemble_flow_system(
        disc, eta, K_a, K_sp, kfac, include_sp=True, volume_force=ei
    )
    x, res = _solve_flow(disc, lay, red, S, rhs, f"permeability cell i={i}")
    energy = _flow_energy(
        disc, lay, x, rhs, eta, K_a, K_sp, kfac, lay.sizes["usp"] > 0
    )
    return _flow_solution(i, disc, lay, x, res, energy)


def solve_osmotic_cell(mesh, eta, K_a, kappa, delta):
    """Interface-forced flow cell problem (unit osmotic driving).

    No plasmodesmata field: channel mouths carry only the membrane
    crossing, and the mass constraint is r_z.n = r_a.n throughout.
    """
    if not float(eta) > 0:
        raise ParameterError("viscosity must be positive")
    kpair = _pair(kappa, "kappa", positive=True)
    dpair = _pair(delta, "delta", positive=False)
    disc = MixedDiscretization.build(mesh)
    kfac = disc.facet_class_values(kpair)
    dfac = disc.facet_class_values(dpair)
    lay, red, S, rhs = _assemble_flow_system(
        disc, eta, K_a, None, kfac, include_sp=False, delta_facets=dfac
    )
    x, res = _solve_flow(disc, lay, red, S, rhs, "osmotic cell")
    energy = _flow_energy(disc, lay, x, rhs, eta, K_a, None, kfac, False)
    return _flow_solution("osmotic", disc, lay, x, res, energy)


def flow_inf_sup_constant(mesh, eta=1.0, K_a=1.0, K_sp=1.0, kappa=1.0):
    """Smallest nontrivial singular value of the scaled constraint block.

    Dense SVD; intended for the coarse reference meshes in the test
    suite, not for production solves.
    """
    disc = MixedDiscretization.build(mesh)
    kfac = disc.facet_class_values(_pair(kappa, "kappa", True))
    lay, red, S, _rhs = _assemble_flow_system(
        disc, eta, K_a, K_sp, kfac, include_sp=True
    )
    nvel = lay.sizes["uz"] + lay.sizes["ua"] + lay.sizes["usp"]
    ncon = lay.sizes["pz"] + lay.sizes["pa"] + lay.sizes["psp"] + lay.sizes["lam"]
    S = S.tocsr()
    # restrict the reduction map to velocity rows; drop dead columns
    Tv = red.T[:nvel].tocsc()
    keep = np.flatnonzero(np.diff(Tv.indptr) > 0)
    Tv = Tv[:, keep]
    B = (S[nvel : nvel + ncon, :nvel] @ Tv).tocsr()
    Avv = Tv.T @ S[:nvel, :nvel] @ Tv
    col_w = np.maximum(np.asarray(Avv.diagonal()).ravel(), 1e-300)
    row_w = []
    for name, sub in (("pz", disc.sub_z), ("pa", disc.sub_a), ("psp", disc.sub_sp)):
        if lay.sizes[name]:
            row_w.append(sub.areas)
    if lay.sizes["lam"]:
        row_w.append(disc.lengths)
    return fem.inf_sup_constant(B, np.concatenate(row_w), col_w, kernel_dim=1)


# ---------------------------------------------------------------------------
# scalar cell problems


@dataclass
class ScalarCellSolution:
    """Mean-zero periodic corrector on one transport side."""

    side: str
    index: object
    values: np.ndarray
    sub: fem.SubMesh
    residual: float
    defect: float = 0.0

    def cell_gradients(self):
        return fem.p1_cell_gradients(self.sub, self.values)


def _transport_submesh(mesh, side):
    tags = [t for t in side_tags(side) if (mesh.cell_tags == t).any()]
    if side == "a" and (mesh.cell_tags == int(CellTag.MACRO)).any():
        tags = tags + [int(CellTag.MACRO)]
    if not tags:
        raise GeometryError(f"transport region Y_{side} has no cells")
    sub = fem.SubMesh(mesh, tags)
    adj = sp.coo_matrix(
        (
            np.ones(3 * sub.nc),
            (sub.cell_edges.ravel(), np.repeat(np.arange(sub.nc), 3)),
        ),
        shape=(sub.ne, sub.nc),
    )
    ncomp, _ = connected_components((adj.T @ adj) > 0, directed=False)
    if ncomp != 1:
        raise GeometryError(f"transport region Y_{side} is disconnected")
    return sub


def _solve_scalar(sub, D_cells, br, red, label):
    """Periodic mean-zero solve of the reduced P1 system with RHS `br`."""
    A = fem.p1_stiffness(sub, D_cells)
    Ar = (red.T.T @ A @ red.T).tocsr()
    mr = red.T.T @ fem.p1_lumped_mass(sub)
    S = sp.bmat([[Ar, mr[:, None]], [mr[None, :], None]], format="csc")
    sol = fem.solve_sparse(S, np.concatenate([br, [0.0]]), label)
    ur = sol[:-1]
    res = float(np.linalg.norm(Ar @ ur + sol[-1] * mr - br))
    scale = max(float(np.linalg.norm(br)), 1e-300)
    return red.expand(ur), res / scale


def solve_diffusion_cell(mesh, side, i, D):
    """Periodic mean-zero corrector for unit direction i on side 'a'/'s'."""
    if i not in (1, 2):
        raise ParameterError("direction index must be 1 or 2")
    sub = _transport_submesh(mesh, side)
    Dc = fem.cellwise_tensor(sub, D)
    rhs = fem.p1_gradient_load(sub, -Dc[:, :, i - 1])
    red = fem.Reduction.build(sub.nv, identify=fem.p1_periodic_identifications(sub))
    u, res = _solve_scalar(
        sub, Dc, red.T.T @ rhs, red, f"diffusion cell {side}, i={i}"
    )
    return ScalarCellSolution(side=side, index=i, values=u, sub=sub, residual=res)


def _data_flux_defect(sub, H):
    """Net outward flux of quadrature data H over the region rim.

    Vertex-plus-midedge samples (nc, 6, 2) give each rim edge its
    Simpson flux, exact for edgewise-quadratic traces; a conservative
    field then leaves pure roundoff (interior contributions absent,
    periodic wall pairs cancelling, membrane crossings summing to the
    zero net through-flux). Midedge-only samples (nc, 3, 2) fall back
    to the midpoint rule, exact through edgewise-linear data only, so
    curved fields surface their quadrature error here.
    """
    be = sub.boundary_edges
    if len(be) == 0:
        return 0.0
    c0 = sub.edge_cells[be, 0]
    cell = np.where(c0 >= 0, c0, sub.edge_cells[be, 1])
    k = np.argmax(sub.cell_edges[cell] == be[:, None], axis=1)
    if H.shape[1] == 6:
        # local edge k runs between vertices (k+1)%3 and (k+2)%3
        ends = H[cell, (k + 1) % 3] + H[cell, (k + 2) % 3]
        Hq = (ends + 4.0 * H[cell, 3 + (k + 1) % 3]) / 6.0
    else:
        Hq = H[cell, (k + 1) % 3]
    out = sub.boundary_outward * np.einsum("ed,ed->e", Hq, sub.edge_normals[be])
    return float(abs(np.sum(sub.edge_lengths[be] * out)))


def solve_convection_cell(mesh, side, v_field, D, cutoff, defect_tol=1e-3):
    """Corrector carrying the cutoff cell velocity on side 'a'/'s'.

    `v_field` gives the side's velocity at quadrature points of the
    transport submesh: a callable of point coordinates (sampled at
    vertices and edge midpoints), or an array of shape (nc, 2)
    (constant per cell), (nc, 3, 2) (midedge values) or (nc, 6, 2)
    (vertex rows then midedge rows). The net outward data flux over
    the region boundary is the compatibility defect of the
    flux-matching condition; it is reported on the solution and is an
    error above `defect_tol` times the field norm. Only the six-row
    form measures curved (non-edgewise-linear) data flux-exactly.
    """
    sub = _transport_submesh(mesh, side)
    Dc = fem.cellwise_tensor(sub, D)
    if callable(v_field):
        qp = sub.quad_points(_QFLUX)
        v = np.asarray(v_field(qp.reshape(-1, 2)), dtype=np.float64).reshape(
            sub.nc, 6, 2
        )
    else:
        v = np.asarray(v_field, dtype=np.float64)
        if v.shape == (sub.nc, 2):
            v = np.broadcast_to(v[:, None, :], (sub.nc, 3, 2))
        elif v.shape not in ((sub.nc, 3, 2), (sub.nc, 6, 2)):
            raise ParameterError(
                f"velocity field shape {v.shape} does not match the submesh"
            )
    H = velocity_cutoff(v, cutoff)
    defect = _data_flux_defect(sub, H)
    Hmid = H[:, -3:, :]
    norm = np.sqrt(float(np.sum(sub.areas[:, None] * (Hmid**2).sum(axis=-1) / 3.0)))
    if defect > defect_tol * max(norm, 1e-300):
        raise CompatibilityError(
            f"convection data flux defect {defect:.3e} exceeds {defect_tol:.1e} "
            f"of the field norm {norm:.3e}"
        )

    rhs = fem.p1_gradient_load(sub, Hmid.mean(axis=1))
    red = fem.Reduction.build(sub.nv, identify=fem.p1_periodic_identifications(sub))
    br = red.T.T @ rhs
    # gradient-form loads are compatible up to roundoff; sweep that out
    ones = np.ones(red.n_reduced)
    br = br - (ones @ br) / (ones @ ones) * ones
    u, res = _solve_scalar(sub, Dc, br, red, f"convection cell {side}")
    return ScalarCellSolution(
        side=side, index="convection", values=u, sub=sub, residual=res, defect=defect
    )
