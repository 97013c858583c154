"""Tissue-scale flow and transport on the homogenized domain.

The water balance is a mixed Darcy problem: cell-averaged velocity
v = -K grad p + M (c_s - c_a), div v = 0, with the effective tensors from
the unit-cell solves and prescribed normal velocities on the tissue
boundary. Solutes are carried per compartment by a vertex-centred scheme:
backward Euler for the diffusive part, explicit first-order upwinding on
the median-dual complex for the effective advection Hhat, and explicit
reaction plus membrane exchange. Transporter surface densities evolve
nodewise through the backward-Euler kinetics step, one field per side and
membrane segment class. A first-order sequential splitting ties the
pieces together; every sub-step failure aborts the loop with the step
index and a dumped snapshot.

Concentration fields live on mesh vertices, pressures on cells, and the
velocity on edges as normal fluxes. Negative concentrations beyond the
scheme guarantee (-1e-12) raise SchemeError and are never repaired.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import _fem as fem
from ._formats import write_table_csv, write_vtk_mesh
from .cell_problems import _spd_tensor
from .effective_tensors import effective_velocity_table
from .errors import (
    CompatibilityError,
    ParameterError,
    SchemeError,
    SolveError,
    StateError,
    StepError,
    TissueflowError,
)
from .geometry import CellTag, FacetTag
from .membrane_kinetics import (
    TransporterState,
    membrane_solute_exchange,
    step_transporters,
)

_CENTER = np.array([[1.0, 1.0, 1.0]]) / 3.0

# membrane segment classes, in the row order of the theta arrays
CLASS_WALL = 0  # symplast/wall interface
CLASS_MOUTH = 1  # channel mouths


def _macro_sub(mesh):
    """Single transport/flow complex over every cell of the macro mesh."""
    return fem.SubMesh(mesh, np.unique(mesh.cell_tags))


def _nodal_field(value, sub, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(sub.nv, float(arr))
    if arr.shape != (sub.nv,):
        raise StateError(
            f"{name} must be scalar or one value per mesh vertex "
            f"({sub.nv}), got shape {arr.shape}"
        )
    return arr


@dataclass(frozen=True)
class TissueMeasures:
    """Unit-cell areas and interface lengths entering the exchange terms.

    `area_a` is the apoplast fraction (wall plus channels), `area_s` the
    symplast fraction (protoplast plus channels); `gamma_z` and `gamma_as`
    are the lengths of the wall interface and the channel mouths.
    """

    area_a: float
    area_s: float
    gamma_z: float
    gamma_as: float

    def __post_init__(self):
        if self.area_a <= 0.0:
            raise ParameterError("apoplast area fraction must be positive")
        if min(self.area_s, self.gamma_z, self.gamma_as) < 0.0:
            raise ParameterError("cell measures must be non-negative")

    @classmethod
    def from_cell_mesh(cls, cell_mesh):
        areas = cell_mesh.cell_areas()
        tags = cell_mesh.cell_tags

        def region(*which):
            return float(areas[np.isin(tags, which)].sum())

        lengths = cell_mesh.facet_lengths()

        def interface(tag):
            return float(lengths[cell_mesh.facet_tags == int(tag)].sum())

        return cls(
            area_a=region(int(CellTag.AW), int(CellTag.AS)),
            area_s=region(int(CellTag.Z), int(CellTag.AS)),
            gamma_z=interface(FacetTag.GAMMA_Z),
            gamma_as=interface(FacetTag.GAMMA_AS),
        )


@dataclass
class MacroState:
    """Tissue fields at one instant.

    `p` is cellwise (area-mean zero), `v` holds edge normal fluxes, the
    concentrations are nodal, and each theta array has one row per
    membrane segment class (wall interface, channel mouths)."""

    t: float
    p: np.ndarray
    v: np.ndarray
    c_a: np.ndarray
    c_s: np.ndarray
    theta_f_a: np.ndarray
    theta_b_a: np.ndarray
    theta_f_s: np.ndarray
    theta_b_s: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "c_a", "c_s"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("theta_f_a", "theta_b_a", "theta_f_s", "theta_b_s"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != 2:
                raise StateError(
                    f"{name} needs shape (2, n_vertices), one row per "
                    f"membrane segment class; got {arr.shape}"
                )
            setattr(self, name, arr)

    @classmethod
    def uniform(cls, mesh, *, c_a=0.0, c_s=0.0, theta_f=0.0, theta_b=0.0, sub=None):
        sub = _macro_sub(mesh) if sub is None else sub
        th = lambda v: np.full((2, sub.nv), float(v))
        return cls(
            t=0.0,
            p=np.zeros(sub.nc),
            v=np.zeros(sub.ne),
            c_a=np.full(sub.nv, float(c_a)),
            c_s=np.full(sub.nv, float(c_s)),
            theta_f_a=th(theta_f),
            theta_b_a=th(theta_b),
            theta_f_s=th(theta_f),
            theta_b_s=th(theta_b),
        )

    def copy(self):
        return replace(
            self,
            p=self.p.copy(),
            v=self.v.copy(),
            c_a=self.c_a.copy(),
            c_s=self.c_s.copy(),
            theta_f_a=self.theta_f_a.copy(),
            theta_b_a=self.theta_b_a.copy(),
            theta_f_s=self.theta_f_s.copy(),
            theta_b_s=self.theta_b_s.copy(),
        )


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping controls for the coupled loop.

    `negativity` has a single admissible policy: violations raise, the
    fields are never clipped. `hhat_refresh_every = 0` keeps the effective
    advection tables fixed after their first evaluation."""

    dt: float
    t_end: float
    linear_rtol: float = 1e-9
    negativity: str = "error"
    output_every: int = 1
    hhat_lattice: int = 5
    hhat_refresh_every: int = 0

    def __post_init__(self):
        if self.dt <= 0.0 or self.t_end <= 0.0:
            raise ParameterError("dt and t_end must be positive")
        if self.linear_rtol <= 0.0:
            raise ParameterError("linear solver tolerance must be positive")
        if self.negativity != "error":
            raise ParameterError(
                f"negativity policy {self.negativity!r} is not provided; "
                "the scheme never clips concentrations"
            )
        if self.output_every < 0:
            raise ParameterError("output cadence must be >= 0")
        if self.hhat_lattice < 2:
            raise ParameterError("the Hhat lattice needs at least 2x2 points")
        if self.hhat_refresh_every < 0:
            raise ParameterError("hhat_refresh_every must be >= 0")

    @property
    def n_steps(self):
        # the horizon actually marched is n_steps * dt
        return max(1, int(round(self.t_end / self.dt)))


# ---------------------------------------------------------------------------
# Darcy flow


def _rt0_load_cellwise(sub, vecs):
    """int f . phi_e with f piecewise constant per cell, shape (nc, 2)."""
    cen = sub.quad_points(_CENTER)[:, 0, :]
    opp = sub.vertices[sub.cells]
    contrib = 0.5 * sub.cell_edge_sign * np.einsum(
        "ckd,cd->ck", cen[:, None, :] - opp, vecs
    )
    F = np.zeros(sub.ne)
    np.add.at(F, sub.cell_edges.ravel(), contrib.ravel())
    return F


def _boundary_facet_dofs(mesh, sub):
    """Exterior facets as (edge index, outward sign, length, segment id)."""
    ids = mesh.facets_by_tag(FacetTag.EXTERIOR)
    if len(ids) == 0:
        raise StateError("the macro mesh carries no exterior boundary facets")
    edges, signs = sub.local_edges_of_facets(ids)
    return edges, signs, mesh.facet_lengths()[ids], mesh.facet_segments[ids]


def solve_darcy(mesh, K, M_vec, c_s, c_a, v_D=(0.0, 0.0, 0.0, 0.0), *,
                mass_source=None, rtol=1e-9, sub=None):
    """Mixed solve of v = -K grad p + M (c_s - c_a), div v = source.

    `v_D` prescribes the outward normal velocity per boundary segment
    (left, right, bottom, top); it is imposed strongly on the flux degrees
    of freedom. The optional `mass_source` (scalar, per-cell values, or a
    callable on centroids) serves manufactured verification problems. The
    pressure is gauged to area-mean zero. Raises CompatibilityError when
    the net boundary outflow does not balance the integrated source, and
    SolveError when the saddle system is singular or inaccurate.
    """
    sub = _macro_sub(mesh) if sub is None else sub
    K = _spd_tensor(K, "K")
    Kinv = np.linalg.inv(K)
    M_vec = np.asarray(M_vec, dtype=np.float64).reshape(2)
    jump = _nodal_field(c_s, sub, "c_s") - _nodal_field(c_a, sub, "c_a")
    jc_cell = jump[sub.cells].mean(axis=1)

    vD = np.asarray(v_D, dtype=np.float64)
    if vD.shape != (4,):
        raise ParameterError(
            "v_D must give one outward normal velocity per boundary "
            "segment (left, right, bottom, top)"
        )

    if mass_source is None:
        source = np.zeros(sub.nc)
    elif callable(mass_source):
        source = np.asarray(
            mass_source(sub.quad_points(_CENTER)[:, 0, :]), dtype=np.float64
        ).reshape(sub.nc)
    else:
        source = np.broadcast_to(
            np.asarray(mass_source, dtype=np.float64), (sub.nc,)
        ).copy()

    edges, signs, lengths, segments = _boundary_facet_dofs(mesh, sub)
    net_out = float(np.sum(vD[segments] * lengths))
    net_src = float(sub.areas @ source)
    scale = max(
        1e-30,
        float(np.abs(vD[segments] * lengths).sum()),
        float(np.abs(sub.areas * source).sum()),
    )
    if abs(net_out - net_src) > 1e-9 * scale:
        raise CompatibilityError(
            f"boundary outflow {net_out:.6e} does not balance the mass "
            f"source {net_src:.6e}; the Darcy problem has no solution"
        )

    lay = fem.BlockLayout(v=sub.ne, p=sub.nc, g=1)
    o = lay.offsets
    S = fem.CooBuilder(lay.total, lay.total)
    A = fem.rt0_mass(sub, Kinv).tocoo()
    S.add(A.row + o["v"], A.col + o["v"], A.data)
    B = (-fem.rt0_divergence_rows(sub)).tocoo()
    S.add(B.row + o["p"], B.col + o["v"], B.data)
    S.add(B.col + o["v"], B.row + o["p"], B.data)
    S.add(np.full(sub.nc, o["g"]), o["p"] + np.arange(sub.nc), sub.areas)
    S.add(o["p"] + np.arange(sub.nc), np.full(sub.nc, o["g"]), sub.areas)

    rhs = np.zeros(lay.total)
    rhs[lay.sl("v")] = _rt0_load_cellwise(sub, jc_cell[:, None] * (Kinv @ M_vec))
    rhs_p = -(sub.areas * source)
    rhs_p -= sub.areas * (rhs_p.sum() / sub.areas.sum())  # roundoff hygiene
    rhs[lay.sl("p")] = rhs_p

    fixed = list(zip((o["v"] + edges).tolist(),
                     (signs * vD[segments] * lengths).tolist()))
    red = fem.Reduction.build(lay.total, fixed=fixed)
    Sr, br = red.reduce_system(S.tocsr(), rhs)
    xr = fem.solve_sparse(Sr, br, label="tissue Darcy system", rtol=rtol)
    x = red.expand(xr)
    return x[lay.sl("v")], x[lay.sl("p")]


def boundary_water_flux(mesh, v, *, sub=None):
    """Outward water flux of a Darcy solution per boundary segment."""
    sub = _macro_sub(mesh) if sub is None else sub
    edges, signs, _, segments = _boundary_facet_dofs(mesh, sub)
    out = np.zeros(4)
    np.add.at(out, segments, signs * np.asarray(v)[edges])
    return out


# ---------------------------------------------------------------------------
# vertex-centred solute transport


def _cell_velocity_field(sub, H, name):
    if H is None:
        return None
    arr = np.asarray(H, dtype=np.float64)
    if arr.shape == (2,):
        arr = np.broadcast_to(arr, (sub.nc, 2))
    if arr.shape != (sub.nc, 2):
        raise StateError(
            f"{name} must be a single vector or one per cell, got {arr.shape}"
        )
    return arr


def dual_edge_fluxes(sub, H_cells):
    """Advective flux across the median-dual face of every mesh edge.

    Positive values carry mass from edges[:,0] to edges[:,1]. Dual faces
    on the exterior boundary are omitted entirely, which is the zero-flux
    closure of the transport problem.
    """
    H = _cell_velocity_field(sub, H_cells, "velocity")
    g = sub.quad_points(_CENTER)[:, 0, :]
    p = sub.vertices[sub.cells]
    Q = np.zeros(sub.ne)
    for k in range(3):
        a = sub.cells[:, k]
        m = 0.5 * (p[:, k] + p[:, (k + 1) % 3])
        t = g - m
        q = H[:, 0] * t[:, 1] - H[:, 1] * t[:, 0]
        e = sub.cell_edges[:, (k + 2) % 3]
        np.add.at(Q, e, np.where(sub.edges[e, 0] == a, q, -q))
    return Q


def advective_cfl_limit(sub, H_cells):
    """Largest stable dt of the explicit upwind step (inf when advection
    vanishes)."""
    Q = dual_edge_fluxes(sub, H_cells)
    out = np.zeros(sub.nv)
    np.add.at(out, sub.edges[:, 0], np.maximum(Q, 0.0))
    np.add.at(out, sub.edges[:, 1], np.maximum(-Q, 0.0))
    m = fem.p1_lumped_mass(sub)
    active = out > 0.0
    if not active.any():
        return np.inf
    return float((m[active] / out[active]).min())


def _upwind_rate(sub, Q, c):
    i, j = sub.edges[:, 0], sub.edges[:, 1]
    flux = np.maximum(Q, 0.0) * c[i] + np.minimum(Q, 0.0) * c[j]
    rate = np.zeros(sub.nv)
    np.add.at(rate, i, -flux)
    np.add.at(rate, j, flux)
    return rate


def advance_concentration(mesh, side, state, A, H, dt, *, exchange=None,
                          reaction=None, rtol=1e-9, sub=None):
    """One transport step for compartment `side` in {a, s}.

    Explicit first-order upwind advection with cell velocities `H` (None
    disables it), backward-Euler diffusion with SPD tensor `A` (None or 0
    disables it), then explicit reaction and membrane exchange, in that
    order. The exterior boundary is zero-flux throughout, so the solute
    content changes only through `reaction` and `exchange`. Raises
    StepError when dt violates the advective CFL bound and SchemeError if
    the result drops below -1e-12 (never repaired).
    """
    if side not in ("a", "s"):
        raise ParameterError(f"side must be 'a' or 's', got {side!r}")
    if dt <= 0.0:
        raise ParameterError(f"dt={dt} must be positive")
    sub = _macro_sub(mesh) if sub is None else sub
    c = np.asarray(state.c_a if side == "a" else state.c_s, dtype=np.float64)
    if c.shape != (sub.nv,):
        raise StateError("state concentrations do not match the macro mesh")
    m = fem.p1_lumped_mass(sub)

    H = _cell_velocity_field(sub, H, f"Hhat_{side}")
    if H is not None:
        Q = dual_edge_fluxes(sub, H)
        out = np.zeros(sub.nv)
        np.add.at(out, sub.edges[:, 0], np.maximum(Q, 0.0))
        np.add.at(out, sub.edges[:, 1], np.maximum(-Q, 0.0))
        active = out > 0.0
        limit = float((m[active] / out[active]).min()) if active.any() else np.inf
        if dt > limit:
            raise StepError(
                f"dt={dt:.6e} exceeds the advective CFL limit {limit:.6e} "
                f"for compartment {side}; reduce dt"
            )
        c = c + dt * _upwind_rate(sub, Q, c) / m

    diffusive = A is not None and not (np.ndim(A) == 0 and float(A) == 0.0)
    if diffusive:
        Astiff = fem.p1_stiffness(sub, _spd_tensor(A, f"A_{side}"))
        c = fem.solve_sparse(
            (sp.diags(m) + dt * Astiff).tocsc(),
            m * c,
            label=f"compartment {side} diffusion step",
            rtol=rtol,
        )

    if reaction is not None:
        c = c + dt * np.asarray(reaction(c), dtype=np.float64)
    if exchange is not None:
        c = c + dt * np.asarray(exchange, dtype=np.float64)

    lo = float(c.min())
    if lo < -1e-12:
        raise SchemeError(
            f"compartment {side} concentration reached {lo:.3e} < -1e-12; "
            "the step is rejected, not clipped"
        )
    return c


def logistic_reaction(rate, c_max):
    """Default volumetric source F(c) = rate c (1 - c/c_max)."""
    if rate < 0.0 or c_max <= 0.0:
        raise ParameterError("logistic reaction needs rate >= 0 and c_max > 0")

    def F(c):
        c = np.asarray(c, dtype=np.float64)
        return rate * c * (1.0 - c / c_max)

    return F


# ---------------------------------------------------------------------------
# transporter kinetics and exchange


def membrane_exchange_rates(state, transporters, measures):
    """Explicit membrane exchange sources per compartment (per vertex).

    The interface integral is split per segment class as length times the
    nodal class value; the result is normalized by the compartment area
    fraction, matching the homogenized source term.
    """
    pa, ps = transporters["a"], transporters["s"]
    alpha_a = pa.alpha(state.c_a, state.c_s)
    alpha_s = ps.alpha(state.c_s, state.c_a)
    ex_a = np.zeros_like(state.c_a)
    ex_s = np.zeros_like(state.c_s)
    for cls, length in ((CLASS_WALL, measures.gamma_z),
                        (CLASS_MOUTH, measures.gamma_as)):
        if length == 0.0:
            continue
        ex_a += length * membrane_solute_exchange(
            state.c_a, state.theta_f_a[cls], state.theta_b_s[cls], alpha_a, ps.beta
        )
        ex_s += length * membrane_solute_exchange(
            state.c_s, state.theta_f_s[cls], state.theta_b_a[cls], alpha_s, pa.beta
        )
    ex_a /= measures.area_a
    if np.any(ex_s != 0.0):
        if measures.area_s <= 0.0:
            raise StateError(
                "symplast exchange requires a positive symplast area fraction"
            )
        ex_s /= measures.area_s
    return ex_a, ex_s


def advance_transporters(state, c_a, c_s, transporters, dt, *, t=0.0):
    """Backward-Euler kinetics at every node, both segment classes at once.

    Carrier densities are taken as one (fold actual densities into the
    rate constants). Returns the four new theta arrays in state order.
    """
    new_a = step_transporters(
        TransporterState(state.theta_f_a, state.theta_b_a),
        c_a, c_s, 1.0, 1.0, transporters["a"], dt, t=t,
    )
    new_s = step_transporters(
        TransporterState(state.theta_f_s, state.theta_b_s),
        c_s, c_a, 1.0, 1.0, transporters["s"], dt, t=t,
    )
    return (
        np.asarray(new_a.theta_f), np.asarray(new_a.theta_b),
        np.asarray(new_s.theta_f), np.asarray(new_s.theta_b),
    )


# ---------------------------------------------------------------------------
# effective advection tables


def darcy_point_evaluator(mesh, K, M_vec, state, *, sub=None):
    """(grad p, c_s - c_a) at arbitrary points of the macro domain.

    The pressure gradient is recovered from the mixed solution through
    K grad p = M (c_s - c_a) - v, which is exact cellwise for the lowest
    order pair."""
    sub = _macro_sub(mesh) if sub is None else sub
    K = _spd_tensor(K, "K")
    Kinv = np.linalg.inv(K)
    M_vec = np.asarray(M_vec, dtype=np.float64).reshape(2)
    jump = np.asarray(state.c_s, dtype=np.float64) - np.asarray(
        state.c_a, dtype=np.float64
    )
    p = sub.vertices[sub.cells]
    p0 = p[:, 0]
    d1 = p[:, 1] - p0
    d2 = p[:, 2] - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    coef = (np.asarray(state.v)[sub.cell_edges] * sub.cell_edge_sign) / (
        2.0 * sub.areas[:, None]
    )

    def evaluate(x):
        x = np.asarray(x, dtype=np.float64).reshape(2)
        rel = x[None, :] - p0
        l1 = (rel[:, 0] * d2[:, 1] - rel[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * rel[:, 1] - d1[:, 1] * rel[:, 0]) / det
        l0 = 1.0 - l1 - l2
        ok = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not ok.any():
            raise SolveError(f"point {x} lies outside the macro mesh")
        c = int(np.argmax(ok))
        v_at = coef[c] @ (x[None, :] - p[c])
        jc = float(np.array([l0[c], l1[c], l2[c]]) @ jump[sub.cells[c]])
        return Kinv @ (M_vec * jc - v_at), jc

    return evaluate


class HhatLattice:
    """Effective advective velocities tabulated on a regular macro lattice.

    Each refresh solves one convection corrector per lattice point and
    side; `cell_values` interpolates the tables multilinearly, which is
    how the upwind step consumes them.
    """

    def __init__(self, reconstruction_a, reconstruction_s, D_a, D_s, cutoff,
                 n=5, extents=(1.0, 1.0)):
        if n < 2:
            raise ParameterError("the Hhat lattice needs at least 2x2 points")
        self.recon = {"a": reconstruction_a, "s": reconstruction_s}
        self.D = {"a": D_a, "s": D_s}
        self.cutoff = cutoff
        self.n = int(n)
        self.extents = (float(extents[0]), float(extents[1]))
        xs = np.linspace(0.0, self.extents[0], self.n)
        ys = np.linspace(0.0, self.extents[1], self.n)
        xx, yy = np.meshgrid(xs, ys, indexing="ij")
        self.points = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        self.tables = None
        self.defect = 0.0

    def refresh(self, evaluate):
        tables = {}
        worst = 0.0
        for side in ("a", "s"):
            tab, defect = effective_velocity_table(
                side, self.recon[side], self.points, evaluate,
                self.D[side], self.cutoff,
            )
            tables[side] = tab.reshape(self.n, self.n, 2)
            worst = max(worst, defect)
        self.tables = tables
        self.defect = worst
        return self

    def cell_values(self, side, points):
        if self.tables is None:
            raise StateError("refresh the Hhat lattice before sampling it")
        T = self.tables[side]
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(pts)
        for axis, extent in enumerate(self.extents):
            f = np.clip(pts[:, axis] / extent, 0.0, 1.0) * (self.n - 1)
            i = np.minimum(f.astype(np.int64), self.n - 2)
            if axis == 0:
                ix, tx = i, f - i
            else:
                iy, ty = i, f - i
        out = (
            (1 - tx)[:, None] * ((1 - ty)[:, None] * T[ix, iy]
                                 + ty[:, None] * T[ix, iy + 1])
            + tx[:, None] * ((1 - ty)[:, None] * T[ix + 1, iy]
                             + ty[:, None] * T[ix + 1, iy + 1])
        )
        return out


# ---------------------------------------------------------------------------
# budgets, output, coupled loop


def compute_mass_budget(mesh, state, measures, *, sub=None):
    """Scalar bookkeeping of one state: solute integrals per compartment,
    interface-weighted transporter totals, and the boundary water fluxes
    of the current Darcy solution (per segment, outward positive)."""
    sub = _macro_sub(mesh) if sub is None else sub
    m = fem.p1_lumped_mass(sub)
    weights = np.array([measures.gamma_z, measures.gamma_as])

    def surface_total(theta):
        return float(weights @ (theta @ m))

    budget = {
        "c_a": float(m @ state.c_a),
        "c_s": float(m @ state.c_s),
        "theta_f_a": surface_total(state.theta_f_a),
        "theta_b_a": surface_total(state.theta_b_a),
        "theta_f_s": surface_total(state.theta_f_s),
        "theta_b_s": surface_total(state.theta_b_s),
    }
    budget["solute_compartments"] = (
        measures.area_a * budget["c_a"] + measures.area_s * budget["c_s"]
    )
    budget["solute_bound"] = budget["theta_b_a"] + budget["theta_b_s"]
    budget["solute_total"] = budget["solute_compartments"] + budget["solute_bound"]
    if len(state.v) == sub.ne:
        out = boundary_water_flux(mesh, state.v, sub=sub)
    else:
        out = np.zeros(4)
    for k, name in enumerate(("left", "right", "bottom", "top")):
        budget[f"water_out_{name}"] = float(out[k])
    budget["water_out_net"] = float(out.sum())
    return budget


@dataclass
class MacroProblem:
    """Everything the coupled loop needs besides the time controls.

    `transporters` maps side to its TransporterParams (None switches the
    kinetics and exchange off); `hhat` is either a dict of static per-side
    velocities or an HhatLattice refreshed from the flow state."""

    mesh: object
    K: object
    M_vec: object
    A_a: object
    A_s: object
    measures: TissueMeasures
    v_D: tuple = (0.0, 0.0, 0.0, 0.0)
    transporters: dict | None = None
    reaction_a: object = None
    reaction_s: object = None
    hhat: object = None

    @classmethod
    def from_coefficients(cls, mesh, coefficients, measures, **kw):
        return cls(
            mesh=mesh,
            K=coefficients.K,
            M_vec=coefficients.M,
            A_a=coefficients.A_a,
            A_s=coefficients.A_s,
            measures=measures,
            **kw,
        )


def _dump_snapshot(state, step, out_dir):
    directory = out_dir if out_dir else tempfile.gettempdir()
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"tissueflow_abort_step{step:06d}.npz")
    np.savez(
        path,
        t=state.t, p=state.p, v=state.v, c_a=state.c_a, c_s=state.c_s,
        theta_f_a=state.theta_f_a, theta_b_a=state.theta_b_a,
        theta_f_s=state.theta_f_s, theta_b_s=state.theta_b_s,
    )
    return path


def _write_frame(out_dir, mesh, sub, state, frame):
    vc = fem.rt0_cell_values(sub, state.v, _CENTER)[:, 0, :]
    write_vtk_mesh(
        os.path.join(out_dir, f"macro_{frame:04d}.vtk"),
        mesh,
        point_data={"c_a": state.c_a, "c_s": state.c_s},
        cell_data={"p": state.p, "v_x": vc[:, 0], "v_y": vc[:, 1]},
        title=f"tissue state at t={state.t:.9g}",
    )


_LOG_COLUMNS = (
    "step", "time", "c_a", "c_s", "solute_compartments", "solute_bound",
    "solute_total", "c_a_min", "c_a_max", "c_s_min", "c_s_max",
    "v_l2", "water_out_net", "hhat_defect",
)


def coupled_time_loop(config, problem, state0, out_dir=None):
    """March the coupled tissue system and return the stored trajectory.

    Per step: (1) Darcy solve with the current concentration jump and the
    fixed boundary data; (2) refresh of the effective advection tables
    when configured; (3) one transport step per compartment with the
    exchange sources evaluated explicitly at the step start; (4) the
    transporter kinetics step. Snapshots are stored every `output_every`
    steps (plus the initial and final states); with `out_dir` set, each
    stored snapshot becomes a VTK frame and a scalar CSV log is written at
    the end. Any sub-step failure dumps the last committed state and
    re-raises with the step index.
    """
    mesh = problem.mesh
    sub = _macro_sub(mesh)
    measures = problem.measures
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    state = state0.copy()
    trajectory = [state.copy()]
    if out_dir:
        _write_frame(out_dir, mesh, sub, state, 0)
    rows = []
    centroids = sub.quad_points(_CENTER)[:, 0, :]
    lattice = problem.hhat if isinstance(problem.hhat, HhatLattice) else None
    static_h = problem.hhat if isinstance(problem.hhat, dict) else None
    H_a = H_s = None
    frames = 1

    for k in range(config.n_steps):
        try:
            v, p = solve_darcy(
                mesh, problem.K, problem.M_vec, state.c_s, state.c_a,
                problem.v_D, rtol=config.linear_rtol, sub=sub,
            )
            state.v, state.p = v, p

            if lattice is not None:
                due = lattice.tables is None or (
                    config.hhat_refresh_every > 0
                    and k % config.hhat_refresh_every == 0
                )
                if due:
                    lattice.refresh(
                        darcy_point_evaluator(
                            mesh, problem.K, problem.M_vec, state, sub=sub
                        )
                    )
                H_a = lattice.cell_values("a", centroids)
                H_s = lattice.cell_values("s", centroids)
            elif static_h is not None:
                H_a = static_h.get("a")
                H_s = static_h.get("s")

            if problem.transporters is not None:
                ex_a, ex_s = membrane_exchange_rates(
                    state, problem.transporters, measures
                )
            else:
                ex_a = ex_s = None

            c_a_new = advance_concentration(
                mesh, "a", state, problem.A_a, H_a, config.dt,
                exchange=ex_a, reaction=problem.reaction_a,
                rtol=config.linear_rtol, sub=sub,
            )
            c_s_new = advance_concentration(
                mesh, "s", state, problem.A_s, H_s, config.dt,
                exchange=ex_s, reaction=problem.reaction_s,
                rtol=config.linear_rtol, sub=sub,
            )
            if problem.transporters is not None:
                thetas = advance_transporters(
                    state, state.c_a, state.c_s, problem.transporters,
                    config.dt, t=state.t,
                )
                (state.theta_f_a, state.theta_b_a,
                 state.theta_f_s, state.theta_b_s) = thetas
            state.c_a, state.c_s = c_a_new, c_s_new
            state.t += config.dt
        except TissueflowError as err:
            path = _dump_snapshot(state, k, out_dir)
            raise type(err)(
                f"coupled loop aborted at step {k} (t={state.t:.9g}): {err} "
                f"[state snapshot: {path}]"
            ) from err

        budget = compute_mass_budget(mesh, state, measures, sub=sub)
        vc = fem.rt0_cell_values(sub, state.v, _CENTER)[:, 0, :]
        rows.append((
            k + 1, state.t, budget["c_a"], budget["c_s"],
            budget["solute_compartments"], budget["solute_bound"],
            budget["solute_total"],
            float(state.c_a.min()), float(state.c_a.max()),
            float(state.c_s.min()), float(state.c_s.max()),
            float(np.sqrt(sub.areas @ (vc ** 2).sum(axis=1))),
            budget["water_out_net"],
            lattice.defect if lattice is not None else 0.0,
        ))
        last = k == config.n_steps - 1
        if last or (config.output_every and (k + 1) % config.output_every == 0):
            trajectory.append(state.copy())
            if out_dir:
                _write_frame(out_dir, mesh, sub, state, frames)
            frames += 1

    if out_dir:
        write_table_csv(
            os.path.join(out_dir, "macro_log.csv"), _LOG_COLUMNS, rows,
            comments=("scalar log of the coupled tissue run",),
        )
    return trajectory
