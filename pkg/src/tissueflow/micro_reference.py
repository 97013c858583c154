"""Fine-scale reference solves on tiled tissue, and the limit comparison.

The homogenized Darcy model is only trustworthy if resolved flows on an
eps-periodic tissue approach it as the microstructure refines. This
module paves the unit square with n x n copies of the unit cell, solves
the scaled mixed Stokes-Darcy system with frozen concentrations and
through-flow data, compresses both the fine and the homogenized
solutions onto the eps lattice of cell averages, and reports the error
ladder over eps = 1/2, 1/4, 1/8.

Concentrations stay frozen: the study isolates the water-flow limit.
Fine-scale solute dynamics is out of scope.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _fem as fem
from ._formats import write_table_csv
from .cell_problems import (
    MixedDiscretization,
    _assemble_flow_system,
    _flow_energy,
    _flow_solution,
    _pair,
    _solve_flow,
    solve_osmotic_cell,
    solve_permeability_cell,
)
from .effective_tensors import assemble_osmotic_vector, assemble_permeability
from .errors import (
    CompatibilityError,
    MeshError,
    ParameterError,
    SolveError,
)
from .geometry import (
    CellTag,
    FacetTag,
    MacroDomainSpec,
    SimplicialMesh,
    build_unit_cell,
    default_unit_cell_spec,
    mesh_macro_domain,
    mesh_unit_cell,
)
from .macro_solver import solve_darcy

__all__ = [
    "MicroAverages",
    "MicroFlowSolution",
    "MicroProblem",
    "MicroStudyReport",
    "average_onto_macro",
    "convergence_study",
    "default_jump",
    "solve_micro_flow",
    "tile_unit_mesh",
]

_INTERFACE_TAGS = [
    int(FacetTag.GAMMA_Z),
    int(FacetTag.GAMMA_AS),
    int(FacetTag.GAMMA_AW),
]
_CENTER = np.full((1, 3), 1.0 / 3.0)

# finest admitted tiling; an 16 x 16 pave of the default cell is already a
# ~1e6-nonzero factorization, anything denser leaves desk scale
_MIN_EPS = 1.0 / 16.0


def default_jump(points):
    """Frozen concentration difference c_s - c_a: sin(2 pi x) sin(2 pi y).

    Smooth and mean-zero, so it exercises the osmotic forcing without
    driving net volume through the boundary.
    """
    pts = np.asarray(points, dtype=np.float64)
    return np.sin(2.0 * np.pi * pts[..., 0]) * np.sin(2.0 * np.pi * pts[..., 1])


# ---------------------------------------------------------------------------
# tiling


def tile_unit_mesh(cell_mesh, n):
    """Pave [0,1]^2 with an n x n grid of unit-cell copies, side 1/n.

    The unit-cell meshers keep opposite boundaries bitwise congruent, so
    after scaling by 1/n and translating by integers the shared rim
    vertices of neighbouring copies evaluate to identical floats and the
    copies stitch into one conforming complex under exact comparison.
    Interface facets replicate per tile; the former periodic rim becomes
    plain interior edges between tiles, or EXTERIOR facets with segment
    ids (left, right, bottom, top) on the outer boundary.
    """
    n = int(n)
    if n < 1:
        raise ParameterError("tile count must be a positive integer")
    if len(cell_mesh.periodic_vertex_pairs) == 0:
        raise MeshError("tiling requires a periodic unit-cell mesh")
    verts = cell_mesh.vertices
    if verts.min() < 0.0 or verts.max() > 1.0:
        raise MeshError("unit-cell vertices must lie in [0,1]^2")
    eps = 1.0 / n
    nv, nc = len(verts), len(cell_mesh.cells)

    interface = np.isin(cell_mesh.facet_tags, _INTERFACE_TAGS)
    rim = ~interface
    rim_tags = cell_mesh.facet_tags[rim]
    if not np.isin(
        rim_tags, [int(FacetTag.PERIODIC_X), int(FacetTag.PERIODIC_Y)]
    ).all():
        raise MeshError("unit-cell facets must be interfaces or the periodic rim")
    rim_ids = np.flatnonzero(rim)
    rim_axis = np.where(rim_tags == int(FacetTag.PERIODIC_X), 0, 1)
    # rim coordinates are exactly 0.0 or 1.0 by construction
    rim_side = verts[cell_mesh.facet_vertices[rim_ids, 0], rim_axis]
    iface_ids = np.flatnonzero(interface)

    coords = np.empty((n * n * nv, 2))
    tiles = [(ix, iy) for iy in range(n) for ix in range(n)]
    for t, (ix, iy) in enumerate(tiles):
        coords[t * nv : (t + 1) * nv] = (verts + (float(ix), float(iy))) * eps
    keyed = coords.view([("x", np.float64), ("y", np.float64)])[:, 0]
    uniq, inverse = np.unique(keyed, return_inverse=True)
    gverts = np.stack([uniq["x"], uniq["y"]], axis=-1)
    remap = inverse.reshape(-1)

    cells = np.concatenate(
        [remap[cell_mesh.cells + t * nv] for t in range(n * n)]
    )
    cell_tags = np.tile(cell_mesh.cell_tags, n * n)

    fverts, ftags, fcells, fsegs = [], [], [], []
    for t, (ix, iy) in enumerate(tiles):
        voff, coff = t * nv, t * nc
        if len(iface_ids):
            fverts.append(remap[cell_mesh.facet_vertices[iface_ids] + voff])
            ftags.append(cell_mesh.facet_tags[iface_ids])
            fcells.append(cell_mesh.facet_cells[iface_ids] + coff)
            fsegs.append(np.full(len(iface_ids), -1, dtype=np.int32))
        # keep only the rim facets that land on the outer boundary
        seg = np.where(rim_axis == 0, np.where(rim_side == 0.0, 0, 1),
                       np.where(rim_side == 0.0, 2, 3))
        pos = (ix, ix, iy, iy)
        edge = (0, n - 1, 0, n - 1)
        outer = np.zeros(len(rim_ids), dtype=bool)
        for s in range(4):
            outer |= (seg == s) & (pos[s] == edge[s])
        if outer.any():
            ids = rim_ids[outer]
            fverts.append(remap[cell_mesh.facet_vertices[ids] + voff])
            ftags.append(np.full(outer.sum(), int(FacetTag.EXTERIOR), dtype=np.int32))
            fc = cell_mesh.facet_cells[ids].copy()
            fc[:, 0] += coff  # the rim facet's single cell sits in column 0
            fcells.append(fc)
            fsegs.append(seg[outer].astype(np.int32))

    tiled = SimplicialMesh(
        vertices=gverts,
        cells=cells.reshape(-1, 3),
        cell_tags=cell_tags,
        facet_vertices=np.concatenate(fverts),
        facet_tags=np.concatenate(ftags),
        facet_cells=np.concatenate(fcells),
        facet_segments=np.concatenate(fsegs),
        periodic_vertex_pairs=np.zeros((0, 3), dtype=np.int32),
        periodic_facet_pairs=np.zeros((0, 3), dtype=np.int32),
        h=cell_mesh.h * eps,
        min_angle_deg=cell_mesh.min_angle_deg,
        geometry=cell_mesh.geometry,
    )
    return tiled.validate()


# ---------------------------------------------------------------------------
# the fine-scale problem


@dataclass(frozen=True)
class MicroProblem:
    """Frozen-concentration flow problem on an n x n tiling of the cell.

    `jump` is the prescribed concentration difference c_s - c_a as a
    callable on points; `v_D` prescribes the outward normal velocity of
    the apoplast continuum per boundary segment (left, right, bottom,
    top). Plasmodesmata channels are sealed where they meet the outer
    boundary.
    """

    eps: float
    n: int
    cell_mesh: SimplicialMesh
    mesh: SimplicialMesh = field(repr=False)
    eta: float
    K_a: object
    K_sp: object
    kappa: tuple
    delta: tuple
    jump: object = field(repr=False)
    v_D: tuple

    @staticmethod
    def build(cell_mesh, eps, *, eta=1.0, K_a=1.0, K_sp=2.0,
              kappa=(2.0, 0.5), delta=(1.0, 0.3), jump=None,
              v_D=(-1.0, 1.0, 0.0, 0.0)):
        eps = float(eps)
        if not eps > 0.0:
            raise ParameterError("eps must be positive")
        n = int(round(1.0 / eps))
        if n < 1 or abs(eps * n - 1.0) > 1e-12:
            raise ParameterError(
                "eps must be the reciprocal of a positive integer"
            )
        if eps < _MIN_EPS - 1e-12:
            raise ParameterError(
                f"eps = 1/{n} refused: the tiled direct factorization "
                "below 1/16 outgrows desk-scale memory"
            )
        if not float(eta) > 0.0:
            raise ParameterError("viscosity must be positive")
        _pair(kappa, "kappa", positive=True)
        _pair(delta, "delta", positive=False)
        vD = np.asarray(v_D, dtype=np.float64)
        if vD.shape != (4,):
            raise ParameterError(
                "v_D must give one outward normal velocity per boundary "
                "segment (left, right, bottom, top)"
            )
        # all-flux data on the unit square: each segment has length one
        if abs(vD.sum()) > 1e-9 * max(1.0, float(np.abs(vD).sum())):
            raise CompatibilityError(
                "net boundary outflow must vanish for the all-flux "
                "fine-scale problem"
            )
        if jump is None:
            jump = default_jump
        if not callable(jump):
            raise ParameterError("jump must be callable on points")
        mesh = tile_unit_mesh(cell_mesh, n)
        return MicroProblem(
            eps=eps, n=n, cell_mesh=cell_mesh, mesh=mesh, eta=float(eta),
            K_a=K_a, K_sp=K_sp, kappa=tuple(np.atleast_1d(kappa).tolist()),
            delta=tuple(np.atleast_1d(delta).tolist()), jump=jump,
            v_D=tuple(vD.tolist()),
        )


@dataclass
class MicroFlowSolution:
    """Fine-scale mixed solution plus its health diagnostics.

    `flow` carries the fields on the tiled discretization with the same
    accessors as a cell solution. `energy_balance` is the relative
    defect of the discrete work identity: dissipation equals osmotic
    forcing work plus the pressure work of the prescribed boundary
    fluxes.
    """

    problem: MicroProblem
    flow: object
    symmetry_defect: float
    boundary_work: float
    energy_balance: float
    residual: float


def solve_micro_flow(problem):
    """Solve the scaled mixed system on the tiled mesh.

    Viscosity enters as eps^2 eta and the membrane resistance and
    osmotic data as eps kappa and eps delta (c_s - c_a)(x), so the
    solution stays O(1) as the tiling refines. The apoplast flux takes
    the through-flow data v_D strongly on the whole outer boundary;
    channel ends there are sealed. A single gauge pins the global
    area-weighted pressure mean of all three pressure fields.
    """
    if not isinstance(problem, MicroProblem):
        raise ParameterError("a MicroProblem is required")
    mesh, eps = problem.mesh, problem.eps
    disc = MixedDiscretization.build(mesh)

    kfac = eps * disc.facet_class_values(_pair(problem.kappa, "kappa", True))
    if len(disc.facets):
        mid = mesh.vertices[mesh.facet_vertices[disc.facets]].mean(axis=1)
        jc = np.asarray(problem.jump(mid), dtype=np.float64).reshape(len(mid))
        dfac = eps * disc.facet_class_values(_pair(problem.delta, "delta", False)) * jc
    else:
        dfac = None

    ext = mesh.facets_by_tag(int(FacetTag.EXTERIOR))
    if len(ext) == 0:
        raise MeshError("the tiled mesh carries no outer boundary facets")
    inside = mesh.facet_cells[ext][:, 0]
    if (mesh.cell_tags[inside] == int(CellTag.Z)).any():
        raise MeshError(
            "symplast cells touch the outer boundary; the through-flow "
            "data only covers wall and channel traces"
        )
    vD = np.asarray(problem.v_D)
    lengths = mesh.facet_lengths()[ext]
    values = vD[mesh.facet_segments[ext]] * lengths
    edges_a, signs_a = disc.sub_a.local_edges_of_facets(ext)
    fixed_a = list(zip(edges_a.tolist(), (signs_a * values).tolist()))
    fixed_sp = []
    if disc.has_channels:
        on_as = mesh.cell_tags[inside] == int(CellTag.AS)
        if on_as.any():
            edges_sp, _ = disc.sub_sp.local_edges_of_facets(ext[on_as])
            fixed_sp = [(int(e), 0.0) for e in edges_sp]

    lay, red, S, rhs = _assemble_flow_system(
        disc, eps * eps * problem.eta, problem.K_a, problem.K_sp, kfac,
        include_sp=True, delta_facets=dfac,
        fixed_flux_a=fixed_a, fixed_flux_sp=fixed_sp, periodic=False,
    )
    sym = fem.symmetry_defect(S)
    if sym > 1e-12:
        raise SolveError(f"assembled fine-scale matrix lost symmetry ({sym:.2e})")

    x, res = _solve_flow(disc, lay, red, S, rhs, f"fine-scale flow eps=1/{problem.n}")
    use_sp = lay.sizes["usp"] > 0
    energy = _flow_energy(
        disc, lay, x, rhs, eps * eps * problem.eta,
        problem.K_a, problem.K_sp if use_sp else None, kfac, use_sp,
    )
    # raw residual rows of the constrained boundary dofs are the discrete
    # reaction forces; their work closes the energy identity
    rows = lay.offsets["ua"] + edges_a
    if fixed_sp:
        rows = np.concatenate(
            [rows, lay.offsets["usp"] + np.array([e for e, _ in fixed_sp])]
        )
    reaction = (S @ x - rhs)[rows]
    bwork = float(x[rows] @ reaction)
    scale = max(abs(energy["total"]), abs(energy["forcing"]) + abs(bwork), 1e-30)
    balance = abs(energy["total"] - energy["forcing"] - bwork) / scale

    flow = _flow_solution(("micro", problem.n), disc, lay, x, res, energy)
    return MicroFlowSolution(
        problem=problem, flow=flow, symmetry_defect=sym,
        boundary_work=bwork, energy_balance=balance, residual=res,
    )


# ---------------------------------------------------------------------------
# compression onto the eps lattice


@dataclass
class MicroAverages:
    """Per-eps-cell averages: velocity and subdomain pressures.

    `v[i, j]` is the average over the tile [i eps, (i+1) eps] x
    [j eps, (j+1) eps] of the zero-extended velocity sum; `p_a` and
    `p_s` average the apoplast and the symplast pressure over their
    respective subdomain slice of each tile. Without a symplast region
    the two pressure tables coincide.
    """

    eps: float
    n: int
    v: np.ndarray
    p_a: np.ndarray
    p_s: np.ndarray


def _tile_index(mesh, sub, eps, n):
    cen = mesh.barycenters()[sub.cell_ids]
    ij = np.floor(cen / eps).astype(np.int64)
    return np.clip(ij[:, 0], 0, n - 1), np.clip(ij[:, 1], 0, n - 1)


def average_onto_macro(solution, eps=None):
    """Compress a fine solution to cell averages on the eps lattice.

    Velocity per tile: the integrals of the viscous, apoplast and
    channel fields (each extended by zero) summed and divided by the
    tile area. Pressures per tile: the area mean over the subdomain
    portion inside the tile. Accepts a MicroFlowSolution, or any flow
    solution plus an explicit eps.
    """
    if isinstance(solution, MicroFlowSolution):
        flow = solution.flow
        eps = solution.problem.eps if eps is None else float(eps)
    else:
        flow = solution
        if eps is None:
            raise ParameterError("eps is required for a bare flow solution")
        eps = float(eps)
    n = int(round(1.0 / eps))
    if n < 1 or abs(eps * n - 1.0) > 1e-12:
        raise ParameterError("eps must be the reciprocal of a positive integer")

    disc = flow.disc
    mesh = disc.mesh
    vsum = np.zeros((n, n, 2))

    ix, iy = _tile_index(mesh, disc.sub_a, eps, n)
    vals = fem.rt0_cell_values(disc.sub_a, flow.w_a, _CENTER)[:, 0, :]
    np.add.at(vsum, (ix, iy), disc.sub_a.areas[:, None] * vals)
    pa_sum = np.zeros((n, n))
    pa_area = np.zeros((n, n))
    np.add.at(pa_sum, (ix, iy), disc.sub_a.areas * flow.pi_a)
    np.add.at(pa_area, (ix, iy), disc.sub_a.areas)
    if pa_area.min() <= 0.0:
        raise MeshError("a lattice tile carries no apoplast cells")
    p_a = pa_sum / pa_area

    if flow.w_z is not None:
        sub_z = disc.sub_z
        izx, izy = _tile_index(mesh, sub_z, eps, n)
        # midside values integrate quadratics exactly
        zvals = fem.p2_values(sub_z, disc.grid_z, flow.w_z)
        np.add.at(vsum, (izx, izy),
                  sub_z.areas[:, None] / 3.0 * zvals.sum(axis=1))
        ps_sum = np.zeros((n, n))
        ps_area = np.zeros((n, n))
        np.add.at(ps_sum, (izx, izy), sub_z.areas * flow.pi_z)
        np.add.at(ps_area, (izx, izy), sub_z.areas)
        if ps_area.min() <= 0.0:
            raise MeshError("a lattice tile carries no symplast cells")
        p_s = ps_sum / ps_area
    else:
        p_s = p_a.copy()

    if flow.w_sp is not None:
        sub_sp = disc.sub_sp
        isx, isy = _tile_index(mesh, sub_sp, eps, n)
        spvals = fem.rt0_cell_values(sub_sp, flow.w_sp, _CENTER)[:, 0, :]
        np.add.at(vsum, (isx, isy), sub_sp.areas[:, None] * spvals)

    return MicroAverages(eps=eps, n=n, v=vsum / eps**2, p_a=p_a, p_s=p_s)


def _field_errors(mesh, sub, v_dofs, p_cells, av):
    """L2(Omega) distances of the averaged extensions from the Darcy fields.

    The tile averages define piecewise-constant fields on Omega; the
    theorem compares those against the homogenized solution, so the
    norm keeps the within-tile variation of the Darcy fields. Requires
    the homogenized cells to nest inside the lattice tiles. Pressures
    are first centred to zero mean over Omega: the two formulations
    gauge their pressures over different regions, and the offset is not
    part of the convergence statement.
    """
    eps, n = av.eps, av.n
    ix, iy = _tile_index(mesh, sub, eps, n)
    covered = np.zeros((n, n))
    np.add.at(covered, (ix, iy), sub.areas)
    if covered.min() <= 0.0:
        raise MeshError("the homogenized mesh does not cover the eps lattice")

    # midedge quadrature is exact: the integrand is quadratic per cell
    vvals = fem.rt0_cell_values(sub, np.asarray(v_dofs))
    dv = vvals - av.v[ix, iy][:, None, :]
    err_v = float(np.sqrt(np.sum(sub.areas / 3.0 * (dv**2).sum(axis=-1).T)))

    total = float(sub.areas.sum())
    p = np.asarray(p_cells)
    p = p - float(sub.areas @ p) / total
    w = eps * eps
    errs = []
    for tile_p in (av.p_a, av.p_s):
        shifted = tile_p - float(w * tile_p.sum()) / total
        diff = shifted[ix, iy] - p
        errs.append(float(np.sqrt(np.sum(sub.areas * diff**2))))
    gap = float(np.sqrt(w * np.sum((av.p_a - av.p_s) ** 2)))
    return err_v, errs[0], errs[1], gap


# ---------------------------------------------------------------------------
# the convergence study


@dataclass
class MicroStudyReport:
    """Error ladder of the fine-to-homogenized comparison.

    `status` is PASS when every error column decreases strictly along
    the ladder (entries below the resolution floor are exempt), FAIL
    otherwise. `observed_order` holds pairwise velocity-error orders,
    with nan in the first row.
    """

    eps: np.ndarray
    err_v: np.ndarray
    err_pa: np.ndarray
    err_ps: np.ndarray
    gap_pa_ps: np.ndarray
    observed_order: np.ndarray
    status: str
    K: np.ndarray
    M: np.ndarray
    residuals: np.ndarray
    energy_balances: np.ndarray

    _COLUMNS = ("eps", "err_v", "err_pa", "err_ps", "gap_pa_ps", "observed_order")

    def rows(self):
        table = np.stack(
            [self.eps, self.err_v, self.err_pa, self.err_ps,
             self.gap_pa_ps, self.observed_order], axis=-1
        )
        return [tuple(row) for row in table]

    def write_csv(self, path):
        write_table_csv(
            path, self._COLUMNS, self.rows(),
            comments=(
                f"status: {self.status}",
                "observed_order: pairwise rate of err_v between ladder rungs",
            ),
        )


def _strictly_decreasing(values, floor=1e-11):
    v = np.asarray(values)
    for a, b in zip(v[:-1], v[1:]):
        if b >= a and b > floor:
            return False
    return True


def convergence_study(eps_values=(0.5, 0.25, 0.125), *, cell_mesh=None,
                      cell_h=0.125, eta=1.0, K_a=1.0, K_sp=2.0,
                      kappa=(2.0, 0.5), delta=(1.0, 0.3), jump=None,
                      v_D=(-1.0, 1.0, 0.0, 0.0), macro_h=1.0 / 16.0,
                      workers=None, csv_path=None):
    """Ladder of fine-scale solves against the homogenized reference.

    Effective K and M come from cell solves on the same unit mesh that
    tiles the fine problems; the homogenized Darcy problem uses the same
    frozen concentration difference and the same through-flow data. Both
    solutions are compressed to eps-cell averages and compared in the
    lattice L2 norm; pressures are centred to lattice mean zero first,
    since the two formulations gauge their pressures over different
    regions. The pressure gap p_a - p_s needs no centring: it is gauge
    free within one solve.

    Non-monotone error columns flag the report FAIL; no exception is
    raised for that. Distinct eps solves run concurrently.
    """
    eps_list = [float(e) for e in eps_values]
    if len(eps_list) == 0:
        raise ParameterError("at least one eps value is required")
    if sorted(eps_list, reverse=True) != eps_list:
        raise ParameterError("eps values must be given coarse to fine")
    for e in eps_list:
        ratio = e / macro_h
        if abs(ratio - round(ratio)) > 1e-9:
            raise ParameterError(
                "macro_h must divide every eps so homogenized cells nest "
                "in the lattice tiles"
            )
    if jump is None:
        jump = default_jump
    if cell_mesh is None:
        cell_mesh = mesh_unit_cell(build_unit_cell(default_unit_cell_spec()), cell_h)

    w1 = solve_permeability_cell(cell_mesh, 1, eta, K_a, K_sp, kappa)
    w2 = solve_permeability_cell(cell_mesh, 2, eta, K_a, K_sp, kappa)
    K = assemble_permeability([w1, w2])
    M = assemble_osmotic_vector(solve_osmotic_cell(cell_mesh, eta, K_a, kappa, delta))

    mmesh = mesh_macro_domain(
        MacroDomainSpec((1.0, 1.0), macro_h, tuple(np.asarray(v_D).tolist()))
    )
    msub = fem.SubMesh(mmesh, np.unique(mmesh.cell_tags))
    v_hom, p_hom = solve_darcy(
        mmesh, K, M, jump(mmesh.vertices), 0.0, v_D, sub=msub
    )

    def one(eps):
        prob = MicroProblem.build(
            cell_mesh, eps, eta=eta, K_a=K_a, K_sp=K_sp,
            kappa=kappa, delta=delta, jump=jump, v_D=v_D,
        )
        sol = solve_micro_flow(prob)
        av = average_onto_macro(sol)
        err_v, err_pa, err_ps, gap = _field_errors(
            mmesh, msub, v_hom, p_hom, av
        )
        return err_v, err_pa, err_ps, gap, sol.residual, sol.energy_balance

    with ThreadPoolExecutor(max_workers=workers or len(eps_list)) as pool:
        results = list(pool.map(one, eps_list))

    err_v, err_pa, err_ps, gap, residuals, balances = map(
        np.asarray, zip(*results)
    )
    eps_arr = np.asarray(eps_list)
    order = np.full(len(eps_list), np.nan)
    for k in range(1, len(eps_list)):
        if err_v[k] > 0 and err_v[k - 1] > 0:
            order[k] = np.log(err_v[k - 1] / err_v[k]) / np.log(
                eps_arr[k - 1] / eps_arr[k]
            )
    ok = all(
        _strictly_decreasing(col)
        for col in (err_v, err_pa, err_ps, gap)
    ) if len(eps_list) > 1 else True
    report = MicroStudyReport(
        eps=eps_arr, err_v=err_v, err_pa=err_pa, err_ps=err_ps,
        gap_pa_ps=gap, observed_order=order,
        status="PASS" if ok else "FAIL",
        K=K, M=M, residuals=residuals, energy_balances=balances,
    )
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
