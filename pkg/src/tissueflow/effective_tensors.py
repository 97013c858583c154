"""Homogenized coefficients assembled from unit-cell solutions.

The permeability tensor and osmotic vector are volume averages of the
flow cell solutions; the diffusion tensors average the corrected
gradients of the scalar cell solutions; the effective velocity of a
transport side averages the cutoff reconstructed velocity minus the
diffusive drift of its convection corrector. Structural checks
(symmetry, positive definiteness, mixing bounds) live here too, since
they are properties of the assembled coefficients rather than of any
single solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fem as fem
from .cell_problems import (
    CellFlowSolution,
    ScalarCellSolution,
    _QFLUX,
    _transport_submesh,
    solve_convection_cell,
    solve_diffusion_cell,
    solve_osmotic_cell,
    solve_permeability_cell,
)
from .errors import ParameterError, StateError

_SIDES = ("a", "s")


def _ordered_flow_solutions(solutions):
    by_index = {}
    for s in solutions:
        if not isinstance(s, CellFlowSolution):
            raise StateError("flow cell solutions required")
        by_index[s.index] = s
    missing = [i for i in (1, 2) if i not in by_index]
    if missing:
        raise StateError(f"missing flow cell solutions for directions {missing}")
    w1, w2 = by_index[1], by_index[2]
    if w1.disc.mesh is not w2.disc.mesh:
        raise StateError("flow cell solutions come from different meshes")
    return w1, w2


def assemble_permeability(solutions):
    """Permeability tensor: K_ij = average j-component of the i-problem.

    The cell has unit area, so the subdomain integrals are the average.
    """
    w1, w2 = _ordered_flow_solutions(solutions)
    return np.stack([w1.integral(), w2.integral()])


def assemble_osmotic_vector(solution):
    """Osmotic mobility: the volume average of the interface-forced flow."""
    if not isinstance(solution, CellFlowSolution) or solution.index != "osmotic":
        raise StateError("the osmotic cell solution is required")
    return solution.integral()


def assemble_diffusion_tensor(side, solutions, D):
    """A_ij = (1/|Y_l|) int (D_ij + (D grad omega^j)_i) over side l."""
    by_index = {}
    for s in solutions:
        if not isinstance(s, ScalarCellSolution) or s.side != side:
            raise StateError(f"scalar cell solutions for side {side!r} required")
        by_index[s.index] = s
    missing = [i for i in (1, 2) if i not in by_index]
    if missing:
        raise StateError(f"missing diffusion cell solutions for directions {missing}")
    sub = by_index[1].sub
    if sub is not by_index[2].sub and sub.nc != by_index[2].sub.nc:
        raise StateError("diffusion cell solutions come from different meshes")
    Dc = fem.cellwise_tensor(sub, D)
    area = sub.areas.sum()
    A = np.empty((2, 2))
    for j in (1, 2):
        grad = by_index[j].cell_gradients()
        flux = Dc[:, :, j - 1] + np.einsum("cik,ck->ci", Dc, grad)
        A[:, j - 1] = np.einsum("c,ci->i", sub.areas, flux) / area
    return A


def assemble_effective_velocity(side, v_field, z_sol, D, cutoff):
    """Average cutoff velocity minus the corrector drift, one macro point.

    `v_field` must be the quadrature-point array, (nc, 3, 2) or
    (nc, 6, 2), that the convection corrector `z_sol` was solved with;
    the last three rows are the midedge samples whose equal-weight rule
    integrates the cell average exactly through quadratic fields.
    """
    from .membrane_kinetics import velocity_cutoff

    if not isinstance(z_sol, ScalarCellSolution) or z_sol.side != side:
        raise StateError(f"convection corrector for side {side!r} required")
    sub = z_sol.sub
    v = np.asarray(v_field, dtype=np.float64)
    if v.shape not in ((sub.nc, 3, 2), (sub.nc, 6, 2)):
        raise StateError(
            f"velocity samples of shape {v.shape} do not match the corrector mesh"
        )
    H = velocity_cutoff(v, cutoff)
    area = sub.areas.sum()
    mean_H = np.einsum("c,cqd->d", sub.areas / 3.0, H[:, -3:, :]) / area
    Dc = fem.cellwise_tensor(sub, D)
    drift = np.einsum("c,cik,ck->i", sub.areas, Dc, z_sol.cell_gradients()) / area
    return mean_H - drift


@dataclass(frozen=True)
class SpdReport:
    symmetry_defect: float
    eigenvalues: np.ndarray
    symmetric: bool
    positive_definite: bool

    @property
    def spd(self):
        return self.symmetric and self.positive_definite


def check_spd(tensor, sym_tol=1e-8):
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ParameterError("a square tensor is required")
    scale = max(float(np.abs(t).max()), 1e-300)
    defect = float(np.abs(t - t.T).max()) / scale
    ev = np.linalg.eigvalsh(0.5 * (t + t.T))
    return SpdReport(
        symmetry_defect=defect,
        eigenvalues=ev,
        symmetric=defect <= sym_tol,
        positive_definite=bool(ev.min() > 0.0),
    )


def voigt_reuss_bounds(sub, D):
    """Eigenvalue bracket for the effective diffusion tensor of a side.

    Upper bound: area-weighted arithmetic mean of the largest local
    eigenvalue (always valid). Lower bound: weighted harmonic mean of
    the smallest local eigenvalue when the side fills the whole cell;
    a perforated side can be obstructed below any harmonic mean, so
    the lower bound degenerates to zero there.
    """
    Dc = fem.cellwise_tensor(sub, D)
    ev = np.linalg.eigvalsh(0.5 * (Dc + np.swapaxes(Dc, 1, 2)))
    area = sub.areas.sum()
    upper = float(sub.areas @ ev[:, -1]) / area
    full = abs(area - 1.0) < 1e-10  # unit cell has area one
    lower = area / float(sub.areas @ (1.0 / ev[:, 0])) if full else 0.0
    return lower, upper


class VelocityReconstruction:
    """Side velocity at cell quadrature points as a function of the
    macroscopic state: v_l(y; x) = -sum_j w^j_l(y) dp/dx_j + r_l(y) jump_c.

    The osmotic response carries no separate channel field (channel
    water is part of the apoplast continuum there), so its symplast-side
    channel samples are the apoplast values; the flow solution's
    quadrature map encodes that.
    """

    def __init__(self, side, flow_solutions, osmotic_solution, sub=None):
        w1, w2 = _ordered_flow_solutions(flow_solutions)
        if not isinstance(osmotic_solution, CellFlowSolution) or (
            osmotic_solution.index != "osmotic"
        ):
            raise StateError("the osmotic cell solution is required")
        if osmotic_solution.disc.mesh is not w1.disc.mesh:
            raise StateError("cell solutions come from different meshes")
        self.side = side
        self.sub = _transport_submesh(w1.disc.mesh, side) if sub is None else sub
        cells = self.sub.cell_ids
        # vertex-and-midedge samples so corrector solves can check the
        # data flux defect with edgewise-exact (Simpson) rim quadrature
        self.W = np.stack(
            [
                w1.velocity_quadrature(side, cells, bary=_QFLUX),
                w2.velocity_quadrature(side, cells, bary=_QFLUX),
            ],
            axis=-1,
        )  # (nc, 6, 2, j)
        self.R = osmotic_solution.velocity_quadrature(side, cells, bary=_QFLUX)

    def field(self, grad_p, jump_c):
        """Quadrature samples (nc, 6, 2) at one macroscopic point."""
        g = np.asarray(grad_p, dtype=np.float64).reshape(2)
        return -self.W @ g + float(jump_c) * self.R


@dataclass(frozen=True)
class EffectiveCoefficients:
    """The homogenized coefficient set of one unit-cell configuration."""

    K: np.ndarray
    M: np.ndarray
    A_a: np.ndarray
    A_s: np.ndarray
    provenance: dict = field(default_factory=dict)

    def reports(self):
        return {name: check_spd(getattr(self, name)) for name in ("K", "A_a", "A_s")}

    def write_csv(self, directory):
        """One CSV per coefficient; provenance in the header comments."""
        import os

        from ._formats import write_tensor_csv

        comments = [f"{k}: {v}" for k, v in sorted(self.provenance.items())]
        paths = {}
        for name in ("K", "M", "A_a", "A_s"):
            path = os.path.join(directory, f"{name}.csv")
            write_tensor_csv(path, name, getattr(self, name), comments)
            paths[name] = path
        return paths


def compute_effective_coefficients(
    mesh, eta, K_a, K_sp, kappa, delta, D_a, D_s, provenance=None
):
    """Solve every direction-indexed cell problem and assemble K, M, A_l."""
    w = [solve_permeability_cell(mesh, i, eta, K_a, K_sp, kappa) for i in (1, 2)]
    r = solve_osmotic_cell(mesh, eta, K_a, kappa, delta)
    K = assemble_permeability(w)
    M = assemble_osmotic_vector(r)
    A = {}
    for side, D in (("a", D_a), ("s", D_s)):
        sols = [solve_diffusion_cell(mesh, side, i, D) for i in (1, 2)]
        A[side] = assemble_diffusion_tensor(side, sols, D)
    prov = {
        "mesh_h": mesh.h,
        "eta": eta,
        "residual_w1": w[0].residual,
        "residual_w2": w[1].residual,
        "residual_osmotic": r.residual,
    }
    if provenance:
        prov.update(provenance)
    return (
        EffectiveCoefficients(K=K, M=M, A_a=A["a"], A_s=A["s"], provenance=prov),
        {"w": w, "r": r},
    )


def effective_velocity_table(side, reconstruction, points, evaluate, D, cutoff):
    """Hhat at each macroscopic lattice point, one corrector solve apiece.

    `evaluate(x)` must return (grad_p, jump_c) at the point; the result
    is an array (npoints, 2) alongside the worst corrector defect.
    """
    out = np.empty((len(points), 2))
    worst = 0.0
    for k, x in enumerate(points):
        grad_p, jump_c = evaluate(np.asarray(x, dtype=np.float64))
        v = reconstruction.field(grad_p, jump_c)
        z = solve_convection_cell(
            reconstruction.sub.mesh, side, v, D, cutoff
        )
        out[k] = assemble_effective_velocity(side, v, z, D, cutoff)
        worst = max(worst, z.defect)
    return out, worst
