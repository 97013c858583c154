"""Unit-cell and macroscopic domain geometry.

The periodic unit cell Y = (0,1)^2 is partitioned into three subdomains:

* Z   - the symplast (cell interior), a disk or rounded square centered in Y,
        strictly inside the cell; free (Stokes) flow lives here.
* AS  - plasmodesmata channels: constant-width strips anchored on the symplast
        boundary, directed along the outward normal at their anchor, running
        from the symplast boundary all the way to the cell boundary. They carry
        doubled (symplastic and apoplastic) Darcy fields.
* AW  - the wall apoplast: everything else, out to the cell boundary.

Interfaces (always oriented from the symplast side to the apoplast side):

* GAMMA_Z  = boundary between Z and AW (the membrane proper),
* GAMMA_AS = boundary between Z and AS (channel mouths),
* GAMMA_AW = boundary between AS and AW (channel side walls).

The union GAMMA_Z + GAMMA_AS is the full symplast boundary.

This module owns the analytic region classifiers, the area bookkeeping, and
the simplicial meshes (curved cells are triangulated in `_meshing`; rectangles
use structured right-triangle grids, which are non-obtuse and Delaunay).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CompatibilityError, GeometryError, MeshError

__all__ = [
    "CellTag",
    "FacetTag",
    "PlasmodesmataPatch",
    "UnitCellSpec",
    "UnitCellGeometry",
    "MacroDomainSpec",
    "SimplicialMesh",
    "build_unit_cell",
    "mesh_unit_cell",
    "mesh_macro_domain",
    "structured_rectangle_mesh",
    "default_unit_cell_spec",
]

CENTER = np.array([0.5, 0.5])

# Congruence tolerance for periodic vertex identification, relative to the
# cell diameter (double-precision geometric hashing).
PERIODIC_REL_TOL = 1e-12


class CellTag(IntEnum):
    MACRO = 0
    Z = 1
    AW = 2
    AS = 3


class FacetTag(IntEnum):
    GAMMA_Z = 10
    GAMMA_AS = 11
    GAMMA_AW = 12
    PERIODIC_X = 20
    PERIODIC_Y = 21
    EXTERIOR = 30


# ---------------------------------------------------------------------------
# boundary curves


class _Circle:
    """Circle of radius r around the cell center, parameterized by arc-length
    fraction s in [0,1), s = 0 on the positive x axis, counterclockwise."""

    def __init__(self, r: float):
        self.r = r
        self.length = 2.0 * math.pi * r

    def point(self, s):
        ang = 2.0 * math.pi * np.asarray(s)
        return CENTER + self.r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def normal(self, s):
        ang = 2.0 * math.pi * np.asarray(s)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def sdist(self, p):
        q = np.asarray(p) - CENTER
        return np.hypot(q[..., 0], q[..., 1]) - self.r

    def project(self, p):
        q = np.asarray(p) - CENTER
        return (np.arctan2(q[..., 1], q[..., 0]) / (2.0 * math.pi)) % 1.0

    def max_halfwidth(self):
        return self.r


class _RoundedSquare:
    """Axis-aligned rounded square: half-width a, corner radius a/4, centered
    at the cell center. Same arc-length-fraction parameterization convention
    as the circle (s = 0 at the right edge midpoint, counterclockwise)."""

    def __init__(self, a: float):
        self.a = a
        self.rho = 0.25 * a
        self.b = a - self.rho
        self.length = 8.0 * self.b + 2.0 * math.pi * self.rho
        b, rho, quarter = self.b, self.rho, 0.5 * math.pi * self.rho
        # cumulative arc length at the start of each of the nine pieces
        self._cum = np.cumsum(
            [0.0, b, quarter, 2 * b, quarter, 2 * b, quarter, 2 * b, quarter]
        )

    def point(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float)) % 1.0
        u = s * self.length
        b, rho, a = self.b, self.rho, self.a
        out = np.zeros(s.shape + (2,))
        piece = np.searchsorted(self._cum, u, side="right") - 1
        piece = np.clip(piece, 0, 8)
        t = u - self._cum[piece]

        def arc(cx, cy, phi0, t):
            phi = phi0 + t / rho
            return np.stack([cx + rho * np.cos(phi), cy + rho * np.sin(phi)], axis=-1)

        for k in range(9):
            m = piece == k
            if not m.any():
                continue
            tk = t[m]
            if k == 0:
                out[m] = np.stack([np.full_like(tk, a), tk], axis=-1)
            elif k == 1:
                out[m] = arc(b, b, 0.0, tk)
            elif k == 2:
                out[m] = np.stack([b - tk, np.full_like(tk, a)], axis=-1)
            elif k == 3:
                out[m] = arc(-b, b, 0.5 * math.pi, tk)
            elif k == 4:
                out[m] = np.stack([np.full_like(tk, -a), b - tk], axis=-1)
            elif k == 5:
                out[m] = arc(-b, -b, math.pi, tk)
            elif k == 6:
                out[m] = np.stack([-b + tk, np.full_like(tk, -a)], axis=-1)
            elif k == 7:
                out[m] = arc(b, -b, 1.5 * math.pi, tk)
            else:
                out[m] = np.stack([np.full_like(tk, a), -b + tk], axis=-1)
        return CENTER + out

    def normal(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float)) % 1.0
        u = s * self.length
        piece = np.clip(np.searchsorted(self._cum, u, side="right") - 1, 0, 8)
        t = u - self._cum[piece]
        rho = self.rho
        out = np.zeros(s.shape + (2,))
        fixed = {0: (1, 0), 2: (0, 1), 4: (-1, 0), 6: (0, -1), 8: (1, 0)}
        for k in range(9):
            m = piece == k
            if not m.any():
                continue
            if k in fixed:
                out[m] = fixed[k]
            else:
                phi0 = {1: 0.0, 3: 0.5 * math.pi, 5: math.pi, 7: 1.5 * math.pi}[k]
                phi = phi0 + t[m] / rho
                out[m] = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        return out

    def sdist(self, p):
        q = np.abs(np.asarray(p) - CENTER) - self.b
        qp = np.maximum(q, 0.0)
        outside = np.hypot(qp[..., 0], qp[..., 1])
        inside = np.minimum(np.maximum(q[..., 0], q[..., 1]), 0.0)
        return outside + inside - self.rho

    def project(self, p):
        q = np.atleast_2d(np.asarray(p, dtype=float)) - CENTER
        qx, qy = q[..., 0], q[..., 1]
        b, rho = self.b, self.rho
        L = self.length
        cum = self._cum
        s = np.zeros(qx.shape)

        right = (qx >= np.abs(qy)) | ((qx > b) & (np.abs(qy) <= b))
        top = (qy > np.abs(qx)) | ((qy > b) & (np.abs(qx) <= b))
        left = (-qx > np.abs(qy)) | ((qx < -b) & (np.abs(qy) <= b))
        bottom = (-qy >= np.abs(qx)) | ((qy < -b) & (np.abs(qx) <= b))
        ne = (qx > b) & (qy > b)
        nw = (qx < -b) & (qy > b)
        sw = (qx < -b) & (qy < -b)
        se = (qx > b) & (qy < -b)
        corner = ne | nw | sw | se

        yc = np.clip(qy, -b, b)
        xc = np.clip(qx, -b, b)
        m = right & ~corner
        s[m] = np.where(yc[m] >= 0, yc[m], L + yc[m])
        m = top & ~corner
        s[m] = cum[2] + (b - xc[m])
        m = left & ~corner
        s[m] = cum[4] + (b - yc[m])
        m = bottom & ~corner
        s[m] = cum[6] + (xc[m] + b)
        if corner.any():
            phi = np.zeros(qx.shape)
            phi[ne] = np.arctan2(qy[ne] - b, qx[ne] - b)
            phi[nw] = np.arctan2(qy[nw] - b, qx[nw] + b)
            phi[sw] = np.arctan2(qy[sw] + b, qx[sw] + b) % (2 * math.pi)
            phi[se] = np.arctan2(qy[se] + b, qx[se] - b) % (2 * math.pi)
            s[ne] = cum[1] + rho * phi[ne]
            s[nw] = cum[3] + rho * (phi[nw] - 0.5 * math.pi)
            s[sw] = cum[5] + rho * (phi[sw] - math.pi)
            s[se] = cum[7] + rho * (phi[se] - 1.5 * math.pi)
        s = (s / L) % 1.0
        if np.asarray(p).ndim == 1:
            return s[0]
        return s

    def max_halfwidth(self):
        return self.b


# ---------------------------------------------------------------------------
# spec types


@dataclass(frozen=True)
class PlasmodesmataPatch:
    """One channel: `position` is the arc-length fraction of the symplast
    boundary locating its anchor; `width` is the strip width in cell units."""

    position: float
    width: float


@dataclass(frozen=True)
class UnitCellSpec:
    """Parameters of the periodic unit cell (cell size normalized to 1).

    `symplast_shape` is "disk", "rounded-square", or "none" (a degenerate
    homogeneous cell that is pure wall apoplast, used for analytic checks).
    `radius` is the disk radius or rounded-square half-width as a fraction of
    the cell size. `wall_thickness` is the guaranteed thickness of the
    apoplast band around the symplast (validation: the band must fit inside
    the cell)."""

    symplast_shape: str = "disk"
    radius: float = 0.3
    wall_thickness: float = 0.15
    plasmodesmata: tuple[PlasmodesmataPatch, ...] = ()


@dataclass(frozen=True)
class MacroDomainSpec:
    """Rectangular macroscopic domain [0,Lx] x [0,Ly] with mesh size h and a
    piecewise-constant normal-velocity value per boundary segment
    (left, right, bottom, top)."""

    extents: tuple[float, float] = (1.0, 1.0)
    mesh_h: float = 1.0 / 16.0
    boundary_flux: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    SEGMENTS = ("left", "right", "bottom", "top")

    def segment_lengths(self):
        lx, ly = self.extents
        return np.array([ly, ly, lx, lx])

    def net_flux(self) -> float:
        return float(np.dot(self.boundary_flux, self.segment_lengths()))


def default_unit_cell_spec() -> UnitCellSpec:
    """The fourfold-symmetric reference cell: disk with four axis-aligned
    plasmodesmata channels."""
    return UnitCellSpec(
        symplast_shape="disk",
        radius=0.3,
        wall_thickness=0.15,
        plasmodesmata=tuple(
            PlasmodesmataPatch(position=p, width=0.10) for p in (0.0, 0.25, 0.5, 0.75)
        ),
    )


# ---------------------------------------------------------------------------
# channels


class _Channel:
    """Constant-width strip from the symplast boundary to the cell boundary."""

    def __init__(self, curve, patch: PlasmodesmataPatch):
        self.patch = patch
        self.anchor = np.asarray(curve.point(patch.position), dtype=float).reshape(2)
        self.d = np.asarray(curve.normal(patch.position), dtype=float).reshape(2)
        self.t = np.array([-self.d[1], self.d[0]])
        self.width = patch.width

    def contains(self, p, sdist):
        """Membership among points p with symplast signed distance `sdist`."""
        q = np.asarray(p) - self.anchor
        tau = q @ self.t
        ahead = (np.asarray(p) - CENTER) @ self.d
        return (sdist > 0) & (np.abs(tau) <= 0.5 * self.width) & (ahead > 0)


# ---------------------------------------------------------------------------
# geometry object


@dataclass(frozen=True)
class UnitCellGeometry:
    """Analytic description of the unit cell: classifiers, interface
    parameterizations, area fractions, and symmetry flags."""

    spec: UnitCellSpec
    curve: object  # _Circle | _RoundedSquare | None
    channels: tuple[_Channel, ...]
    area_z: float
    area_aw: float
    area_as: float
    mirror_x: bool
    mirror_y: bool
    mirror_diag: bool

    @property
    def area_fractions(self):
        return {"Y_z": self.area_z, "Y_aw": self.area_aw, "Y_as": self.area_as}

    def classify(self, points) -> np.ndarray:
        """Subdomain tag for each point of an (n,2) array."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        tags = np.full(p.shape[0], int(CellTag.AW), dtype=np.int32)
        if self.curve is None:
            return tags
        sd = self.curve.sdist(p)
        tags[sd < 0] = int(CellTag.Z)
        for ch in self.channels:
            tags[ch.contains(p, sd)] = int(CellTag.AS)
        return tags

    def channel_mask(self, points) -> np.ndarray:
        """(n_points, n_channels) boolean membership matrix."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        sd = self.curve.sdist(p)
        return np.stack([ch.contains(p, sd) for ch in self.channels], axis=1)


def _patch_positions_invariant(patches, mapping) -> bool:
    if not patches:
        return True
    ref = sorted((round(p.position % 1.0, 12), round(p.width, 12)) for p in patches)
    img = sorted((round(mapping(p.position) % 1.0, 12), round(p.width, 12)) for p in patches)
    return all(
        abs(a[0] - b[0]) < 1e-9 and abs(a[1] - b[1]) < 1e-12 for a, b in zip(ref, img)
    )


def _clip_polygon_halfplane(poly, point, normal):
    """Sutherland-Hodgman clip of polygon `poly` by {x : (x-point).normal >= 0}."""
    if len(poly) == 0:
        return poly
    vals = (poly - point) @ normal
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        vi, vj = vals[i], vals[j]
        if vi >= 0:
            out.append(poly[i])
        if (vi > 0) != (vj > 0) and vi != vj:
            t = vi / (vi - vj)
            if 0.0 < t < 1.0 or (vi >= 0) != (vj >= 0):
                out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.asarray(out) if out else np.zeros((0, 2))


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _channel_area(curve, ch: _Channel) -> float:
    """Exact (disk) or near-exact (rounded square) area of one channel."""
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    poly = _clip_polygon_halfplane(square, ch.anchor - 0.5 * ch.width * ch.t, ch.t)
    poly = _clip_polygon_halfplane(poly, ch.anchor + 0.5 * ch.width * ch.t, -ch.t)
    poly = _clip_polygon_halfplane(poly, CENTER, ch.d)
    strip_area = _polygon_area(poly)

    b = 0.5 * ch.width
    if isinstance(curve, _Circle):
        r = curve.r
        inner = b * math.sqrt(r * r - b * b) + r * r * math.asin(b / r)
    else:
        # numeric cross-section integral: for each tangential offset tau the
        # ray from the center along the channel direction exits the shape at
        # X_exit(tau); integrate X_exit over the strip width
        from scipy.optimize import brentq

        def x_exit(tau):
            def f(x):
                pt = CENTER + x * ch.d + tau * ch.t
                return float(curve.sdist(pt))

            return brentq(f, 0.0, 0.75, xtol=1e-14)

        taus = np.linspace(-b, b, 513)
        vals = np.array([x_exit(t) for t in taus])
        inner = float(np.trapezoid(vals, taus))
    return strip_area - inner


def _grid_connectivity_ok(geom: UnitCellGeometry, n: int = 384) -> tuple[bool, bool]:
    """(wall connected on the torus, symplast+channels connected in the cell),
    judged on an n x n pixel classification."""
    from scipy.ndimage import label

    xs = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
    tags = geom.classify(pts).reshape(n, n)

    def n_components(mask, periodic):
        lab, k = label(mask)
        if k == 0:
            return 0
        parent = list(range(k + 1))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        if periodic:
            for a, b in zip(lab[0, :], lab[-1, :]):
                if a and b:
                    union(a, b)
            for a, b in zip(lab[:, 0], lab[:, -1]):
                if a and b:
                    union(a, b)
        return len({find(i) for i in range(1, k + 1)})

    wall_ok = n_components(tags == int(CellTag.AW), periodic=True) == 1
    symp_ok = (
        n_components((tags == int(CellTag.Z)) | (tags == int(CellTag.AS)), periodic=False)
        <= 1
    )
    return wall_ok, symp_ok


def build_unit_cell(spec: UnitCellSpec) -> UnitCellGeometry:
    """Validate the spec and construct classifiers, interface
    parameterizations, and area fractions."""
    shape = spec.symplast_shape
    if shape not in ("disk", "rounded-square", "none"):
        raise GeometryError(f"unknown symplast_shape {shape!r}")

    if shape == "none":
        if spec.plasmodesmata:
            raise GeometryError("a homogeneous cell cannot carry plasmodesmata")
        return UnitCellGeometry(
            spec=spec, curve=None, channels=(), area_z=0.0, area_aw=1.0,
            area_as=0.0, mirror_x=True, mirror_y=True, mirror_diag=True,
        )

    r, t = spec.radius, spec.wall_thickness
    if not (0.0 < r < 0.5):
        raise GeometryError(
            f"symplast radius {r} must lie in (0, 0.5): the symplast boundary "
            "must stay strictly inside the cell"
        )
    if t <= 0.0:
        raise GeometryError(f"wall_thickness {t} must be positive")
    if r + t > 0.5 + 1e-12:
        raise GeometryError(
            f"symplast radius {r} plus wall thickness {t} overflows the cell "
            "(must satisfy radius + wall_thickness <= 0.5)"
        )

    curve = _Circle(r) if shape == "disk" else _RoundedSquare(r)

    channels = []
    for patch in spec.plasmodesmata:
        if not (0.0 <= patch.position < 1.0):
            raise GeometryError(f"patch position {patch.position} outside [0,1)")
        if patch.width <= 0.0:
            raise GeometryError(f"patch width {patch.width} must be positive")
        if 0.5 * patch.width >= 0.95 * curve.max_halfwidth():
            raise GeometryError(
                f"patch width {patch.width} too large for the symplast shape"
            )
        channels.append(_Channel(curve, patch))
    channels = tuple(channels)

    if shape == "disk":
        area_z = math.pi * r * r
    else:
        rho = 0.25 * r
        area_z = (2 * r) ** 2 - (4.0 - math.pi) * rho * rho

    area_as = sum(_channel_area(curve, ch) for ch in channels)
    area_aw = 1.0 - area_z - area_as

    geom = UnitCellGeometry(
        spec=spec, curve=curve, channels=channels,
        area_z=area_z, area_aw=area_aw, area_as=area_as,
        mirror_x=_patch_positions_invariant(spec.plasmodesmata, lambda s: 0.5 - s),
        mirror_y=_patch_positions_invariant(spec.plasmodesmata, lambda s: -s),
        mirror_diag=_patch_positions_invariant(spec.plasmodesmata, lambda s: 0.25 - s),
    )

    if len(channels) >= 2:
        # channels must be pairwise disjoint; membership is cheap, so test it
        # on a fine deterministic grid
        n = 512
        xs = (np.arange(n) + 0.5) / n
        xx, yy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        claims = geom.channel_mask(pts).sum(axis=1)
        if int(claims.max(initial=0)) > 1:
            raise GeometryError("plasmodesmata patches overlap")

    wall_ok, symp_ok = _grid_connectivity_ok(geom)
    if not wall_ok:
        raise GeometryError("wall region is disconnected (on the periodic tiling)")
    if not symp_ok:
        raise GeometryError("symplast plus plasmodesmata region is disconnected")
    return geom


# ---------------------------------------------------------------------------
# meshes


@dataclass
class SimplicialMesh:
    """Conforming triangle mesh with subdomain and interface tags.

    `facet_vertices` rows are oriented so that `facet_cells[:, 0]` (the left
    cell) is the symplast side on GAMMA_Z / GAMMA_AS facets and the channel
    side on GAMMA_AW facets; the facet normal (t_y, -t_x) then points from
    the Stokes side into the Darcy side. `periodic_vertex_pairs` rows are
    (low-side vertex, high-side vertex, axis)."""

    vertices: np.ndarray
    cells: np.ndarray
    cell_tags: np.ndarray
    facet_vertices: np.ndarray
    facet_tags: np.ndarray
    facet_cells: np.ndarray
    facet_segments: np.ndarray
    periodic_vertex_pairs: np.ndarray
    periodic_facet_pairs: np.ndarray
    h: float
    min_angle_deg: float = 20.0
    geometry: object = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int32)
        self.cell_tags = np.ascontiguousarray(self.cell_tags, dtype=np.int32)
        self.facet_vertices = np.ascontiguousarray(self.facet_vertices, dtype=np.int32).reshape(-1, 2)
        self.facet_tags = np.ascontiguousarray(self.facet_tags, dtype=np.int32)
        self.facet_cells = np.ascontiguousarray(self.facet_cells, dtype=np.int32).reshape(-1, 2)
        self.facet_segments = np.ascontiguousarray(self.facet_segments, dtype=np.int32)
        self.periodic_vertex_pairs = np.ascontiguousarray(
            self.periodic_vertex_pairs, dtype=np.int32
        ).reshape(-1, 3)
        self.periodic_facet_pairs = np.ascontiguousarray(
            self.periodic_facet_pairs, dtype=np.int32
        ).reshape(-1, 3)

    # -- derived quantities -------------------------------------------------

    def cell_coords(self):
        return self.vertices[self.cells]

    def cell_areas(self):
        p = self.cell_coords()
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def barycenters(self):
        return self.cell_coords().mean(axis=1)

    def facet_lengths(self):
        d = self.vertices[self.facet_vertices[:, 1]] - self.vertices[self.facet_vertices[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def facet_normals(self):
        """Unit normals, pointing from the left cell into the right cell."""
        d = self.vertices[self.facet_vertices[:, 1]] - self.vertices[self.facet_vertices[:, 0]]
        n = np.stack([d[:, 1], -d[:, 0]], axis=-1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def min_cell_angle_deg(self) -> float:
        p = self.cell_coords()
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = (a * b).sum(axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angles))

    def subdomain_cells(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.cell_tags == int(tag))

    def facets_by_tag(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.facet_tags == int(tag))

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    # -- invariants ----------------------------------------------------------

    def validate(self):
        areas = self.cell_areas()
        if (areas <= 0).any():
            raise MeshError("mesh contains non-positively-oriented cells")
        known = {int(CellTag.MACRO), int(CellTag.Z), int(CellTag.AW), int(CellTag.AS)}
        if not set(np.unique(self.cell_tags)).issubset(known):
            raise MeshError("unknown subdomain tags present")
        ang = self.min_cell_angle_deg()
        if ang < self.min_angle_deg - 1e-9:
            raise MeshError(
                f"minimum cell angle {ang:.2f} deg below threshold "
                f"{self.min_angle_deg} deg"
            )
        interface = np.isin(
            self.facet_tags,
            [int(FacetTag.GAMMA_Z), int(FacetTag.GAMMA_AS), int(FacetTag.GAMMA_AW)],
        )
        if interface.any():
            fc = self.facet_cells[interface]
            if (fc < 0).any():
                raise MeshError("interface facet with missing neighbor cell")
            same = self.cell_tags[fc[:, 0]] == self.cell_tags[fc[:, 1]]
            if same.any():
                raise MeshError("interface facet between equal subdomain tags")
        tol = PERIODIC_REL_TOL * self.diameter()
        for i, j, axis in self.periodic_vertex_pairs:
            a = self.vertices[i].copy()
            b = self.vertices[j].copy()
            span = self.vertices[:, axis].max() - self.vertices[:, axis].min()
            a[axis] += span
            if np.abs(a - b).max() > tol:
                raise MeshError("periodic vertex pair is not congruent")
        return self


def structured_rectangle_mesh(
    nx: int,
    ny: int,
    extents=(1.0, 1.0),
    tag: int = int(CellTag.MACRO),
    periodic: bool = False,
) -> SimplicialMesh:
    """Right-triangle grid on [0,Lx] x [0,Ly]; all diagonals parallel, so the
    mesh is non-obtuse and (weakly) Delaunay. Boundary facets are tagged
    EXTERIOR with segment ids (left, right, bottom, top) = (0, 1, 2, 3), or
    PERIODIC_X / PERIODIC_Y when `periodic` is set."""
    lx, ly = extents
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel()], axis=-1)

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    cells = np.asarray(cells, dtype=np.int32)
    ncell = len(cells)

    facet_v, facet_tag, facet_cell, facet_seg = [], [], [], []

    def cell_of(i, j, upper):
        return 2 * (i * ny + j) + (1 if upper else 0)

    for j in range(ny):  # left x=0 and right x=lx
        facet_v.append((vid(0, j + 1), vid(0, j)))
        facet_cell.append((cell_of(0, j, True), -1))
        facet_v.append((vid(nx, j), vid(nx, j + 1)))
        facet_cell.append((cell_of(nx - 1, j, False), -1))
        if periodic:
            facet_tag += [int(FacetTag.PERIODIC_X)] * 2
            facet_seg += [-1, -1]
        else:
            facet_tag += [int(FacetTag.EXTERIOR)] * 2
            facet_seg += [0, 1]
    for i in range(nx):  # bottom y=0 and top y=ly
        facet_v.append((vid(i, 0), vid(i + 1, 0)))
        facet_cell.append((cell_of(i, 0, False), -1))
        facet_v.append((vid(i + 1, ny), vid(i, ny)))
        facet_cell.append((cell_of(i, ny - 1, True), -1))
        if periodic:
            facet_tag += [int(FacetTag.PERIODIC_Y)] * 2
            facet_seg += [-1, -1]
        else:
            facet_tag += [int(FacetTag.EXTERIOR)] * 2
            facet_seg += [2, 3]

    pairs = []
    fpairs = []
    if periodic:
        for j in range(ny + 1):
            pairs.append((vid(0, j), vid(nx, j), 0))
        for i in range(nx + 1):
            pairs.append((vid(i, 0), vid(i, ny), 1))
        # facet list order above: per j the left facet then the right facet
        for j in range(ny):
            fpairs.append((2 * j, 2 * j + 1, 0))
        off = 2 * ny
        for i in range(nx):
            fpairs.append((off + 2 * i, off + 2 * i + 1, 1))

    mesh = SimplicialMesh(
        vertices=verts,
        cells=cells,
        cell_tags=np.full(ncell, int(tag), dtype=np.int32),
        facet_vertices=np.asarray(facet_v, dtype=np.int32),
        facet_tags=np.asarray(facet_tag, dtype=np.int32),
        facet_cells=np.asarray(facet_cell, dtype=np.int32),
        facet_segments=np.asarray(facet_seg, dtype=np.int32),
        periodic_vertex_pairs=np.asarray(pairs, dtype=np.int32).reshape(-1, 3),
        periodic_facet_pairs=np.asarray(fpairs, dtype=np.int32).reshape(-1, 3),
        h=max(lx / nx, ly / ny),
        min_angle_deg=20.0,
    )
    return mesh.validate()


def mesh_unit_cell(geom: UnitCellGeometry, h: float, min_angle_deg: float = 20.0) -> SimplicialMesh:
    """Triangulate the unit cell: interface-fitted, periodic-congruent, tagged.

    Policy for coarse resolutions: h outside (0, 0.5), or h too coarse to
    resolve the wall band or the channel widths, raises MeshError."""
    if not (0.0 < h < 0.5):
        raise MeshError(f"mesh size h={h} outside the supported range (0, 0.5)")
    if geom.curve is None:
        n = max(2, round(1.0 / h))
        mesh = structured_rectangle_mesh(n, n, (1.0, 1.0), tag=int(CellTag.AW), periodic=True)
        mesh.geometry = geom
        mesh.h = 1.0 / n
        return mesh
    from ._meshing import mesh_curved_cell

    mesh = mesh_curved_cell(geom, h, min_angle_deg)
    mesh.geometry = geom
    return mesh.validate()


def mesh_macro_domain(spec: MacroDomainSpec) -> SimplicialMesh:
    """Structured mesh of the macroscopic rectangle with segment-tagged
    boundary facets; checks the Darcy compatibility of the boundary data."""
    lx, ly = spec.extents
    if lx <= 0 or ly <= 0:
        raise GeometryError(f"macro extents {spec.extents} must be positive")
    if not (0.0 < spec.mesh_h <= min(lx, ly)):
        raise MeshError(f"macro mesh size {spec.mesh_h} does not resolve {spec.extents}")
    scale = max(abs(v) for v in spec.boundary_flux) * (lx + ly) or 1.0
    if abs(spec.net_flux()) > 1e-12 * scale:
        raise CompatibilityError(
            f"boundary normal velocities violate the zero-net-flux "
            f"compatibility condition (net flux {spec.net_flux():.3e})"
        )
    nx = max(1, round(lx / spec.mesh_h))
    ny = max(1, round(ly / spec.mesh_h))
    mesh = structured_rectangle_mesh(nx, ny, (lx, ly))
    mesh.h = max(lx / nx, ly / ny)
    return mesh.validate()
