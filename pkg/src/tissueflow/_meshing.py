"""Interface-fitted periodic triangulation of curved unit cells.

Strategy: place points exactly on every interface (symplast boundary,
channel sides) and on the cell boundary, fill the rest with a hexagonal
lattice kept clear of the forced features, and take the Delaunay
triangulation. With a protection margin around the forced features every
forced segment is a Gabriel edge, hence present in the triangulation; this
is verified, not assumed, and repaired by midpoint insertion if violated.

Mirror-symmetric cells are meshed on a fundamental domain (half, quarter,
or eighth of the cell) whose points are snapped exactly onto the seam
lines, then unfolded by reflections that are exact in floating point
(1 - x is exact for x in [0.5, 1], maps 1 to 0 and fixes 0.5). The
assembled mesh is therefore exactly mirror-symmetric and exactly periodic,
which the symmetry oracles downstream rely on. Periodic congruence on
asymmetric cells is arranged by subdividing opposite cell edges with a
shared coordinate list.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import Delaunay, cKDTree

from .errors import GeometryError, MeshError
from .geometry import CellTag, FacetTag, SimplicialMesh, UnitCellGeometry

# subdivision target and lattice protection margin, relative to h
_BOUNDARY_FRAC = 0.85
_CLEAR_FRAC = 0.62


# ---------------------------------------------------------------------------
# fundamental domains


class _HalfPlane:
    """Constraint n . x >= c. Seam half-planes are mirror fixed-lines; their
    `snap` puts a nearby point exactly onto the line."""

    def __init__(self, n, c, seam, snap):
        self.n = np.asarray(n, dtype=float)
        self.c = float(c)
        self.seam = seam
        self.snap = snap

    def value(self, p):
        return np.asarray(p) @ self.n - self.c


def _snap_x(x):
    def f(v):
        v = np.array(v, dtype=float)
        v[0] = x
        return v

    return f


def _snap_y(y):
    def f(v):
        v = np.array(v, dtype=float)
        v[1] = y
        return v

    return f


def _snap_diag(v):
    m = 0.5 * (float(v[0]) + float(v[1]))
    return np.array([m, m])


def _mirror_x(p):
    q = p.copy()
    q[:, 0] = 1.0 - q[:, 0]
    return q


def _mirror_y(p):
    q = p.copy()
    q[:, 1] = 1.0 - q[:, 1]
    return q


def _mirror_diag(p):
    return p[:, ::-1].copy()


def _identity(p):
    return p.copy()


def _compose(f, g):
    return lambda p: f(g(p))


class _Domain:
    """Convex fundamental domain with its unfolding transforms: applying
    every (map, parity) to the domain mesh tiles the unit cell exactly once;
    parity -1 marks orientation-reversing maps."""

    def __init__(self, corners, halfplanes, transforms):
        self.corners = np.asarray(corners, dtype=float)
        self.halfplanes = halfplanes
        self.transforms = transforms

    def contains(self, p, tol=1e-12):
        p = np.atleast_2d(p)
        ok = np.ones(len(p), dtype=bool)
        for hp in self.halfplanes:
            ok &= hp.value(p) >= -tol
        return ok


def _pick_domain(geom: UnitCellGeometry) -> _Domain:
    mx, my, md = geom.mirror_x, geom.mirror_y, geom.mirror_diag
    if mx and my and md:
        # eighth wedge {x in [0.5,1], 0.5 <= y <= x}
        hps = [
            _HalfPlane((0, 1), 0.5, True, _snap_y(0.5)),
            _HalfPlane((-1, 0), -1.0, False, _snap_x(1.0)),
            _HalfPlane((1, -1), 0.0, True, _snap_diag),
        ]
        base = [(_identity, 1), (_mirror_diag, -1)]
        quad = base + [(_compose(_mirror_x, f), -s) for f, s in base]
        trans = quad + [(_compose(_mirror_y, f), -s) for f, s in quad]
        return _Domain([(0.5, 0.5), (1, 0.5), (1, 1)], hps, trans)
    if mx and my:
        hps = [
            _HalfPlane((1, 0), 0.0, False, _snap_x(0.0)),
            _HalfPlane((-1, 0), -0.5, True, _snap_x(0.5)),
            _HalfPlane((0, 1), 0.0, False, _snap_y(0.0)),
            _HalfPlane((0, -1), -0.5, True, _snap_y(0.5)),
        ]
        trans = [
            (_identity, 1),
            (_mirror_x, -1),
            (_mirror_y, -1),
            (_compose(_mirror_x, _mirror_y), 1),
        ]
        return _Domain([(0, 0), (0.5, 0), (0.5, 0.5), (0, 0.5)], hps, trans)
    if mx:
        hps = [
            _HalfPlane((1, 0), 0.0, False, _snap_x(0.0)),
            _HalfPlane((-1, 0), -0.5, True, _snap_x(0.5)),
            _HalfPlane((0, 1), 0.0, False, _snap_y(0.0)),
            _HalfPlane((0, -1), -1.0, False, _snap_y(1.0)),
        ]
        return _Domain(
            [(0, 0), (0.5, 0), (0.5, 1), (0, 1)], hps, [(_identity, 1), (_mirror_x, -1)]
        )
    if my:
        hps = [
            _HalfPlane((1, 0), 0.0, False, _snap_x(0.0)),
            _HalfPlane((-1, 0), -1.0, False, _snap_x(1.0)),
            _HalfPlane((0, 1), 0.0, False, _snap_y(0.0)),
            _HalfPlane((0, -1), -0.5, True, _snap_y(0.5)),
        ]
        return _Domain(
            [(0, 0), (1, 0), (1, 0.5), (0, 0.5)], hps, [(_identity, 1), (_mirror_y, -1)]
        )
    hps = [
        _HalfPlane((1, 0), 0.0, False, _snap_x(0.0)),
        _HalfPlane((-1, 0), -1.0, False, _snap_x(1.0)),
        _HalfPlane((0, 1), 0.0, False, _snap_y(0.0)),
        _HalfPlane((0, -1), -1.0, False, _snap_y(1.0)),
    ]
    return _Domain([(0, 0), (1, 0), (1, 1), (0, 1)], hps, [(_identity, 1)])


# ---------------------------------------------------------------------------
# forced features


class _Polyline:
    """Chain of forced points; consecutive pairs must become mesh edges."""

    def __init__(self, points):
        self.points = [np.asarray(p, dtype=float).reshape(2) for p in points]


def _channel_sides(geom):
    """Per channel: the two side lines as (foot point, foot arc parameter,
    exit point on the cell boundary), ordered (tau = -w/2, tau = +w/2).
    Foot coordinates are canonicalized through curve.point so that the
    curve chain and the side chain share them bitwise."""
    out = []
    curve = geom.curve
    for ch in geom.channels:
        sides = []
        for sign in (-1.0, 1.0):
            p0 = ch.anchor + sign * 0.5 * ch.width * ch.t

            def sd(tau):
                return float(curve.sdist(p0 + tau * ch.d))

            lo = 0.0
            while sd(lo) > 0:
                lo -= 0.05
                if lo < -1.0:
                    raise GeometryError("channel side does not meet the symplast")
            tau_foot = brentq(sd, lo, 0.0, xtol=1e-15) if lo < 0 else 0.0
            s_foot = float(np.atleast_1d(curve.project(p0 + tau_foot * ch.d))[0])
            foot = np.asarray(curve.point(s_foot), dtype=float).reshape(2)

            tau_exit = math.inf
            exit_pt = None
            for axis in (0, 1):
                if abs(ch.d[axis]) < 1e-14:
                    continue
                for wall in (0.0, 1.0):
                    tau = (wall - p0[axis]) / ch.d[axis]
                    if 1e-12 < tau < tau_exit:
                        cand = p0 + tau * ch.d
                        other = 1 - axis
                        if -1e-12 <= cand[other] <= 1 + 1e-12:
                            cand[axis] = wall
                            cand[other] = min(max(cand[other], 0.0), 1.0)
                            tau_exit, exit_pt = tau, cand
            if exit_pt is None:
                raise GeometryError("channel does not reach the cell boundary")
            sides.append((foot, s_foot, exit_pt))
        out.append(sides)
    return out


def _canonicalize_exits(side_info):
    """Channel exits on opposite walls that should coincide (a channel must
    continue as a channel in the neighboring cell) are computed through
    different trigonometric expressions and may differ in the last ulp.
    Merge exit coordinates per axis so paired openings share bitwise-equal
    breakpoints; the boundary chains then reuse exactly these values."""
    for axis in (0, 1):
        coords = []
        for sides in side_info:
            for _foot, _s, exit_pt in sides:
                if exit_pt[axis] in (0.0, 1.0):
                    coords.append(float(exit_pt[1 - axis]))
        coords.sort()
        canon = []
        for c in coords:
            if not canon or c - canon[-1] > 1e-9:
                canon.append(c)
        canon = np.asarray(canon)
        if not len(canon):
            continue
        for sides in side_info:
            for _foot, _s, exit_pt in sides:
                if exit_pt[axis] in (0.0, 1.0):
                    k = int(np.argmin(np.abs(canon - exit_pt[1 - axis])))
                    exit_pt[1 - axis] = canon[k]
    return side_info


def _seam_crossings_of_curve(curve, hp):
    """Arc parameters where the symplast boundary crosses a seam line."""
    ss = np.linspace(0.0, 1.0, 1441)
    vals = np.asarray(hp.value(curve.point(ss)), dtype=float)
    found = []
    for i in range(len(ss) - 1):
        if vals[i] == 0.0:
            found.append(float(ss[i]))
        elif vals[i] * vals[i + 1] < 0:
            s_star = brentq(
                lambda s: float(np.atleast_1d(hp.value(curve.point(s)))[0]),
                ss[i],
                ss[i + 1],
                xtol=1e-15,
            )
            found.append(float(s_star))
    return found


def _curve_breakpoints(geom, dom, side_info):
    """Arc parameters where the symplast boundary must carry a vertex:
    channel feet, parameterization corners, seam crossings."""
    curve = geom.curve
    brk = set()
    for sides in side_info:
        for _foot, s_foot, _exit in sides:
            brk.add(s_foot % 1.0)
    cum = getattr(curve, "_cum", None)
    if cum is not None:
        for u in cum:
            brk.add((u / curve.length) % 1.0)
    for hp in dom.halfplanes:
        if hp.seam:
            for s in _seam_crossings_of_curve(curve, hp):
                brk.add(s % 1.0)
    brk = sorted(brk)
    merged = []
    for s in brk:
        if not merged or s - merged[-1] > 1e-9:
            merged.append(s)
    if len(merged) > 1 and (merged[0] + 1.0) - merged[-1] <= 1e-9:
        merged.pop()
    return merged


def _curve_local_ell(curve, s_mid, h):
    """Chord length keeping the chord sagitta below ~0.4 h^2."""
    ell = _BOUNDARY_FRAC * h
    rho = getattr(curve, "r", None)
    if rho is None:
        u = (s_mid % 1.0) * curve.length
        piece = int(np.clip(np.searchsorted(curve._cum, u, side="right") - 1, 0, 8))
        rho = curve.rho if piece in (1, 3, 5, 7) else math.inf
    if math.isfinite(rho):
        ell = min(ell, math.sqrt(3.0 * rho) * h)
    return ell


def _snap_endpoint(dom, v, tol=1e-9):
    """Put a point exactly onto any seam or boundary line it nearly lies on."""
    v = np.asarray(v, dtype=float).reshape(2).copy()
    for hp in dom.halfplanes:
        if abs(float(np.atleast_1d(hp.value(v))[0])) < tol:
            v = hp.snap(v)
    return v


def _build_curve_chains(geom, dom, h, side_info):
    curve = geom.curve
    brk = _curve_breakpoints(geom, dom, side_info)
    if not brk:
        brk = [0.0]
    chains = []
    for k in range(len(brk)):
        s0 = brk[k]
        s_end = brk[(k + 1) % len(brk)]
        s1 = s_end if (len(brk) > 1 and k < len(brk) - 1) else s_end + 1.0
        mid = np.asarray(curve.point(0.5 * (s0 + s1))).reshape(2)
        if not dom.contains(mid)[0]:
            continue
        ell = _curve_local_ell(curve, 0.5 * (s0 + s1), h)
        n = max(1, math.ceil((s1 - s0) * curve.length / ell))
        ss = np.linspace(s0, s1, n + 1)
        pts = [np.asarray(curve.point(s), dtype=float).reshape(2) for s in ss]
        # endpoints must be evaluated at the canonical breakpoint parameters:
        # an endpoint reached through s+1 differs in the last ulp otherwise,
        # which would plant a near-duplicate point at a chain junction
        pts[0] = np.asarray(curve.point(s0), dtype=float).reshape(2)
        pts[-1] = np.asarray(curve.point(s_end), dtype=float).reshape(2)
        pts[0] = _snap_endpoint(dom, pts[0])
        pts[-1] = _snap_endpoint(dom, pts[-1])
        chains.append(_Polyline(pts))
    return chains


def _clip_segment_chain(dom, a, b, ell):
    """Subdivided polyline for the part of segment [a, b] inside the domain,
    crossing points snapped onto the seams; None if empty."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t0, t1 = 0.0, 1.0
    snap0 = snap1 = None
    for hp in dom.halfplanes:
        va = float(np.atleast_1d(hp.value(a))[0])
        vb = float(np.atleast_1d(hp.value(b))[0])
        if va < -1e-12 and vb < -1e-12:
            return None
        if va < -1e-12 or vb < -1e-12:
            t = va / (va - vb)
            if va < 0 and t > t0:
                t0, snap0 = t, hp
            elif vb < 0 and t < t1:
                t1, snap1 = t, hp
    if t1 - t0 < 1e-12:
        return None
    p0 = a + t0 * (b - a)
    p1 = a + t1 * (b - a)
    if snap0 is not None:
        p0 = snap0.snap(p0)
    if snap1 is not None:
        p1 = snap1.snap(p1)
    p0 = _snap_endpoint(dom, p0)
    p1 = _snap_endpoint(dom, p1)
    length = float(np.hypot(*(p1 - p0)))
    if length < 1e-10:
        return None
    n = max(1, math.ceil(length / ell))
    ts = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = p0 * (1 - ts) + p1 * ts
    out = [p0] + [pts[i] for i in range(1, n)] + [p1]
    return _Polyline(out)


def _build_side_chains(geom, dom, h, side_info):
    chains = []
    for ch, sides in zip(geom.channels, side_info):
        ell = min(_BOUNDARY_FRAC * h, max(1.2 * ch.width, 0.3 * h))
        for foot, _s, exit_pt in sides:
            pl = _clip_segment_chain(dom, foot, exit_pt, ell)
            if pl is not None:
                chains.append(pl)
    return chains


def _contiguous_runs(mask):
    runs = []
    i, n = 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _build_boundary_chains(geom, dom, h, side_info):
    """Cell-boundary pieces of the domain boundary. Opposite edges share
    breakpoint lists so the unfolded mesh is periodically congruent even on
    asymmetric cells."""
    ell = _BOUNDARY_FRAC * h
    chains = []
    for axis in (0, 1):
        feats = {0.0, 1.0}
        for sides in side_info:
            for _foot, _s, exit_pt in sides:
                if exit_pt[axis] in (0.0, 1.0):
                    feats.add(float(exit_pt[1 - axis]))
        for hp in dom.halfplanes:
            # seam lines orthogonal to this axis cross both edges
            if hp.seam and hp.n[axis] == 0.0 and hp.n[1 - axis] != 0.0:
                feats.add(hp.c / hp.n[1 - axis])
        merged = [sorted(feats)[0]]
        for t in sorted(feats)[1:]:
            if t - merged[-1] > 1e-9:
                merged.append(t)
        tlist = []
        for k in range(len(merged) - 1):
            t0, t1 = merged[k], merged[k + 1]
            n = max(1, math.ceil((t1 - t0) / ell))
            sub = np.linspace(t0, t1, n + 1)
            tlist.extend(sub[:-1])
        tlist.append(merged[-1])
        tlist = np.asarray(tlist)
        for val in (0.0, 1.0):
            pts = np.empty((len(tlist), 2))
            pts[:, axis] = val
            pts[:, 1 - axis] = tlist
            keep = dom.contains(pts)
            for i0, i1 in _contiguous_runs(keep):
                if i1 - i0 < 1:
                    continue
                seg = [
                    _snap_endpoint(dom, pts[i]) if i in (i0, i1) else pts[i].copy()
                    for i in range(i0, i1 + 1)
                ]
                chains.append(_Polyline(seg))
    return chains


def _edge_halfplane(dom, a, b):
    mid = 0.5 * (np.asarray(a) + np.asarray(b))
    for hp in dom.halfplanes:
        if abs(float(np.atleast_1d(hp.value(mid))[0])) < 1e-12:
            return hp
    return None


def _build_seam_chains(dom, h, existing_chains):
    """Forced rows along the mirror fixed-lines bounding the domain. Points
    of existing chains that already lie on a seam (curve crossings, channel
    feet on the axis, boundary corners) become mandatory breakpoints, reusing
    their exact coordinates."""
    ell = _BOUNDARY_FRAC * h
    pool = []
    seen = set()
    for pl in existing_chains:
        for p in pl.points:
            k = (float(p[0]), float(p[1]))
            if k not in seen:
                seen.add(k)
                pool.append(np.asarray(p, dtype=float))
    chains = []
    nc = len(dom.corners)
    for k in range(nc):
        a = dom.corners[k]
        b = dom.corners[(k + 1) % nc]
        hp = _edge_halfplane(dom, a, b)
        if hp is None or not hp.seam:
            continue
        d = b - a
        length = float(np.hypot(*d))
        dhat = d / length
        mand = [(0.0, np.asarray(a, dtype=float)), (length, np.asarray(b, dtype=float))]
        for p in pool:
            if float(np.atleast_1d(hp.value(p))[0]) == 0.0:
                t = float((p - a) @ dhat)
                if 1e-9 < t < length - 1e-9:
                    mand.append((t, p))
        mand.sort(key=lambda z: z[0])
        merged = [mand[0]]
        for t, p in mand[1:]:
            if t - merged[-1][0] > 1e-9:
                merged.append((t, p))
        pts = []
        for j in range(len(merged) - 1):
            t0, p0 = merged[j]
            t1, p1 = merged[j + 1]
            n = max(1, math.ceil((t1 - t0) / ell))
            pts.append(p0)
            for m in range(1, n):
                t = t0 + (t1 - t0) * m / n
                pts.append(hp.snap(a + t * dhat))
        pts.append(merged[-1][1])
        chains.append(_Polyline(pts))
    return chains


# ---------------------------------------------------------------------------
# lattice fill and triangulation


def _hex_lattice(h):
    dy = h * math.sqrt(3.0) / 2.0
    rows = int(math.ceil(1.0 / dy)) + 2
    cols = int(math.ceil(1.0 / h)) + 2
    pts = []
    for j in range(0, rows):
        y = j * dy
        off = 0.5 * h if j % 2 else 0.0
        for i in range(0, cols):
            pts.append((i * h + off, y))
    return np.asarray(pts)


def _pool_points(chains):
    """Deduplicated point array plus forced-edge index pairs. Points shared
    between chains (feet, seam junctions) coincide bitwise by construction."""
    index = {}
    coords = []
    pairs = []
    for pl in chains:
        prev = None
        for p in pl.points:
            k = (float(p[0]), float(p[1]))
            if k not in index:
                index[k] = len(coords)
                coords.append(np.asarray(p, dtype=float))
            cur = index[k]
            if prev is not None and prev != cur:
                pairs.append((prev, cur))
            prev = cur
    return np.asarray(coords), pairs


def _forced_samples(chains, step):
    out = []
    for pl in chains:
        pts = np.asarray(pl.points)
        out.append(pts)
        for k in range(len(pts) - 1):
            a, b = pts[k], pts[k + 1]
            n = int(np.hypot(*(b - a)) / step)
            if n > 0:
                ts = (np.arange(1, n + 1) / (n + 1))[:, None]
                out.append(a * (1 - ts) + b * ts)
    return np.vstack(out)


def _triangulate_domain(points, forced_pairs, max_rounds=3):
    """Delaunay triangulation containing every forced edge; missing edges are
    repaired by midpoint insertion and retriangulation."""
    pts = points
    pairs = list(forced_pairs)
    for _ in range(max_rounds + 1):
        tri = Delaunay(pts)
        edges = set()
        for simplex in tri.simplices:
            for i, j in ((0, 1), (1, 2), (2, 0)):
                a, b = int(simplex[i]), int(simplex[j])
                edges.add((min(a, b), max(a, b)))
        missing = {(min(a, b), max(a, b)) for a, b in pairs} - edges
        if not missing:
            return pts, tri.simplices, pairs
        extra = []
        new_pairs = []
        for a, b in pairs:
            if (min(a, b), max(a, b)) in missing:
                extra.append(0.5 * (pts[a] + pts[b]))
                m = len(pts) + len(extra) - 1
                new_pairs.extend([(a, m), (m, b)])
            else:
                new_pairs.append((a, b))
        pts = np.vstack([pts, np.asarray(extra)])
        pairs = new_pairs
    raise MeshError("forced interface edges could not be recovered")


def _min_angles(pts, cells):
    p = pts[cells]
    out = np.full(len(cells), 180.0)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ca = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
        out = np.minimum(out, np.degrees(np.arccos(ca)))
    return out


def _edge_midpoint(pts, a, b, curve):
    """Midpoint for splitting forced edge (a, b). When both endpoints sit on
    the interface curve the chord midpoint is projected back onto it, so
    interface facet endpoints stay exactly on the curve. Straight chains
    (seams, walls, channel sides) keep exact alignment: equal coordinates
    average to themselves bitwise."""
    mid = 0.5 * (pts[a] + pts[b])
    if curve is not None:
        on = np.abs(np.asarray(curve.sdist(pts[[a, b]]), dtype=float))
        if on.max() < 1e-9:
            s = float(np.atleast_1d(curve.project(mid))[0])
            return np.asarray(curve.point(s), dtype=float).reshape(2)
    return mid


def _improve_quality(dom, pts, cells, pairs, curve, h, target_deg, rounds=8):
    """Delaunay refinement: insert circumcenters of low-angle triangles, or
    split the nearest forced edge when the circumcenter would crowd one.

    Gaps between finely subdivided interface chains and the cleared lattice
    can leave slivers; circumcenter insertion removes them while the forced
    edges are re-enforced on every retriangulation. A candidate blocked by a
    forced chain means the chain itself is locally too coarse, so that edge
    is split instead. Candidates with small circumradius are skipped so the
    point density stays bounded, and candidates near a symmetry seam are
    snapped onto it so the unfolded mesh keeps its exact mirror property."""
    for _ in range(rounds):
        ang = _min_angles(pts, cells)
        bad = np.nonzero(ang < target_deg)[0]
        if not len(bad):
            break
        parr = np.asarray(pairs)
        ea, eb = pts[parr[:, 0]], pts[parr[:, 1]]
        sample_tree = cKDTree(_pair_samples(pts, parr, h / 3.0))
        cent = pts[cells[bad]].mean(axis=1)
        order = np.lexsort((cent[:, 1], cent[:, 0], ang[bad]))
        accepted = []
        split = {}
        for idx in bad[order]:
            a, b, c = pts[cells[idx][0]], pts[cells[idx][1]], pts[cells[idx][2]]
            d = 2.0 * ((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
            if d == 0.0:
                continue
            ux = ((b - a) @ (b - a)) * (c - a)[1] - ((c - a) @ (c - a)) * (b - a)[1]
            uy = ((c - a) @ (c - a)) * (b - a)[0] - ((b - a) @ (b - a)) * (c - a)[0]
            cc = a + np.array([ux, uy]) / d
            if np.hypot(*(cc - a)) < 0.4 * h:
                continue
            for hp in dom.halfplanes:
                if hp.seam and abs(hp.value(cc[None, :])[0]) < 0.1 * h:
                    cc = hp.snap(cc)
            if not dom.contains(cc[None, :], tol=-1e-9)[0]:
                continue
            if sample_tree.query(cc)[0] < 0.33 * h:
                t = eb - ea
                tt = np.einsum("ij,ij->i", t, t)
                lam = np.clip(
                    np.einsum("ij,ij->i", cc[None, :] - ea, t) / np.maximum(tt, 1e-300),
                    0.0,
                    1.0,
                )
                proj = ea + lam[:, None] * t
                dist = np.hypot(*(cc[None, :] - proj).T)
                e = int(dist.argmin())
                if e not in split and tt[e] > (0.25 * h) ** 2:
                    split[e] = _edge_midpoint(pts, parr[e, 0], parr[e, 1], curve)
                continue
            if any(np.hypot(*(cc - q)) < 0.6 * h for q in accepted):
                continue
            accepted.append(cc)
        if not accepted and not split:
            break
        new_pairs = []
        extra = []
        for e, (i, j) in enumerate(pairs):
            if e in split:
                m = len(pts) + len(extra)
                extra.append(split[e])
                new_pairs.extend([(i, m), (m, j)])
            else:
                new_pairs.append((i, j))
        if extra:
            pts = np.vstack([pts, np.asarray(extra)])
        pairs = new_pairs
        if accepted:
            pts = np.vstack([pts, np.asarray(accepted)])
        pts, cells, pairs = _triangulate_domain(pts, pairs)
    return pts, cells


def _pair_samples(pts, parr, step):
    out = [pts[np.unique(parr)]]
    a, b = pts[parr[:, 0]], pts[parr[:, 1]]
    for k in range(len(parr)):
        n = int(np.hypot(*(b[k] - a[k])) / step)
        if n > 0:
            ts = (np.arange(1, n + 1) / (n + 1))[:, None]
            out.append(a[k] * (1 - ts) + b[k] * ts)
    return np.vstack(out)


# ---------------------------------------------------------------------------
# assembly


def _assemble(dom, pts, cells):
    """Unfold the fundamental-domain mesh over the whole cell and merge
    coincident vertices (bitwise equality: seam and cell-boundary points map
    exactly under the reflections)."""
    all_pts, all_cells = [], []
    off = 0
    for mapf, parity in dom.transforms:
        p = mapf(pts)
        c = cells + off
        if parity < 0:
            c = c[:, [0, 2, 1]]
        all_pts.append(p)
        all_cells.append(c)
        off += len(pts)
    P = np.ascontiguousarray(np.vstack(all_pts))
    C = np.vstack(all_cells)
    view = P.view([("x", np.float64), ("y", np.float64)]).reshape(-1)
    uniq, inverse = np.unique(view, return_inverse=True)
    V = np.stack([uniq["x"], uniq["y"]], axis=-1)
    return V, inverse[C]


def _edge_incidence(cells):
    """Unique edges with their one or two incident cells."""
    edges = np.sort(cells[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(cells)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    uniq, start = np.unique(edges, axis=0, return_index=True)
    counts = np.diff(np.append(start, len(edges)))
    if counts.max(initial=1) > 2:
        raise MeshError("edge shared by more than two cells")
    c1 = owner[start]
    c2 = np.where(counts == 2, owner[np.minimum(start + 1, len(owner) - 1)], -1)
    return uniq, c1, c2


_STOKES_LEFT = {
    frozenset((int(CellTag.Z), int(CellTag.AW))): (int(CellTag.Z), int(FacetTag.GAMMA_Z)),
    frozenset((int(CellTag.Z), int(CellTag.AS))): (int(CellTag.Z), int(FacetTag.GAMMA_AS)),
    frozenset((int(CellTag.AS), int(CellTag.AW))): (int(CellTag.AS), int(FacetTag.GAMMA_AW)),
}


def _extract_facets(verts, cells, tags):
    """Interface and cell-boundary facets of the assembled mesh, oriented so
    the facet normal (t_y, -t_x) points from the free-flow side into the
    porous side, and outward on the cell boundary."""
    uniq, c1, c2 = _edge_incidence(cells)
    boundary = c2 < 0
    differing = (~boundary) & (tags[c1] != tags[np.maximum(c2, 0)])

    fverts, ftags, fcells = [], [], []
    for k in np.flatnonzero(boundary | differing):
        a, b = int(uniq[k, 0]), int(uniq[k, 1])
        if boundary[k]:
            c = int(c1[k])
            va, vb = verts[a], verts[b]
            tag = None
            for axis in (0, 1):
                if va[axis] == vb[axis] and va[axis] in (0.0, 1.0):
                    tag = int(FacetTag.PERIODIC_X) if axis == 0 else int(FacetTag.PERIODIC_Y)
                    outward = 1.0 if va[axis] == 1.0 else -1.0
                    t = vb - va
                    if t[1 - axis] * (1.0 if axis == 0 else -1.0) * outward < 0:
                        a, b = b, a
                    break
            if tag is None:
                raise MeshError("boundary facet does not lie on the cell boundary")
            fverts.append((a, b))
            ftags.append(tag)
            fcells.append((c, -1))
        else:
            t1, t2 = int(tags[c1[k]]), int(tags[c2[k]])
            left_tag, ftag = _STOKES_LEFT[frozenset((t1, t2))]
            left = int(c1[k]) if t1 == left_tag else int(c2[k])
            right = int(c2[k]) if left == int(c1[k]) else int(c1[k])
            cell = cells[left]
            cvert = int(cell[(cell != a) & (cell != b)][0])
            va, vb, vc = verts[a], verts[b], verts[cvert]
            cross = (vb[0] - va[0]) * (vc[1] - va[1]) - (vb[1] - va[1]) * (vc[0] - va[0])
            if cross < 0:
                a, b = b, a
            fverts.append((a, b))
            ftags.append(ftag)
            fcells.append((left, right))
    return (
        np.asarray(fverts, dtype=np.int32).reshape(-1, 2),
        np.asarray(ftags, dtype=np.int32),
        np.asarray(fcells, dtype=np.int32).reshape(-1, 2),
    )


def _periodic_vertex_pairs(verts):
    pairs = []
    for axis in (0, 1):
        lo = np.flatnonzero(verts[:, axis] == 0.0)
        hi = np.flatnonzero(verts[:, axis] == 1.0)
        other = 1 - axis
        lo = lo[np.argsort(verts[lo, other], kind="stable")]
        hi = hi[np.argsort(verts[hi, other], kind="stable")]
        if len(lo) != len(hi) or not np.array_equal(verts[lo, other], verts[hi, other]):
            raise MeshError(f"periodic boundary points not congruent on axis {axis}")
        pairs.extend((int(i), int(j), axis) for i, j in zip(lo, hi))
    return np.asarray(pairs, dtype=np.int32).reshape(-1, 3)


def _periodic_facet_pairs(verts, fverts, ftags, fcells, tags):
    pairs = []
    for axis, tag in ((0, FacetTag.PERIODIC_X), (1, FacetTag.PERIODIC_Y)):
        idx = np.flatnonzero(ftags == int(tag))
        if len(idx) == 0:
            continue
        vals = verts[fverts[idx, 0], axis]
        lo = idx[vals == 0.0]
        hi = idx[vals == 1.0]
        other = 1 - axis
        mids_lo = 0.5 * (verts[fverts[lo, 0], other] + verts[fverts[lo, 1], other])
        mids_hi = 0.5 * (verts[fverts[hi, 0], other] + verts[fverts[hi, 1], other])
        lo = lo[np.argsort(mids_lo, kind="stable")]
        hi = hi[np.argsort(mids_hi, kind="stable")]
        if len(lo) != len(hi) or not np.array_equal(np.sort(mids_lo), np.sort(mids_hi)):
            raise MeshError(f"periodic facets not congruent on axis {axis}")
        for f, g in zip(lo, hi):
            tf = int(tags[fcells[f, 0]])
            tg = int(tags[fcells[g, 0]])
            if tf != tg:
                raise GeometryError(
                    "periodic facet pair carries inconsistent subdomain tags: a "
                    "channel meeting the cell boundary must continue as a channel "
                    "on the opposite side"
                )
            pairs.append((int(f), int(g), axis))
    return np.asarray(pairs, dtype=np.int32).reshape(-1, 3)


# ---------------------------------------------------------------------------
# entry point


def mesh_curved_cell(
    geom: UnitCellGeometry, h: float, min_angle_deg: float = 20.0
) -> SimplicialMesh:
    for ch in geom.channels:
        if ch.width < 0.6 * h:
            raise MeshError(
                f"mesh size h={h} too coarse to resolve channel width {ch.width}"
            )
    if geom.spec.wall_thickness < 0.5 * h:
        raise MeshError(
            f"mesh size h={h} too coarse to resolve wall thickness "
            f"{geom.spec.wall_thickness}"
        )
    dom = _pick_domain(geom)
    side_info = _canonicalize_exits(_channel_sides(geom))
    chains = []
    chains += _build_curve_chains(geom, dom, h, side_info)
    chains += _build_side_chains(geom, dom, h, side_info)
    chains += _build_boundary_chains(geom, dom, h, side_info)
    chains += _build_seam_chains(dom, h, chains)

    pts, forced_pairs = _pool_points(chains)
    tree = cKDTree(_forced_samples(chains, step=h / 3.0))
    lattice = _hex_lattice(h)
    lattice = lattice[dom.contains(lattice, tol=-1e-9)]
    if len(lattice):
        d, _ = tree.query(lattice)
        lattice = lattice[d >= _CLEAR_FRAC * h]
    allpts = np.vstack([pts, lattice]) if len(lattice) else pts

    allpts, cells, forced_pairs = _triangulate_domain(allpts, forced_pairs)
    allpts, cells = _improve_quality(
        dom, allpts, cells, forced_pairs, geom.curve, h, min_angle_deg + 1.5
    )
    p = allpts[cells]
    crossz = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = crossz < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]

    verts, cells = _assemble(dom, allpts, cells)
    tags = geom.classify(verts[cells].mean(axis=1))

    fverts, ftags, fcells = _extract_facets(verts, cells, tags)
    vpairs = _periodic_vertex_pairs(verts)
    fpairs = _periodic_facet_pairs(verts, fverts, ftags, fcells, tags)

    mesh = SimplicialMesh(
        vertices=verts,
        cells=cells,
        cell_tags=tags,
        facet_vertices=fverts,
        facet_tags=ftags,
        facet_cells=fcells,
        facet_segments=np.full(len(ftags), -1, dtype=np.int32),
        periodic_vertex_pairs=vpairs,
        periodic_facet_pairs=fpairs,
        h=h,
        min_angle_deg=min_angle_deg,
        geometry=geom,
    )
    ang = mesh.min_cell_angle_deg()
    if ang < min_angle_deg:
        raise MeshError(
            f"triangulation quality too low: minimum angle {ang:.2f} deg "
            f"(threshold {min_angle_deg} deg) at h={h}"
        )
    return mesh
