"""Unit-cell and macro meshes: conformity, tags, periodicity, quality."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissueflow.errors import GeometryError, MeshError
from tissueflow.geometry import (
    CellTag,
    FacetTag,
    MacroDomainSpec,
    PlasmodesmataPatch,
    UnitCellSpec,
    build_unit_cell,
    default_unit_cell_spec,
    mesh_macro_domain,
    mesh_unit_cell,
)

ASYM4 = UnitCellSpec(
    "disk",
    0.3,
    0.15,
    tuple(
        PlasmodesmataPatch(p, 0.07)
        for p in (1.0 / 36, 17.0 / 36, 7.0 / 36, 29.0 / 36)
    ),
)
ROUNDED4 = UnitCellSpec(
    "rounded-square",
    0.3,
    0.15,
    tuple(PlasmodesmataPatch(p, 0.08) for p in (0.0, 0.25, 0.5, 0.75)),
)


@pytest.fixture(scope="module")
def default_mesh():
    return mesh_unit_cell(build_unit_cell(default_unit_cell_spec()), 1.0 / 12)


# ---------------------------------------------------------------------------
# spec examples


def test_interface_facets_on_circle_within_h_squared():
    h = 0.1
    geom = build_unit_cell(UnitCellSpec("disk", 0.30, 0.20))
    mesh = mesh_unit_cell(geom, h)
    gz = mesh.facets_by_tag(FacetTag.GAMMA_Z)
    assert len(gz)
    mids = mesh.vertices[mesh.facet_vertices[gz]].mean(axis=1)
    assert np.abs(geom.curve.sdist(mids)).max() <= h * h
    # facet endpoints sit on the circle exactly
    ends = mesh.vertices[mesh.facet_vertices[gz]].reshape(-1, 2)
    assert np.abs(geom.curve.sdist(ends)).max() < 1e-12


def test_barycenter_tags_match_classifier():
    geom = build_unit_cell(default_unit_cell_spec())
    mesh = mesh_unit_cell(geom, 1.0 / 12)
    assert (mesh.cell_tags == geom.classify(mesh.barycenters())).all()


def test_facet_count_doubles_under_refinement():
    geom = build_unit_cell(default_unit_cell_spec())
    n1 = len(mesh_unit_cell(geom, 1.0 / 12).facets_by_tag(FacetTag.GAMMA_Z))
    n2 = len(mesh_unit_cell(geom, 1.0 / 24).facets_by_tag(FacetTag.GAMMA_Z))
    assert 1.7 <= n2 / n1 <= 2.3


def test_mesh_size_bounds():
    geom = build_unit_cell(default_unit_cell_spec())
    with pytest.raises(MeshError):
        mesh_unit_cell(geom, 0.6)
    with pytest.raises(MeshError):
        mesh_unit_cell(geom, 0.0)
    with pytest.raises(MeshError):
        # channel width 0.10 unresolvable at h = 0.4
        mesh_unit_cell(geom, 0.4)


# ---------------------------------------------------------------------------
# invariants


def suite_meshes():
    yield mesh_unit_cell(build_unit_cell(default_unit_cell_spec()), 1.0 / 12)
    yield mesh_unit_cell(build_unit_cell(ASYM4), 1.0 / 12)
    yield mesh_unit_cell(build_unit_cell(ROUNDED4), 1.0 / 12)
    yield mesh_unit_cell(build_unit_cell(UnitCellSpec("disk", 0.25, 0.2)), 1.0 / 8)
    yield mesh_unit_cell(build_unit_cell(UnitCellSpec("none")), 1.0 / 8)


def test_suite_validates():
    for mesh in suite_meshes():
        mesh.validate()
        assert mesh.min_cell_angle_deg() >= 20.0
        assert mesh.cell_areas().sum() == pytest.approx(1.0, abs=1e-10)


def test_area_fractions_converge_to_analytic():
    geom = build_unit_cell(default_unit_cell_spec())
    for h in (1.0 / 12, 1.0 / 24):
        mesh = mesh_unit_cell(geom, h)
        areas = mesh.cell_areas()
        for tag, exact in (
            (CellTag.Z, geom.area_z),
            (CellTag.AW, geom.area_aw),
            (CellTag.AS, geom.area_as),
        ):
            approx = areas[mesh.cell_tags == int(tag)].sum()
            assert abs(approx - exact) <= h * h


def test_periodic_pairing_is_involution(default_mesh):
    pairs = default_mesh.periodic_vertex_pairs
    for axis in (0, 1):
        rows = pairs[pairs[:, 2] == axis]
        lo, hi = rows[:, 0], rows[:, 1]
        assert len(np.unique(lo)) == len(lo)
        assert len(np.unique(hi)) == len(hi)
        fwd = dict(zip(lo.tolist(), hi.tolist()))
        bwd = dict(zip(hi.tolist(), lo.tolist()))
        for a, b in fwd.items():
            assert bwd[b] == a
        # geometric congruence: translating the low wall by one period lands
        # exactly on the high wall
        shift = np.zeros(2)
        shift[axis] = 1.0
        assert np.array_equal(
            default_mesh.vertices[lo] + shift, default_mesh.vertices[hi]
        )


def test_periodic_facet_pairs_congruent(default_mesh):
    mesh = default_mesh
    for lo, hi, axis in mesh.periodic_facet_pairs:
        vl = mesh.vertices[mesh.facet_vertices[lo]]
        vh = mesh.vertices[mesh.facet_vertices[hi]]
        shift = np.zeros(2)
        shift[axis] = 1.0
        d = min(
            np.abs(vl + shift - vh).max(),
            np.abs(vl[::-1] + shift - vh).max(),
        )
        assert d <= 1e-12 * mesh.diameter()


def test_interface_normals_point_symplast_to_apoplast(default_mesh):
    # the left cell of every interface facet is the symplast-flow side and
    # the stored orientation makes the normal point away from it
    mesh = default_mesh
    bary = mesh.barycenters()
    left_of = {
        int(FacetTag.GAMMA_Z): int(CellTag.Z),
        int(FacetTag.GAMMA_AS): int(CellTag.Z),
        int(FacetTag.GAMMA_AW): int(CellTag.AS),
    }
    normals = mesh.facet_normals()
    mids = mesh.vertices[mesh.facet_vertices].mean(axis=1)
    checked = 0
    for f, tag in enumerate(mesh.facet_tags):
        if int(tag) not in left_of:
            continue
        lc, rc = mesh.facet_cells[f]
        assert mesh.cell_tags[lc] == left_of[int(tag)]
        assert np.dot(normals[f], mids[f] - bary[lc]) > 0
        assert np.dot(normals[f], mids[f] - bary[rc]) < 0
        checked += 1
    assert checked > 0


def test_mirror_symmetric_cell_meshes_exactly_symmetric(default_mesh):
    verts = {(float(x), float(y)) for x, y in default_mesh.vertices}
    for fmap in (
        lambda v: (1.0 - v[0], v[1]),
        lambda v: (v[0], 1.0 - v[1]),
        lambda v: (v[1], v[0]),
    ):
        assert all(fmap(v) in verts for v in verts)


def test_meshing_is_deterministic():
    geom = build_unit_cell(ASYM4)
    m1 = mesh_unit_cell(geom, 1.0 / 12)
    m2 = mesh_unit_cell(geom, 1.0 / 12)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.cells, m2.cells)
    assert np.array_equal(m1.facet_vertices, m2.facet_vertices)
    assert np.array_equal(m1.facet_tags, m2.facet_tags)


def test_unpaired_channel_rejected_at_mesh_time():
    geom = build_unit_cell(
        UnitCellSpec("disk", 0.3, 0.15, (PlasmodesmataPatch(0.0, 0.1),))
    )
    with pytest.raises(GeometryError):
        mesh_unit_cell(geom, 1.0 / 12)


def test_homogeneous_cell_mesh():
    mesh = mesh_unit_cell(build_unit_cell(UnitCellSpec("none")), 1.0 / 8)
    assert (mesh.cell_tags == int(CellTag.AW)).all()
    assert len(mesh.periodic_vertex_pairs)
    mesh.validate()


@given(
    h=st.sampled_from([1.0 / 8, 1.0 / 10, 1.0 / 14, 1.0 / 16]),
    which=st.sampled_from(["default", "asym", "rounded"]),
)
@settings(max_examples=12, deadline=None)
def test_mesh_quality_property(h, which):
    spec = {
        "default": default_unit_cell_spec(),
        "asym": ASYM4,
        "rounded": ROUNDED4,
    }[which]
    if min(p.width for p in spec.plasmodesmata) < 0.6 * h:
        return  # below the mesher's stated resolvability bound
    geom = build_unit_cell(spec)
    mesh = mesh_unit_cell(geom, h)
    assert mesh.min_cell_angle_deg() >= 20.0
    assert (mesh.cell_tags == geom.classify(mesh.barycenters())).all()
    assert mesh.cell_areas().sum() == pytest.approx(1.0, abs=1e-10)


# ---------------------------------------------------------------------------
# macro domain


def test_macro_mesh_counts_and_segments():
    mesh = mesh_macro_domain(MacroDomainSpec(mesh_h=0.25))
    assert len(mesh.cells) >= 32
    assert (mesh.cell_tags == int(CellTag.MACRO)).all()
    ext = mesh.facet_tags == int(FacetTag.EXTERIOR)
    assert set(mesh.facet_segments[ext].tolist()) == {0, 1, 2, 3}
    # each boundary facet lies on its named segment
    mids = mesh.vertices[mesh.facet_vertices[ext]].mean(axis=1)
    seg = mesh.facet_segments[ext]
    assert np.allclose(mids[seg == 0][:, 0], 0.0)
    assert np.allclose(mids[seg == 1][:, 0], 1.0)
    assert np.allclose(mids[seg == 2][:, 1], 0.0)
    assert np.allclose(mids[seg == 3][:, 1], 1.0)
    mesh.validate()


def test_macro_mesh_rectangular_extents():
    mesh = mesh_macro_domain(MacroDomainSpec(extents=(2.0, 1.0), mesh_h=0.25))
    assert mesh.vertices[:, 0].max() == pytest.approx(2.0)
    assert mesh.cell_areas().sum() == pytest.approx(2.0)
    assert mesh.min_cell_angle_deg() >= 20.0
