"""Unit-cell and macro-domain geometry construction.

The Monte-Carlo area oracle uses a jittered stratified grid (one uniform draw
per stratum, fixed seed): same point count as a plain 10^6-draw estimate but
with O(N^-3/4) error, so the 0.5% tolerance tests the geometry and not the
luck of the sampler.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissueflow.errors import CompatibilityError, GeometryError
from tissueflow.geometry import (
    CellTag,
    MacroDomainSpec,
    PlasmodesmataPatch,
    UnitCellSpec,
    build_unit_cell,
    default_unit_cell_spec,
    mesh_macro_domain,
)


def stratified_area(geom, tag, n=1000, seed=1234):
    """Fraction of the unit square classified as `tag`, one sample per
    stratum of an n x n grid (n*n total points)."""
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    pts = (
        np.column_stack([ii.ravel(), jj.ravel()]) + rng.random((n * n, 2))
    ) / n
    tags = geom.classify(pts)
    return np.count_nonzero(tags == int(tag)) / (n * n)


# ---------------------------------------------------------------------------
# build_unit_cell examples


def test_disk_area_exact():
    geom = build_unit_cell(UnitCellSpec("disk", 0.30, 0.20))
    assert geom.area_z == pytest.approx(math.pi * 0.09, abs=1e-15)
    assert geom.area_as == 0.0


def test_overflowing_disk_rejected():
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", 0.60, 0.45))


def test_symplast_touching_boundary_rejected():
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", 0.49, 0.02))
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", 0.5, 0.1))


def test_overlapping_patches_rejected():
    with pytest.raises(GeometryError):
        build_unit_cell(
            UnitCellSpec(
                "disk",
                0.3,
                0.15,
                (PlasmodesmataPatch(0.0, 0.10), PlasmodesmataPatch(0.01, 0.10)),
            )
        )


def test_channel_area_against_monte_carlo():
    # two channels of width 0.05 on the disk cell; analytic |Y_as| must agree
    # with the stratified MC estimate within 0.5%
    geom = build_unit_cell(
        UnitCellSpec(
            "disk",
            0.30,
            0.15,
            (PlasmodesmataPatch(0.0, 0.05), PlasmodesmataPatch(0.5, 0.05)),
        )
    )
    mc = stratified_area(geom, CellTag.AS)
    assert geom.area_as == pytest.approx(mc, rel=5e-3)


def test_rounded_square_areas_against_monte_carlo():
    geom = build_unit_cell(
        UnitCellSpec(
            "rounded-square",
            0.30,
            0.15,
            tuple(PlasmodesmataPatch(p, 0.08) for p in (0.0, 0.25, 0.5, 0.75)),
        )
    )
    a, rho = 0.30, 0.30 / 4.0
    assert geom.area_z == pytest.approx((2 * a) ** 2 - (4 - math.pi) * rho**2)
    assert geom.area_z == pytest.approx(stratified_area(geom, CellTag.Z), rel=5e-3)
    assert geom.area_as == pytest.approx(stratified_area(geom, CellTag.AS), rel=5e-3)


def test_area_fractions_sum_to_one():
    for spec in (
        default_unit_cell_spec(),
        UnitCellSpec("disk", 0.25, 0.2),
        UnitCellSpec("rounded-square", 0.3, 0.15),
        UnitCellSpec("none"),
    ):
        geom = build_unit_cell(spec)
        assert geom.area_z + geom.area_aw + geom.area_as == pytest.approx(
            1.0, abs=1e-10
        )


def test_disconnected_wall_rejected():
    # three parallel channel loops through one axis sever the wall on the
    # periodic tiling
    patches = tuple(
        PlasmodesmataPatch(p, 0.07)
        for p in (0.0, 1.0 / 12, 7.0 / 36, 15.0 / 36, 0.5, 29.0 / 36)
    )
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", 0.3, 0.15, patches))


def test_channel_wider_than_symplast_rejected():
    with pytest.raises(GeometryError):
        build_unit_cell(
            UnitCellSpec("disk", 0.1, 0.2, (PlasmodesmataPatch(0.0, 0.25),))
        )


def test_bad_shape_and_parameters_rejected():
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("hexagon", 0.3, 0.15))
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", -0.1, 0.15))
    with pytest.raises(GeometryError):
        build_unit_cell(UnitCellSpec("disk", 0.3, 0.0))
    with pytest.raises(GeometryError):
        build_unit_cell(
            UnitCellSpec("disk", 0.3, 0.15, (PlasmodesmataPatch(1.5, 0.1),))
        )


def test_classifier_tags():
    geom = build_unit_cell(default_unit_cell_spec())
    tags = geom.classify(
        np.array(
            [
                [0.5, 0.5],  # symplast center
                [0.02, 0.02],  # cell corner: wall
                [0.9, 0.5],  # inside the east channel
                [0.9, 0.62],  # beside the channel: wall
            ]
        )
    )
    assert tags.tolist() == [CellTag.Z, CellTag.AW, CellTag.AS, CellTag.AW]


def test_homogeneous_cell():
    geom = build_unit_cell(UnitCellSpec("none"))
    assert geom.area_z == 0.0 and geom.area_as == 0.0 and geom.area_aw == 1.0
    tags = geom.classify(np.array([[0.5, 0.5], [0.1, 0.9]]))
    assert (tags == int(CellTag.AW)).all()
    assert geom.mirror_x and geom.mirror_y and geom.mirror_diag


def test_mirror_symmetry_detection():
    assert build_unit_cell(default_unit_cell_spec()).mirror_diag
    gEW = build_unit_cell(
        UnitCellSpec(
            "disk",
            0.3,
            0.15,
            (PlasmodesmataPatch(0.0, 0.12), PlasmodesmataPatch(0.5, 0.12)),
        )
    )
    assert gEW.mirror_x and gEW.mirror_y and not gEW.mirror_diag
    gasym = build_unit_cell(
        UnitCellSpec(
            "disk",
            0.3,
            0.15,
            tuple(
                PlasmodesmataPatch(p, 0.07)
                for p in (1.0 / 36, 17.0 / 36, 7.0 / 36, 29.0 / 36)
            ),
        )
    )
    assert not (gasym.mirror_x or gasym.mirror_y or gasym.mirror_diag)


# ---------------------------------------------------------------------------
# property tests


@st.composite
def valid_disk_specs(draw):
    r = draw(st.floats(0.12, 0.38))
    t = draw(st.floats(0.05, 0.5 - r))
    n = draw(st.sampled_from([0, 2, 4]))
    base = (0.05, 0.30, 0.55, 0.80)
    patches = tuple(
        PlasmodesmataPatch(
            base[k] + draw(st.floats(-0.03, 0.03)), draw(st.floats(0.04, 0.065))
        )
        for k in range(n)
    )
    return UnitCellSpec("disk", r, t, patches)


@given(valid_disk_specs())
@settings(max_examples=25, deadline=None)
def test_valid_disk_specs_build(spec):
    geom = build_unit_cell(spec)
    assert geom.area_z == pytest.approx(math.pi * spec.radius**2)
    assert geom.area_z + geom.area_aw + geom.area_as == pytest.approx(1.0, abs=1e-10)
    # the classifier partitions: every sample gets exactly one known tag
    rng = np.random.default_rng(0)
    tags = geom.classify(rng.random((512, 2)))
    assert np.isin(tags, [int(CellTag.Z), int(CellTag.AW), int(CellTag.AS)]).all()
    # channel anchors classify as channel
    for patch in spec.plasmodesmata:
        anchor = geom.curve.point(patch.position)
        outward = geom.curve.normal(patch.position)
        probe = np.asarray(anchor) + 0.02 * np.asarray(outward)
        assert geom.classify(probe[None, :])[0] == int(CellTag.AS)


# ---------------------------------------------------------------------------
# macro domain


def test_macro_compatibility():
    ok = MacroDomainSpec(boundary_flux=(1.0, -1.0, 0.0, 0.0))
    assert ok.net_flux() == pytest.approx(0.0, abs=1e-15)
    mesh_macro_domain(ok)

    bad = MacroDomainSpec(boundary_flux=(1.0, 0.0, 0.0, 0.0))
    with pytest.raises(CompatibilityError):
        mesh_macro_domain(bad)


def test_macro_compatibility_scales_with_extents():
    # unequal side lengths: the compatibility integral weighs each segment by
    # its length
    spec = MacroDomainSpec(extents=(2.0, 1.0), boundary_flux=(1.0, -1.0, 0.0, 0.0))
    assert spec.net_flux() == pytest.approx(0.0, abs=1e-15)
    mesh_macro_domain(spec)
    spec = MacroDomainSpec(extents=(2.0, 1.0), boundary_flux=(0.0, 0.0, 1.0, -0.5))
    with pytest.raises(CompatibilityError):
        mesh_macro_domain(spec)
