"""Tests for point classification, stratum towers, and Euler counting.

Golden values come from the closed-form geometry of the scene fixtures:
the torus degenerates on two circles with four cusp points on the x3 = 0
plane, the hyperboloid carries one cusp pair, the swallowtail coframe
has a single depth-3 point at the origin, and the sphere pair separates
a well-behaved frame from one whose depth determinant dies identically.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morin.analysis import (
    AnalysisError,
    _farthest_subset,
    _membership,
    check_corank1,
    check_morin,
    classify_point,
    euler_congruence,
    euler_via_morse,
    find_restricted_zeros,
    find_xi_zeros,
    manifold_reaches_boundary,
    nondegeneracy,
    zero_census,
)
from morin.solver import match_point_sets

TORUS_CUSPS = np.array(
    [[-3.0, 3.0, 0.0], [-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [3.0, -3.0, 0.0]]
)
HYPERBOLOID_CUSPS = np.array([[-1.0, -2.0, 0.0], [1.0, 2.0, 0.0]])


# -- pointwise classification -------------------------------------------------


def test_torus_cusp_point_classifies_depth_two(torus_scene):
    cls = classify_point(torus_scene, [3.0, -3.0, 0.0])
    assert cls.kind == "A2" and cls.depth == 2
    assert cls.intersection_dims == (0, 1)


def test_torus_circle_point_classifies_depth_one(torus_scene):
    # x1 = -x2, sqrt(x2^2 + x3^2) = 3: on the outer degeneracy circle
    x2 = 3.0 * math.cos(0.7)
    x3 = 3.0 * math.sin(0.7)
    cls = classify_point(torus_scene, [-x2, x2, x3])
    assert cls.kind == "A1" and cls.depth == 1
    assert cls.intersection_dims == (0,)


def test_chart_boundary_impostor_rejected(torus_scene):
    # chart-2 equations of a badly anchored chain vanish near this point,
    # but a chain rebuilt on the spot shows a clean nonzero determinant
    cls = classify_point(torus_scene, [1.2614e-05, -1.2615e-05, 3.0])
    assert cls.depth == 1


def test_torus_regular_point(torus_scene):
    x = [-2.5 + math.sqrt(0.75), 2.5, 0.0]
    cls = classify_point(torus_scene, x)
    assert cls.kind == "regular" and cls.depth == 0


def test_torus_frame_pole_is_inconclusive(torus_scene):
    cls = classify_point(torus_scene, [0.5, 0.0, 0.0])
    assert cls.kind == "inconclusive"
    assert "finite" in cls.note


def test_hyperboloid_cusps_classify(hyperboloid_scene):
    for p in HYPERBOLOID_CUSPS:
        cls = classify_point(hyperboloid_scene, p)
        assert cls.kind == "A2" and cls.intersection_dims == (0, 1)


def test_quadratic_well_origin_depth_one(quadratic_well_scene):
    cls = classify_point(quadratic_well_scene, [0.0, 0.0])
    assert cls.depth == 1


def test_swallowtail_origin_depth_three(swallowtail_scene):
    cls = classify_point(swallowtail_scene, np.zeros(3))
    assert cls.kind == "A3" and cls.depth == 3
    assert cls.intersection_dims == (0, 1, 2)


def test_classification_serializes(torus_scene):
    d = classify_point(torus_scene, [3.0, -3.0, 0.0]).as_dict()
    assert set(d) == {"x", "kind", "depth", "intersection_dims", "note"}
    assert all(isinstance(v, float) for v in d["x"])


# -- stratum towers -----------------------------------------------------------


def test_torus_first_stratum_is_two_closed_curves(torus_strata):
    curves = torus_strata.curves.get(1, [])
    assert len(curves) == 2
    assert all(c.closed for c in curves)


def test_torus_cusp_golden_points(torus_strata):
    found = np.array([c.x for c in torus_strata.exact_depth(2)])
    report = match_point_sets(found, TORUS_CUSPS, tol=1e-6)
    assert report["bijective"], report


def test_torus_depth_two_intersection_dims(torus_strata):
    for cls in torus_strata.exact_depth(2):
        assert cls.intersection_dims == (0, 1)
    for cls in torus_strata.exact_depth(1):
        assert cls.intersection_dims == (0,)


def test_hyperboloid_strata_golden(hyperboloid_strata):
    curves = hyperboloid_strata.curves.get(1, [])
    assert len(curves) == 2 and not any(c.closed for c in curves)
    found = np.array([c.x for c in hyperboloid_strata.exact_depth(2)])
    assert match_point_sets(found, HYPERBOLOID_CUSPS, tol=1e-6)["bijective"]


# -- corank and fold-chain checks ---------------------------------------------


def test_corank_check_passes_on_torus(torus_scene):
    report = check_corank1(torus_scene)
    assert report["passed"] and not report["rank_violations"]
    assert report["sigma1_points"] > 0


def test_corank_check_passes_on_quadratic_well(quadratic_well_scene):
    report = check_corank1(quadratic_well_scene)
    assert report["passed"] and not report["deep_rank_points"]


def test_torus_is_morin_with_clean_determinants(torus_scene, torus_strata):
    report = check_morin(torus_scene, strata=torus_strata)
    assert report["verdict"] == "morin"
    holds = [w for w in report["witnesses"] if w["reason"] == "conditions hold"]
    assert len(holds) == 4
    dets = sorted(abs(w["stack_det"]) for w in holds)
    # two cusps on each circle; |det| = 128/3 inner, 128 outer
    assert dets[0] == pytest.approx(128.0 / 3.0, rel=1e-6)
    assert dets[-1] == pytest.approx(128.0, rel=1e-6)
    assert all(w["rank_margin"] >= 1e4 for w in holds)


def test_sphere_v_fails_with_identically_zero_determinant(sphere_v_scene):
    report = check_morin(sphere_v_scene)
    assert report["verdict"] == "not_morin"
    reasons = " ".join(w["reason"] for w in report["witnesses"])
    assert "vanishes identically" in reasons and "rank" in reasons


# -- covector zeros -----------------------------------------------------------


def test_torus_zero_census_golden(torus_scene, torus_strata):
    census = zero_census(torus_scene, [1.0, 0.0], strata=torus_strata)
    unrest = census["unrestricted"]
    rest = census["restricted"][1]
    assert len(unrest) == 4 and len(rest) == 8
    expected = np.array(
        [[0.0, 0.0, -3.0], [0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 3.0]]
    )
    found = np.array([r.x for r in unrest])
    assert match_point_sets(found, expected, tol=1e-6)["bijective"]
    assert all(r.nondegenerate == "yes" for r in unrest + rest)
    assert all(r.classification.depth == 1 for r in unrest)
    deep = [r for r in rest if r.classification.depth == 2]
    assert len(deep) == 4


def test_unrestricted_zero_bordered_dets(torus_scene):
    records = find_xi_zeros(torus_scene, [1.0, 0.0])
    records = [nondegeneracy(torus_scene, r, [1.0, 0.0]) for r in records]
    dets = sorted(abs(r.bordered_det) for r in records)
    assert dets[0] == pytest.approx(16.0 / 3.0, rel=1e-6)
    assert dets[-1] == pytest.approx(16.0, rel=1e-6)


def test_nondegeneracy_returns_new_record(torus_scene):
    record = find_xi_zeros(torus_scene, [1.0, 0.0])[0]
    out = nondegeneracy(torus_scene, record, [1.0, 0.0])
    assert out is not record
    assert record.nondegenerate == "inconclusive"
    assert out.nondegenerate == "yes"


def test_restricted_depth_out_of_range_raises(torus_scene):
    with pytest.raises(AnalysisError):
        find_restricted_zeros(torus_scene, 5, [1.0, 0.0])


# -- Euler counting -----------------------------------------------------------


def test_torus_congruence_uses_scene_covector(torus_euler):
    report = torus_euler
    assert report.congruence_holds is True
    assert report.counts == {"unrestricted": 4, "restricted_1": 8, "deepest_2": 4}
    assert report.parities == {"manifold": 0, "strata": {1: 0, 2: 0}}
    assert report.independent["manifold_morse"] == 0
    assert report.independent["first_stratum"] == 0
    assert report.draws[0]["weights"] == [1.0, 0.0]
    assert report.draws[0]["accepted"]


def test_torus_decomposition_consistent(torus_euler):
    block = torus_euler.decomposition[1]
    assert block["consistent"]
    assert block["on_depth_k"] + block["on_depth_k_plus_1"] == block["total"]


def test_hyperboloid_congruence_refuses_open_surface(hyperboloid_scene):
    report = euler_congruence(hyperboloid_scene)
    assert report.congruence_holds is None
    assert any("boundary" in n for n in report.notes)
    with pytest.raises(AnalysisError):
        euler_via_morse(hyperboloid_scene)


def test_boundary_surrogate(torus_scene, hyperboloid_scene):
    assert not manifold_reaches_boundary(torus_scene)
    assert manifold_reaches_boundary(hyperboloid_scene)


# -- helpers ------------------------------------------------------------------


def test_membership_tri_state(torus_scene):
    g = torus_scene.constraints[0]
    on, _ = _membership(torus_scene, g, np.array([3.0, -3.0, 0.0]))
    off, _ = _membership(torus_scene, g, np.array([5.0, 5.0, 5.0]))
    assert on == "yes" and off == "no"


@given(
    st.lists(
        st.tuples(
            st.floats(-10, 10, allow_nan=False), st.floats(-10, 10, allow_nan=False)
        ),
        min_size=1,
        max_size=40,
    ),
    st.integers(min_value=1, max_value=8),
)
@settings(max_examples=80, deadline=None)
def test_farthest_subset_properties(pts, count):
    arr = np.array(pts, dtype=float)
    idx = _farthest_subset(arr, count)
    assert idx and idx[0] == 0
    assert len(idx) == len(set(idx)) <= count
    chosen = arr[idx]
    # greedy spread never picks a duplicate location
    for i in range(len(chosen)):
        for j in range(i + 1, len(chosen)):
            assert np.linalg.norm(chosen[i] - chosen[j]) > 0
