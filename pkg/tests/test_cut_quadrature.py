import math

import numpy as np
import pytest

from cutrom.background_mesh import build_background_mesh, classify_elements
from cutrom.cut_quadrature import (
    decompose_cut_triangle,
    fluid_area,
    interface_length,
    interface_quadrature,
    per_element_fluid_areas,
    physical_quadrature,
    reference_rules,
    reference_segment_rule,
    reference_triangle_rule,
)
from cutrom.errors import NotCut, SolidElement
from cutrom.geometry import LevelsetFamily, orient_fluid_sign


def monomial_integral_triangle(a, b):
    """Exact integral of x^a y^b over the unit reference triangle."""
    return (math.factorial(a) * math.factorial(b)
            / math.factorial(a + b + 2))


class HalfPlaneLevelset:
    def values(self, x, y):
        return np.asarray(x, dtype=float)


def test_reference_triangle_rule_order1():
    pts, wts = reference_triangle_rule(1)
    assert float(np.sum(wts)) == pytest.approx(0.5, abs=1e-15)


def test_reference_triangle_exactness_against_rational_oracle():
    for order in range(1, 7):
        pts, wts = reference_triangle_rule(order)
        assert np.all(wts > 0.0)
        assert float(np.sum(wts)) == pytest.approx(0.5, abs=1e-14)
        for a in range(order + 1):
            for b in range(order + 1 - a):
                got = float(np.sum(wts * pts[:, 0] ** a * pts[:, 1] ** b))
                assert got == pytest.approx(
                    monomial_integral_triangle(a, b), rel=1e-12, abs=1e-15), \
                    (order, a, b)


def test_reference_triangle_x2y2_order6():
    pts, wts = reference_triangle_rule(6)
    got = float(np.sum(wts * pts[:, 0] ** 2 * pts[:, 1] ** 2))
    assert got == pytest.approx(1.0 / 180.0, rel=1e-13)


def test_reference_segment_rules():
    t, w = reference_segment_rule(3)
    assert float(np.sum(w * t**3)) == pytest.approx(0.25, rel=1e-14)
    for order in range(1, 7):
        t, w = reference_segment_rule(order)
        assert np.all(w > 0.0)
        for p in range(order + 1):
            assert float(np.sum(w * t**p)) == pytest.approx(
                1.0 / (p + 1), rel=1e-13), (order, p)


def test_reference_rules_returns_pair():
    tri, seg = reference_rules(4)
    assert tri[0].shape[1] == 2
    assert seg[0].ndim == 1


def test_decompose_one_fluid_vertex():
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    d = decompose_cut_triangle(tri, [-1.0, 1.0, 1.0])
    assert d.fluid_triangles.shape[0] == 1
    assert d.fluid_area == pytest.approx(0.125, abs=1e-15)
    crossings = {tuple(np.round(p, 12)) for p in d.segment}
    assert crossings == {(0.5, 0.0), (0.0, 0.5)}


def test_decompose_two_fluid_vertices():
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    d = decompose_cut_triangle(tri, [-1.0, -1.0, 1.0])
    assert d.fluid_triangles.shape[0] == 2
    assert d.fluid_area == pytest.approx(0.375, abs=1e-15)


def test_decompose_requires_mixed_signs():
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(NotCut):
        decompose_cut_triangle(tri, [1.0, 1.0, 1.0])


def test_decompose_complement_identity_random():
    rng = np.random.default_rng(42)
    for _ in range(200):
        tri = rng.uniform(-1, 1, size=(3, 2))
        d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        if area < 1e-3:
            continue
        vals = rng.uniform(-1, 1, size=3)
        if np.all(vals > 0) or np.all(vals < 0) or np.any(vals == 0):
            continue
        d_fluid = decompose_cut_triangle(tri, vals)
        d_solid = decompose_cut_triangle(tri, -vals)
        assert d_fluid.fluid_area + d_solid.fluid_area == pytest.approx(
            area, abs=1e-14)
        # segment endpoints sit on the P1 zero line
        jac = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
        grad = np.linalg.solve(jac.T, vals[1:] - vals[0])
        for p in d_fluid.segment:
            chi = vals[0] + grad @ (p - tri[0])
            assert abs(chi) < 1e-13


def test_physical_quadrature_fluid_element():
    mesh = build_background_mesh((0, 0, 1, 1), 0.5)

    class AllFluid:
        def values(self, x, y):
            return np.full_like(np.asarray(x, dtype=float), -1.0)

    cls = classify_elements(mesh, AllFluid())
    rule = physical_quadrature(0, cls, 5)
    area = mesh.triangle_areas()[0]
    assert rule.total_weight == pytest.approx(area, rel=1e-14)
    assert rule.integrate(lambda x, y: np.ones_like(x)) == pytest.approx(area)


def test_physical_quadrature_exactness_on_fluid_element():
    mesh = build_background_mesh((0, 0, 1, 1), 0.5)

    class AllFluid:
        def values(self, x, y):
            return np.full_like(np.asarray(x, dtype=float), -1.0)

    cls = classify_elements(mesh, AllFluid())
    tri = mesh.tri_coords(3)
    jac = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    det = abs(np.linalg.det(jac))
    for order in (2, 4, 5):
        rule = physical_quadrature(3, cls, order)
        for a in range(order + 1):
            for b in range(order + 1 - a):
                got = float(np.sum(rule.weights
                                   * rule.points[:, 0] ** a
                                   * rule.points[:, 1] ** b))
                # exact value via mapped-monomial quadrature of higher degree
                pts6, wts6 = reference_triangle_rule(6)
                phys = tri[0] + pts6 @ jac.T
                ref = float(np.sum(wts6 * det * phys[:, 0] ** a * phys[:, 1] ** b))
                if a + b <= order:
                    assert got == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_solid_element_rejected():
    mesh = build_background_mesh((-2, -1, 2, 1), 0.1)
    ofl = orient_fluid_sign(LevelsetFamily.cylinder(), 0.0, anchor=(0.0, 0.0))
    cls = classify_elements(mesh, ofl)
    solid = cls.solid_ids
    assert len(solid) > 0
    with pytest.raises(SolidElement):
        physical_quadrature(int(solid[0]), cls, 3)
    with pytest.raises(NotCut):
        interface_quadrature(int(cls.fluid_ids[0]), cls, 3)


def test_half_plane_fluid_area_exact():
    mesh = build_background_mesh((-1, -1, 1, 1), 0.3)
    cls = classify_elements(mesh, HalfPlaneLevelset())
    assert fluid_area(cls) == pytest.approx(2.0, abs=1e-9)


def test_half_plane_interface_length():
    mesh = build_background_mesh((-1, -1, 1, 1), 0.3)
    cls = classify_elements(mesh, HalfPlaneLevelset())
    assert interface_length(cls) == pytest.approx(2.0, abs=1e-9)


def _cylinder_classification(h, theta=0.0):
    mesh = build_background_mesh((-2, -1, 2, 1), h)
    ofl = orient_fluid_sign(LevelsetFamily.cylinder(), theta, anchor=(0.0, 0.0))
    return classify_elements(mesh, ofl)


def test_cylinder_area_and_perimeter_convergence():
    # generic obstacle position; theta = 0 aligns the disk mirror-symmetric
    # with the grid and perturbs the coarse-level ratio
    area_exact = 8.0 - np.pi * 0.04
    per_exact = 2.0 * np.pi * 0.2
    area_err = []
    per_err = []
    for h in (0.14, 0.07, 0.035):
        cls = _cylinder_classification(h, theta=0.1)
        area_err.append(abs(fluid_area(cls) - area_exact))
        per_err.append(abs(interface_length(cls) - per_exact))
    # P1-interpolated geometry carries an O(h^2) consistency error
    assert area_err[1] <= 1.5 * 0.07**2
    for errs in (area_err, per_err):
        for lvl in range(2):
            ratio = errs[lvl] / errs[lvl + 1]
            assert 3.5 <= ratio <= 4.5, (errs,)


def test_cylinder_interface_normals_point_into_solid():
    cls = _cylinder_classification(0.07)
    center = np.array([-1.5, 0.0])
    delta = 1e-6 * 0.07
    for e in cls.cut_ids:
        rule = interface_quadrature(int(e), cls, 3)
        assert np.allclose(np.linalg.norm(rule.normals, axis=1), 1.0, atol=1e-12)
        for p, n in zip(rule.points, rule.normals):
            # normal points fluid -> solid, i.e. toward the disk center
            assert np.dot(n, p - center) < 0.0
            chi_plus = cls.oriented.values(*(p + delta * n))
            chi_minus = cls.oriented.values(*(p - delta * n))
            assert chi_plus > chi_minus


def test_additivity_matches_per_element_dump():
    cls = _cylinder_classification(0.14)
    per = per_element_fluid_areas(cls)
    assert float(np.sum(per)) == pytest.approx(fluid_area(cls), rel=1e-13)
    assert np.all(per[cls.solid_ids] == 0.0)
