import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galns.spectral import (GradientPart, RectGeometry, SpectralField,
                            field_tables, gauss_legendre_grid, kbar,
                            leray_project)


def quad_dot(u_eval, v_eval, geom, npts=40):
    X1, X2, W = gauss_legendre_grid(geom, npts)
    u1, u2 = u_eval(X1, X2)
    v1, v2 = v_eval(X1, X2)
    return float(np.sum(W * (u1 * v1 + u2 * v2)))


def test_kbar_square_symmetric():
    assert kbar((1, 1), RectGeometry(math.pi, math.pi)) == pytest.approx(-2.0, abs=1e-14)


def test_kbar_unit_square():
    assert kbar((2, 3), RectGeometry(1, 1)) == pytest.approx(-13 * math.pi**2, rel=1e-15)


def test_kbar_rational_geometry():
    # oracle: exact rational evaluation of the defining formula
    assert kbar((1, 2), RectGeometry(2, 3)) == pytest.approx(-25 * math.pi**2 / 36, rel=1e-15)


def test_eval_velocity_boundary_normal_vanishes():
    g = RectGeometry(1.5, 2.5)
    u = SpectralField(g, {(1, 1): 1.0})
    x2 = np.linspace(0, g.b, 7)
    v1, v2 = u.eval_velocity(np.zeros_like(x2), x2)
    assert np.allclose(v1, 0.0)
    assert np.allclose(v2, (math.pi / g.a) * np.sin(math.pi * x2 / g.b))


def test_eval_velocity_empty_field():
    u = SpectralField(RectGeometry(1, 1), {})
    v1, v2 = u.eval_velocity(0.3, 0.7)
    assert v1 == 0.0 and v2 == 0.0


def test_eval_velocity_two_mode_sum():
    g = RectGeometry(2.0, 1.0)
    u = SpectralField(g, {(1, 2): 1.0, (2, 1): -0.5})
    x = (g.a / 2, g.b / 2)
    v1, v2 = u.eval_velocity(*x)
    # oracle: independent per-term evaluation
    p1 = SpectralField(g, {(1, 2): 1.0}).eval_velocity(*x)
    p2 = SpectralField(g, {(2, 1): -0.5}).eval_velocity(*x)
    assert v1 == pytest.approx(p1[0] + p2[0], abs=1e-14)
    assert v2 == pytest.approx(p1[1] + p2[1], abs=1e-14)


def test_eval_velocity_outside_domain():
    u = SpectralField(RectGeometry(1, 1), {(1, 1): 1.0})
    with pytest.raises(ValueError):
        u.eval_velocity(1.5, 0.5)


def test_norm_H_matches_quadrature():
    g = RectGeometry(math.pi, math.pi)
    u = SpectralField(g, {(1, 1): 1.0})
    # oracle: 2D quadrature of the L2 integral
    q = quad_dot(u.eval_velocity, u.eval_velocity, g)
    assert u.norm("H") == pytest.approx(math.sqrt(q), rel=1e-12)
    assert u.norm("H") == pytest.approx(math.pi / math.sqrt(2), rel=1e-12)


def test_norm_empty():
    u = SpectralField(RectGeometry(1, 2), {})
    for kind in ("H", "V", "DA"):
        assert u.norm(kind) == 0.0


@given(st.dictionaries(
    st.tuples(st.integers(1, 4), st.integers(1, 4)),
    st.floats(-2, 2, allow_nan=False), min_size=1, max_size=6))
def test_norm_ratio_bounded_below(coeffs):
    g = RectGeometry(1.0, 2.0)
    u = SpectralField(g, coeffs)
    if u.norm("H") == 0:
        return
    lam_min = min(-kbar(k, g) for k, v in u.coeffs.items() if v != 0)
    assert u.norm("V") ** 2 / u.norm("H") ** 2 >= lam_min * (1 - 1e-12)


@given(st.dictionaries(
    st.tuples(st.integers(1, 3), st.integers(1, 3)),
    st.floats(-1, 1, allow_nan=False), min_size=1, max_size=5))
@settings(max_examples=25, deadline=None)
def test_orthogonality_and_idempotence(coeffs):
    g = RectGeometry(1.0, 1.5)
    u = SpectralField(g, coeffs)
    v1, v2 = field_tables(u)
    uu, q = leray_project(v1, v2, g)
    for k in set(u.coeffs) | set(uu.coeffs):
        assert uu[k] == pytest.approx(u[k], abs=1e-12)
    assert not q.interior_coeffs or max(abs(c) for c in q.interior_coeffs.values()) < 1e-12


def test_basis_orthogonality_quadrature():
    g = RectGeometry(1.0, 2.0)
    modes = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1)]
    for m in modes:
        for n in modes:
            em = SpectralField(g, {m: 1.0})
            en = SpectralField(g, {n: 1.0})
            q = quad_dot(em.eval_velocity, en.eval_velocity, g)
            if m == n:
                assert q == pytest.approx(-kbar(m, g) * g.a * g.b / 4, rel=1e-12)
            else:
                assert abs(q) < 1e-10


def test_leray_solenoidal_fixed_point():
    g = RectGeometry(1.0, 2.0)
    w = SpectralField(g, {(1, 1): 1.0})
    v1, v2 = field_tables(w)
    u, q = leray_project(v1, v2, g)
    assert u.coeffs == pytest.approx({(1, 1): 1.0})
    assert not q.axis_coeffs_x1 and not q.axis_coeffs_x2
    assert max(abs(c) for c in q.interior_coeffs.values()) < 1e-15


def test_leray_pure_gradient():
    # grad of cos(pi x1/a) cos(pi x2/b)
    g = RectGeometry(1.0, 2.0)
    a, b = g.a, g.b
    v1 = {(1, 1): -math.pi / a}
    v2 = {(1, 1): -math.pi / b}
    u, q = leray_project(v1, v2, g)
    assert not u.coeffs
    assert q.interior_coeffs[(1, 1)] == pytest.approx(1.0, rel=1e-12)


def test_leray_reconstruction_random_table():
    rng = np.random.default_rng(7)
    g = RectGeometry(1.0, 2.0)
    v1 = {(k1, k2): rng.normal() for k1 in range(1, 4) for k2 in range(0, 4)}
    v2 = {(k1, k2): rng.normal() for k1 in range(0, 4) for k2 in range(1, 4)}
    u, q = leray_project(v1, v2, g)
    xs = np.linspace(0.05, 0.95, 5)
    X1, X2 = np.meshgrid(xs * g.a, xs * g.b, indexing="ij")
    u1, u2 = u.eval_velocity(X1, X2)
    g1, g2 = q.eval_gradient(X1, X2)
    # direct evaluation of the input tables
    w1 = np.zeros_like(X1)
    w2 = np.zeros_like(X1)
    for (k1, k2), c in v1.items():
        w1 += c * np.sin(k1 * np.pi * X1 / g.a) * np.cos(k2 * np.pi * X2 / g.b)
    for (k1, k2), c in v2.items():
        w2 += c * np.cos(k1 * np.pi * X1 / g.a) * np.sin(k2 * np.pi * X2 / g.b)
    assert np.max(np.abs(u1 + g1 - w1)) < 1e-10
    assert np.max(np.abs(u2 + g2 - w2)) < 1e-10


def test_json_roundtrip():
    g = RectGeometry(1.0, 2.0)
    u = SpectralField(g, {(2, 1): -0.25, (1, 3): 1.5})
    v = SpectralField.from_json(u.to_json())
    assert v.geom == g and v.coeffs == u.coeffs
