import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalab.errors import OnSurface, OutsideChart
from metalab.geometry import (
    AdaptedRadius,
    SurfaceSpec,
    TubularPoint,
    adapted_radius,
    default_chart_radii,
    from_tubular,
    polar_coordinates,
    to_tubular,
)
from metalab.spectral import solve_model

ORIGIN2 = SurfaceSpec("point", 0, location=[0.0, 0.0])
ORIGIN3 = SurfaceSpec("point", 0, location=[0.0, 0.0, 0.0])
RING = SurfaceSpec("circle", 0, center=[0.0, 0.0, 0.0], radius=1.0, plane=[[1, 0, 0], [0, 1, 0]], r_chart=0.5)

coord = st.floats(-1.0, 1.0, allow_nan=False)


def test_point_chart_of_a_3_4_5_triangle():
    p = to_tubular(np.array([0.03, 0.04]), ORIGIN2)
    np.testing.assert_allclose(p.m, [0.0, 0.0])
    np.testing.assert_allclose(p.n, [0.6, 0.8], atol=1e-15)
    assert p.z == pytest.approx(0.05, abs=1e-16)


def test_point_on_the_surface_has_no_normal():
    with pytest.raises(OnSurface):
        to_tubular(np.zeros(2), ORIGIN2)


def test_chart_radius_is_enforced():
    with pytest.raises(OutsideChart):
        to_tubular(np.array([2.0, 0.0]), ORIGIN2.with_chart(1.0))


def test_circle_chart_by_hand():
    x = np.array([1.1, 0.0, 0.1])
    p = to_tubular(x, RING)
    z = np.hypot(0.1, 0.1)
    assert p.m == pytest.approx(0.0, abs=1e-15)
    assert p.z == pytest.approx(z, rel=1e-14)
    np.testing.assert_allclose(p.n, np.array([0.1, 0.0, 0.1]) / z, atol=1e-14)
    np.testing.assert_allclose(from_tubular(p, RING), x, atol=1e-14)


def test_from_tubular_small_cases():
    np.testing.assert_array_equal(from_tubular(TubularPoint(0, np.zeros(2), np.array([1.0, 0.0]), 0.0), ORIGIN2),
                                  [0.0, 0.0])
    got = from_tubular(TubularPoint(0, np.zeros(2), np.array([0.6, 0.8]), 0.05), ORIGIN2)
    np.testing.assert_allclose(got, [0.03, 0.04], atol=1e-16)


def test_round_trip_on_a_thousand_points():
    rng = np.random.default_rng(3)
    for surface in (ORIGIN2, ORIGIN3, RING):
        d = surface.dim
        if surface.kind == "point":
            u = rng.normal(size=(1000, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            pts = u * rng.uniform(1e-6, 1.0, size=(1000, 1))
        else:
            t = rng.uniform(0, 2 * np.pi, 1000)
            psi = rng.uniform(0, 2 * np.pi, 1000)
            r = rng.uniform(1e-6, 0.49, 1000)
            pts = np.stack([(1 + r * np.cos(psi)) * np.cos(t), (1 + r * np.cos(psi)) * np.sin(t),
                            r * np.sin(psi)], axis=1)
        worst = max(np.max(np.abs(from_tubular(to_tubular(x, surface), surface) - x)) for x in pts)
        assert worst <= 1e-10


@given(st.tuples(coord, coord, coord).filter(lambda v: 1e-6 < np.linalg.norm(v) < 1.0))
def test_point_chart_properties(v):
    x = np.array(v)
    p = to_tubular(x, ORIGIN3)
    assert abs(np.linalg.norm(p.n) - 1.0) <= 1e-12
    assert abs(p.z - np.linalg.norm(x)) <= 2 * np.finfo(float).eps * p.z
    np.testing.assert_allclose(from_tubular(p, ORIGIN3), x, atol=1e-10)


@given(st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi), st.floats(1e-6, 0.49))
def test_circle_normal_is_orthogonal_to_the_tangent(t, psi, r):
    x = np.array([(1 + r * np.cos(psi)) * np.cos(t), (1 + r * np.cos(psi)) * np.sin(t), r * np.sin(psi)])
    p = to_tubular(x, RING)
    m = np.array([np.cos(p.m), np.sin(p.m), 0.0])
    assert 0.0 <= p.m < 2 * np.pi
    assert abs(np.linalg.norm(p.n) - 1.0) <= 1e-12
    assert abs(p.n @ RING.tangent(m[None, :])[0]) <= 1e-12
    assert p.z == pytest.approx(r, abs=1e-12)


def test_circle_needs_three_dimensions_and_orthonormal_plane():
    with pytest.raises(ValueError):
        SurfaceSpec("circle", 0, center=[0.0, 0.0], radius=1.0)
    with pytest.raises(ValueError):
        SurfaceSpec("circle", 0, center=[0.0, 0.0, 0.0], radius=1.0, plane=[[1, 0, 0], [1, 1e-6, 0]])
    with pytest.raises(ValueError):
        SurfaceSpec("point", 0, location=[1.0])


def test_default_chart_radius_is_half_the_gap_capped():
    surfaces = [SurfaceSpec("point", 0, location=[-1.0, 0.0]), SurfaceSpec("point", 1, location=[1.0, 0.0]),
                SurfaceSpec("point", 2, location=[10.0, 0.0])]
    radii = default_chart_radii(surfaces)
    assert radii == pytest.approx([1.0, 1.0, 1.0])
    close = [SurfaceSpec("point", 0, location=[0.0, 0.0]), SurfaceSpec("point", 1, location=[0.5, 0.0])]
    assert default_chart_radii(close) == pytest.approx([0.25, 0.25])


def test_adapted_radius_is_plain_distance_for_constant_phi(model_a):
    sol = solve_model(model_a)[0]
    assert np.ptp(sol.phi) < 1e-9
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(200, 2))
    zeta = AdaptedRadius(model_a.surfaces[0], sol)(pts)
    np.testing.assert_allclose(zeta, np.linalg.norm(pts, axis=1), rtol=1e-9)
    assert adapted_radius(np.zeros(2), model_a.surfaces[0], sol) == 0.0


def test_adapted_radius_at_grid_nodes(anisotropic):
    sol = solve_model(anisotropic)[0]
    assert np.ptp(sol.phi) > 1e-3
    surface = anisotropic.surfaces[0]
    theta = sol.grid.nodes[:, 0]
    z = 0.3
    pts = z * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    expected = sol.phi ** (1.0 / sol.gamma) * z
    got = AdaptedRadius(surface, sol)(pts)
    np.testing.assert_allclose(got, expected, atol=1e-6)


@given(st.floats(0, 2 * np.pi), st.floats(1e-4, 0.4), st.floats(0.01, 2.0))
def test_adapted_radius_is_homogeneous_in_z(anisotropic_solution, theta, z, c):
    surface, sol = anisotropic_solution
    u = np.array([np.cos(theta), np.sin(theta)])
    zeta = AdaptedRadius(surface, sol)
    assert zeta((c * z * u)[None, :])[0] == pytest.approx(c * zeta((z * u)[None, :])[0], rel=1e-12)


def test_point_distance_is_euclidean():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 3))
    loc = SurfaceSpec("point", 0, location=[0.3, -0.2, 1.0])
    _, z = polar_coordinates(pts, loc, angles=False)
    np.testing.assert_allclose(z, np.linalg.norm(pts - loc.location, axis=1), rtol=4e-16, atol=0)
