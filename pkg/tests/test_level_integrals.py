import math

import numpy as np
import pytest
from scipy import integrate

from fwgraph.hamiltonian_model import duffing, harmonic, modulated_harmonic, operator_terms
from fwgraph.level_integrals import (
    EdgeCoefficients,
    GluingData,
    LevelIntegralError,
    PeriodOverflow,
    SingularPathError,
    compensating_drift,
    compensating_drift_many,
    compensator_residual,
    cycle_layer_density,
    edge_coefficients,
    generalized_operator_residual,
    geometric_cycle_integral,
    gluing_probabilities,
    l0_adjoint_a_inv,
    level_grid,
    region_integral,
    trace_cycle,
)
from fwgraph.topology import analyse

from conftest import S2_BOX


def separatrix_beta_lobe():
    """Independent oracle: int |grad H|^2 dt along the homoclinic orbit x = sqrt2 sech t."""
    def integrand(t):
        x = math.sqrt(2) / math.cosh(t)
        y = -x * math.tanh(t)
        return (x ** 3 - x) ** 2 + y ** 2
    return 2 * integrate.quad(integrand, 0.0, 40.0, epsabs=1e-13, limit=200)[0]


BETA_LOBE = 3.2  # frozen from separatrix_beta_lobe(); equals 16/5


def test_separatrix_oracle_value():
    assert separatrix_beta_lobe() == pytest.approx(BETA_LOBE, abs=1e-10)


@pytest.mark.parametrize("h", [0.5, 2.0])
def test_s1_cycle_period_and_radius(s1, s1_graph, h):
    cyc = trace_cycle(s1, s1_graph, 0, h)
    assert cyc.period == pytest.approx(2 * math.pi, abs=1e-6)
    np.testing.assert_allclose(np.linalg.norm(cyc.samples, axis=1), math.sqrt(2 * h), rtol=1e-9)
    np.testing.assert_allclose(s1.H(cyc.samples), h, atol=1e-8)


def test_s2_lobe_period_grows_towards_separatrix(s2, s2_graph):
    periods = [trace_cycle(s2, s2_graph, 0, h).period for h in (-0.2, -0.1, -0.01, -0.001)]
    assert all(b > a for a, b in zip(periods, periods[1:]))


def test_level_outside_edge_is_rejected(s1, s1_graph):
    with pytest.raises(LevelIntegralError, match="outside"):
        trace_cycle(s1, s1_graph, 0, 1e-7)


def test_period_overflow(s2, s2_graph):
    with pytest.raises(PeriodOverflow):
        trace_cycle(s2, s2_graph, 0, -1e-9, check_range=False, max_time=20.0)


@pytest.mark.parametrize("which, h", [("s1", 0.7), ("s1", 3.0), ("s2", -0.1), ("s2", 0.5)])
def test_geometric_integral_matches_orbit_time(which, h, request):
    sys = request.getfixturevalue(which)
    graph = request.getfixturevalue(which + "_graph")
    edge = 0 if which == "s1" or h < 0 else 2
    cyc = trace_cycle(sys, graph, edge, h)
    fs = [lambda z: np.ones(len(z)),
          lambda z: np.sum(sys.grad(z) ** 2, axis=-1),
          lambda z: operator_terms(sys, z, 0.0)[0]]
    for f in fs:
        orbit = cyc.integrate(f(cyc.samples))
        geo = geometric_cycle_integral(sys, cyc, f)
        assert geo == pytest.approx(orbit, rel=1e-6)


def test_s1_coefficients(s1_coeffs):
    h = s1_coeffs.h_grid
    np.testing.assert_allclose(s1_coeffs.a_table, 2 * h, rtol=1e-4)
    np.testing.assert_allclose(s1_coeffs.b_table, 1.0, rtol=1e-4)
    np.testing.assert_allclose(s1_coeffs.t_table, 2 * math.pi, atol=1e-6)
    np.testing.assert_allclose(s1_coeffs.u_density, 1 / (2 * math.pi * 2 * h), rtol=1e-4)
    np.testing.assert_array_equal(s1_coeffs.v_density, s1_coeffs.t_table)
    x = np.linspace(0.1, 7.9, 37)
    np.testing.assert_allclose(s1_coeffs.A(x), 2 * x, rtol=1e-4)
    np.testing.assert_allclose(s1_coeffs.u_prime(x), 1 / (4 * math.pi * x), rtol=1e-4)
    np.testing.assert_allclose(s1_coeffs.v_prime(x), 2 * math.pi, rtol=1e-6)


def test_zero_noise_gives_zero_a(s1_graph):
    sys = harmonic(noise=0.0)
    c = edge_coefficients(sys, s1_graph, 0, levels_per_edge=8, with_defect=False)
    np.testing.assert_array_equal(c.a_table, 0.0)


def test_level_grid_endpoints(s2_graph):
    grid = level_grid(s2_graph, 0, 16)
    assert grid[0] == -0.25 + 1e-4 * 0.25
    assert grid[-1] == -1e-4 * 0.25
    assert np.all(np.diff(grid) > 0)


def test_coefficients_roundtrip(s1_coeffs):
    c2 = EdgeCoefficients.from_dict(s1_coeffs.to_dict())
    x = np.linspace(0.5, 7.5, 9)
    np.testing.assert_array_equal(c2.A(x), s1_coeffs.A(x))
    np.testing.assert_array_equal(c2.defect(x), s1_coeffs.defect(x))


def test_s2_lobe_coefficients_are_lipschitz(s2_coeffs):
    c = s2_coeffs[0]
    x = np.linspace(-0.24, -0.02, 200)
    for fn in (c.A, c.B, c.T):
        slopes = np.abs(np.diff(fn(x)) / np.diff(x))
        assert np.all(np.isfinite(slopes)) and slopes.max() < 1e3
    assert np.all(c.a_table > 0)


def test_layer_cake_derivative_on_s1(s1, s1_graph):
    # d/dx int_{H<x} F equals the cycle integral of F dl/|grad H|
    for density, exact in [(lambda z: np.ones(len(z)), lambda x: 2 * math.pi),
                           (lambda z: z[:, 0] ** 2, lambda x: 2 * math.pi * x)]:
        x, eta = 1.3, 1e-3
        fd = (region_integral(s1, s1_graph, 0, x + eta, density)
              - region_integral(s1, s1_graph, 0, x - eta, density)) / (2 * eta)
        cyc = cycle_layer_density(s1, trace_cycle(s1, s1_graph, 0, x), density)
        assert fd == pytest.approx(cyc, abs=1e-3)
        assert cyc == pytest.approx(exact(x), rel=1e-9)


def test_s2_lobe_area(s2, s2_graph):
    # each lobe of the figure eight encloses area 4/3
    area = region_integral(s2, s2_graph, 0, 0.0, lambda z: np.ones(len(z)))
    assert area == pytest.approx(4 / 3, rel=1e-6)


@pytest.mark.parametrize("h", np.linspace(0.5, 7.5, 10))
def test_generalized_operator_s1(s1, s1_graph, s1_coeffs, h):
    f = np.polynomial.Polynomial([0, 0, 1])
    assert abs(generalized_operator_residual(s1, s1_graph, s1_coeffs, f, h)) < 1e-3


def test_generalized_operator_constant_f_is_exact(s1, s1_graph, s1_coeffs):
    f = np.polynomial.Polynomial([3.0])
    assert generalized_operator_residual(s1, s1_graph, s1_coeffs, f, 2.0) == 0.0


def test_generalized_operator_tangent_drift_unchanged(s1, s1_graph, s1_coeffs):
    rot = harmonic(rotational_drift=1.0)
    c = edge_coefficients(rot, s1_graph, 0, levels_per_edge=16)
    f = np.polynomial.Polynomial([0, 0, 1])
    r0 = generalized_operator_residual(s1, s1_graph, s1_coeffs, f, 2.0)
    r1 = generalized_operator_residual(rot, s1_graph, c, f, 2.0)
    assert r1 == pytest.approx(r0, abs=1e-9)
    np.testing.assert_allclose(c.b_table, 1.0, rtol=1e-9)


@pytest.fixture(scope="module")
def modulated():
    sys = modulated_harmonic()
    graph = analyse(sys, 2.0, (-2.5, 2.5, -2.5, 2.5))
    return sys, graph, edge_coefficients(sys, graph, 0, levels_per_edge=24)


def test_defect_identity_on_modulated_model(modulated):
    # Abar' = 2 T B + 2 * defect where a^-1 is not invariant
    sys, graph, c = modulated
    x = np.linspace(0.2, 1.8, 9)
    lhs = c._splines["abar_table"].derivative()(x)
    rhs = 2 * c.T(x) * c.B(x) + 2 * c.defect(x)
    # spline differentiation of the tabulated Abar limits agreement to about 1e-5
    np.testing.assert_allclose(lhs, rhs, rtol=1e-4)
    assert np.max(np.abs(c.defect(x))) > 1e-2


@pytest.mark.parametrize("h", [0.4, 1.0, 1.6])
def test_generalized_operator_with_defect(modulated, h):
    sys, graph, c = modulated
    f = np.polynomial.Polynomial([0, 1, 1])
    assert abs(generalized_operator_residual(sys, graph, c, f, h)) < 1e-3


def test_s2_gluing(s2_gluing):
    p = s2_gluing.probs
    assert p[0] == pytest.approx(0.25, abs=0.01)
    assert p[1] == pytest.approx(0.25, abs=0.01)
    assert p[2] == pytest.approx(0.5, abs=0.01)
    assert s2_gluing.betas[0] == pytest.approx(s2_gluing.betas[1], abs=1e-6)
    assert sum(p.values()) == pytest.approx(1.0, abs=1e-15)
    assert s2_gluing.betas[0] == pytest.approx(BETA_LOBE, rel=1e-4)
    assert s2_gluing.betas[2] == pytest.approx(2 * BETA_LOBE, rel=1e-4)


def test_gluing_invariant_under_noise_scaling(s2_graph, s2_gluing):
    g2 = gluing_probabilities(duffing(noise=2.0), s2_graph, 2)
    for k in s2_gluing.probs:
        assert g2.probs[k] == pytest.approx(s2_gluing.probs[k], abs=1e-10)
        assert g2.betas[k] == pytest.approx(4 * s2_gluing.betas[k], rel=1e-10)


def test_gluing_roundtrip(s2_gluing):
    assert GluingData.from_dict(s2_gluing.to_dict()) == s2_gluing


def test_gluing_rejects_exterior_vertex(s2, s2_graph):
    with pytest.raises(LevelIntegralError):
        gluing_probabilities(s2, s2_graph, 0)


def test_compensating_drift_vanishes_on_s1(s1):
    for z in [(0.5, 0.3), (-1.2, 2.0)]:
        np.testing.assert_allclose(compensating_drift(s1, z), 0.0, atol=1e-12)
    assert np.all(np.abs(l0_adjoint_a_inv(s1, np.array([[0.3, 0.4], [1.0, -2.0]]))) < 1e-6)


def s2_test_grid(delta=0.1):
    xs = np.linspace(-1.6, 1.6, 17)
    ys = np.linspace(-1.1, 1.1, 12)
    pts = np.array([(x, y) for x in xs for y in ys])
    crit = np.array([[-1, 0], [0, 0], [1, 0]])
    far = np.min(np.linalg.norm(pts[:, None, :] - crit[None], axis=-1), axis=1) > delta
    return pts[far & (np.abs(pts[:, 1]) > delta)]


def test_compensator_residual_on_s2(s2):
    res = compensator_residual(s2, s2_test_grid())
    assert np.max(np.abs(res)) < 1e-3


def test_compensator_on_modulated_model(modulated):
    sys = modulated[0]
    pts = np.array([[0.4, 0.7], [-0.9, 0.5], [1.2, -0.8]])
    assert np.max(np.abs(l0_adjoint_a_inv(sys, pts))) > 1e-2
    assert np.max(np.abs(compensator_residual(sys, pts))) < 1e-3


def test_compensating_drift_second_component_is_zero(modulated):
    sys = modulated[0]
    pts = np.array([[0.4, 0.7], [-0.9, 0.5]])
    bh = compensating_drift_many(sys, pts)
    np.testing.assert_array_equal(bh[:, 1], 0.0)
    quad_val = compensating_drift(sys, pts[0])
    assert quad_val[0] == pytest.approx(bh[0, 0], rel=1e-6)


def test_singular_path_is_reported(s2, s2_graph):
    with pytest.raises(SingularPathError) as info:
        compensating_drift(s2, (1.5, 1e-4), critical_locations=s2_graph.critical_locations)
    assert info.value.suggested_offset > 0
