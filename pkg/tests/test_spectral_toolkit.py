import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import j1

from blowup_modules.errors import ConfigurationError, DomainError, PreconditionError
from blowup_modules.profile_core import GridFunction
from blowup_modules.spectral_toolkit import (
    OperatorSpec,
    QuadratureGrid,
    SpectralColumn,
    SpectralTables,
    distorted_ft,
    filon_exp,
    filon_weights,
    fit_series_constant,
    inverse_distorted_ft,
    phi_global,
    phi_series,
    phi_tables_for,
    psi_plus_wkb,
    rho,
    simpson_weights,
    sobolev_norm,
    weyl_m,
    wkb_amplitude,
)


@pytest.mark.parametrize("xi", [0.25, 1.0, 4.0])
def test_free_operator_matches_bessel(xi):
    r = np.linspace(0.1, 10.0, 60)
    exact = 2.0 * xi**-0.5 * np.sqrt(r) * j1(math.sqrt(xi) * r)
    approx = phi_global(r, xi, operator=OperatorSpec.free())
    assert np.max(np.abs(approx - exact)) <= 1e-8 * np.max(np.abs(exact))


@pytest.mark.parametrize("kind", ["ground", "free"])
def test_zero_energy_wronskian(kind):
    R = np.geomspace(1e-2, 1e2, 9)
    phi, dphi, theta, dtheta = OperatorSpec(kind).zero_energy(R)
    assert_allclose(theta * dphi - dtheta * phi, 1.0, rtol=1e-10)


def test_unknown_operator_kind():
    with pytest.raises(ConfigurationError):
        OperatorSpec("harmonic")


def test_theta_phi_wronskian_along_the_ode_zone():
    column = SpectralColumn(1.0, with_theta=True)
    w = column.theta_phi_wronskian(np.linspace(1.0, column.q_match, 7))
    assert_allclose(w, 1.0, atol=1e-6)


def test_psi_plus_minus_wronskian():
    R = np.linspace(60.0, 200.0, 7)
    psi, dpsi = psi_plus_wkb(R, 1.0, derivative=True)
    w = psi * np.conj(dpsi) - dpsi * np.conj(psi)
    assert_allclose(w, -2j, atol=1e-5)


def test_psi_plus_needs_large_phase():
    with pytest.raises(DomainError):
        psi_plus_wkb(np.array([1.0]), 1.0)
    with pytest.raises(DomainError):
        psi_plus_wkb(np.array([10.0]), -1.0)


def test_free_density():
    for xi in (0.5, 2.0):
        assert rho(xi, OperatorSpec.free()) == pytest.approx(xi / 8.0, rel=1e-6)


def test_weyl_function_carries_the_density():
    m = weyl_m(1.0)
    assert abs(m.imag) == pytest.approx(math.pi * rho(1.0), rel=1e-4)


def test_weyl_function_range():
    with pytest.raises(DomainError):
        weyl_m(1e-9)


def test_column_rejects_nonpositive_energy():
    with pytest.raises(DomainError):
        SpectralColumn(0.0)


def test_column_zones_join_continuously():
    column = SpectralColumn(4.0)
    amplitude = 2.0 * abs(column.a) * column.xi**-0.25
    for edge in (column.R_series, column.match_radius):
        R = edge * np.array([1 - 1e-9, 1 + 1e-9])
        val, der = column.evaluate(R, derivative=True)
        assert abs(val[0] - val[1]) <= 1e-5 * amplitude
        assert abs(der[0] - der[1]) <= 1e-5 * amplitude * column.k


@pytest.mark.parametrize("n", [11, 12])
def test_simpson_weights_integrate_cubics(n):
    x = np.linspace(0.0, 2.0, n)
    w = simpson_weights(n, x[1] - x[0])
    assert np.sum(w * x**3) == pytest.approx(4.0, rel=1e-12)


def test_filon_is_exact_for_linear_amplitudes():
    x = np.linspace(0.0, 1.0, 201)
    k = 30.0
    exact = np.exp(1j * k) / (1j * k) + (np.exp(1j * k) - 1.0) / k**2
    assert abs(filon_exp(x, x, k) - exact) <= 1e-10 * abs(exact)


def test_filon_needs_odd_point_count():
    with pytest.raises(ConfigurationError):
        filon_weights(np.linspace(0.0, 1.0, 10), 3.0)


def test_quadrature_segments_must_increase():
    with pytest.raises(ConfigurationError):
        QuadratureGrid(1e-4, segments=((0.01, 0.001),))
    quad = QuadratureGrid(1e-4, segments=((2.0, 0.01), (8.0, 0.05)))
    assert quad.r_cut == 8.0
    assert np.all(np.diff(quad.R) > 0)


def test_free_low_frequency_mass(free_tables):
    xi0 = free_tables.xi_grid[0]
    assert free_tables.low_frequency_mass() == pytest.approx(xi0**2 / 16.0, rel=1e-6)


def test_sobolev_norm_of_a_constant(free_tables):
    ones = np.ones(free_tables.xi_grid.size)
    xi_max = free_tables.xi_grid[-1]
    assert sobolev_norm(ones, free_tables, 0.0) ** 2 == pytest.approx(xi_max**2 / 16.0, rel=1e-3)


def test_density_is_positive_and_tends_to_free_law(tables):
    assert np.all(tables.rho_values > 0)
    high = tables.xi_grid >= 10.0
    g = tables.rho_values[high] / tables.xi_grid[high]
    assert g.max() / g.min() <= 2.0
    assert g[-1] == pytest.approx(1.0 / 8.0, rel=0.2)


PROFILES = [
    lambda x: x**1.5 * np.exp(-x * x),
    lambda x: x**1.5 * np.exp(-0.5 * x * x) * (1 + x),
    lambda x: x**1.5 / (1 + x**2) * np.exp(-x * x),
]


@pytest.mark.slow
@pytest.mark.parametrize("profile", PROFILES)
def test_distorted_transform_round_trip_and_plancherel(fine_tables, profile):
    quad = QuadratureGrid(fine_tables.R_grid[0])
    f = GridFunction(quad.R, profile(quad.R), (1.5, 0), None)
    fhat = distorted_ft(f, fine_tables, quad)
    R = np.geomspace(0.05, 3.0, 30)
    back = inverse_distorted_ft(fhat, fine_tables, R)
    assert np.max(np.abs(back.y - profile(R))) <= 1e-4 * np.max(np.abs(profile(R)))
    l2 = math.sqrt(np.sum(quad.plain_weights(quad.R.size - 1) * f.y**2))
    assert sobolev_norm(fhat, fine_tables, 0.0) == pytest.approx(l2, rel=1e-4)


def test_plancherel_on_the_coarse_grid(tables):
    quad = QuadratureGrid(tables.R_grid[0])
    f = GridFunction(quad.R, PROFILES[0](quad.R), (1.5, 0), None)
    l2 = math.sqrt(np.sum(quad.plain_weights(quad.R.size - 1) * f.y**2))
    assert sobolev_norm(distorted_ft(f, tables, quad), tables, 0.0) == pytest.approx(l2, rel=1e-3)


def test_transform_of_zero(tables):
    quad = QuadratureGrid(tables.R_grid[0])
    fhat = distorted_ft(GridFunction(quad.R, np.zeros(quad.R.size)), tables, quad)
    assert not np.any(fhat.y)


def test_tables_survive_array_export(tables):
    copy = SpectralTables.from_arrays(tables.to_arrays())
    assert copy.operator == tables.operator
    assert_allclose(copy.a_values, tables.a_values)
    assert_allclose(copy.phi_samples, tables.phi_samples)
    assert copy.q_match == tables.q_match


def test_series_matches_bessel_near_the_origin():
    R = np.linspace(0.1, 1.5, 15)
    free = OperatorSpec.free()
    assert_allclose(phi_series(R, 1.0, operator=free), 2.0 * np.sqrt(R) * j1(R), rtol=1e-8)
    with pytest.raises(PreconditionError):
        phi_series(np.array([3.0]), 1.0, operator=free)


def test_series_coefficient_constant():
    C, per_j = fit_series_constant(phi_tables_for(OperatorSpec.ground_state(), 10.0))
    assert 0 < C < np.inf
    assert C == max(per_j.values())


def test_low_energy_laws_of_density_and_connection():
    xi = np.geomspace(1e-8, 1e-4, 5)
    columns = [SpectralColumn(x) for x in xi]
    log = np.abs(np.log(xi))
    g = np.array([c.rho for c in columns]) * xi * log**2
    h = np.array([abs(c.a) for c in columns]) / (np.sqrt(xi) * log)
    assert g.max() / g.min() <= 1.1
    assert h.max() / h.min() <= 1.1


def test_first_series_coefficient_near_zero():
    phi_tables = phi_tables_for(OperatorSpec.ground_state(), 10.0)
    u = 4e-3
    head = phi_tables.coefficient(1, u) / u
    assert head == pytest.approx(-1.0 / 8.0, rel=1e-3)
    assert (head + 1.0 / 8.0) / u == pytest.approx(1.0 / 12.0, rel=3e-2)


def test_first_series_coefficient_grows_like_a_log():
    phi_tables = phi_tables_for(OperatorSpec.ground_state(), 1e4)
    u = np.array([1e6, 1e7])
    assert_allclose(phi_tables.coefficient(1, u), -0.25 * np.log(u) + 0.5, atol=1e-2)


def test_small_energy_log_deviation():
    # phi = phi0 + R^(-1/2) (delta^2 phi_1(R^2) + O(delta^4)) with R = delta xi^(-1/2)
    xi, delta = 1e-8, 0.01
    R = np.array([delta / math.sqrt(xi)])
    phi0 = OperatorSpec.ground_state().zero_energy(R)[0]
    deviation = np.sqrt(R) * (phi_series(R, xi) - phi0) / delta**2
    assert deviation[0] == pytest.approx(-0.5 * math.log(R[0]) + 0.5, rel=2e-2)
    assert deviation[0] < 0


@pytest.mark.parametrize("xi", [1.0, 4.0, 16.0])
def test_wkb_amplitude_limits(xi):
    op = OperatorSpec.ground_state()
    R = np.array([50.0, 100.0])
    sigma, _ = wkb_amplitude(R, xi, op)
    q = R * math.sqrt(xi)
    assert np.all(np.abs(sigma - 1.0) <= 1e-2)
    assert_allclose(sigma.imag * q, 3.0 / 8.0, rtol=5e-2)


@pytest.mark.parametrize("xi", [0.25, 1.0])
def test_column_is_an_eigenfunction(xi):
    column = SpectralColumn(xi)
    op = column.operator
    h = 1e-3
    R = np.concatenate(
        [
            np.linspace(0.2, 0.9, 8) * column.R_series,
            np.linspace(2.0, 0.5 * column.q_match, 8) / column.k,
        ]
    )

    def d(r):
        return column.evaluate(r, derivative=True)[1]

    d2 = (-d(R + 2 * h) + 8 * d(R + h) - 8 * d(R - h) + d(R - 2 * h)) / (12 * h)
    phi = column.evaluate(R)
    residual = -d2 + op.U(R) * phi - xi * phi
    assert np.max(np.abs(residual)) <= 1e-6 * np.max(np.abs(op.U(R) * phi))


def test_transform_diagonalizes_the_operator(tables):
    quad = QuadratureGrid(tables.R_grid[0])
    R = quad.R
    f = R**1.5 * np.exp(-(R**2))
    Lf = (8.0 * R**1.5 - 4.0 * R**3.5) * np.exp(-(R**2)) + tables.operator.potential(R) * f
    fhat = distorted_ft(GridFunction(R, f), tables, quad).y
    Lhat = distorted_ft(GridFunction(R, Lf), tables, quad).y
    expected = tables.xi_grid * fhat
    assert sobolev_norm(Lhat - expected, tables, 0.0) <= 1e-3 * sobolev_norm(expected, tables, 0.0)
