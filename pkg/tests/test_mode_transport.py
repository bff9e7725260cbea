import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from blowup_modules.errors import ConfigurationError, DomainError
from blowup_modules.mode_transport import (
    aligned_tau_grid,
    apply_H,
    characteristic_power,
    fundamental_S,
    label_shift,
    large_tau_basis,
    mode_basis,
    norm_gain_quotient,
    s_bound_exponent,
    transport_defect,
    volterra_kappa,
    weighted_sup_norm,
)
from blowup_modules.spectral_toolkit import sobolev_norm


def S_closed(tau, sigma):
    """S(tau, sigma, 1) for nu = 1, where phi'' + tau^-4 phi = 0 is solved by tau sin(1/tau), tau cos(1/tau)."""
    return sigma * tau * np.sin(1.0 / tau - 1.0 / sigma)


def test_unit_mode_closed_forms(basis):
    assert basis.alpha0 == pytest.approx(0.5j, abs=1e-8)
    assert basis.alpha1 == pytest.approx(0.5, abs=1e-8)
    assert basis.phi0.coeffs[1] == pytest.approx(-1.0 / 6.0, rel=1e-14)
    assert basis.phi1.coeffs[1] == pytest.approx(-0.5, rel=1e-14)
    tau = np.linspace(0.5, 5.0, 10)
    assert_allclose(basis.phi0(tau), tau * np.sin(1.0 / tau), atol=1e-12)
    assert_allclose(basis.phi1(tau), tau * np.cos(1.0 / tau), atol=1e-12)
    tau = np.array([0.2, 0.6, 1.2, 3.0])
    assert_allclose(basis.mode(tau), tau * np.exp(-1j / tau), atol=1e-9)


def test_unit_mode_has_no_volterra_correction():
    assert volterra_kappa(1.0) == 0.0
    assert volterra_kappa(2.0) == pytest.approx(-3.0 / 16.0)
    assert characteristic_power(1.0) == 4.0


@pytest.mark.parametrize("tau, sigma", [(0.3, 0.8), (0.5, 2.0), (1.5, 4.0)])
def test_S_matches_closed_form(basis, tau, sigma):
    assert basis.S_unit(tau, sigma) == pytest.approx(S_closed(tau, sigma), abs=1e-9)


def test_S_vanishes_on_the_diagonal(basis):
    tau = np.array([0.3, 1.0, 2.5])
    assert_allclose(basis.S_unit(tau, tau), 0.0, atol=1e-12)
    assert_allclose(basis.S_unit(tau, tau, derivative=True), -1.0, atol=1e-8)


@pytest.mark.parametrize("nu", [1.0, 1.5])
def test_scaling_agrees_with_direct_integration(nu):
    basis = mode_basis(nu)
    tau = np.array([0.5, 1.0, 2.0])
    for derivative in (False, True):
        scaled = fundamental_S(tau, 3.0, 4.0, basis, derivative=derivative)
        direct = fundamental_S(tau, 3.0, 4.0, basis, derivative=derivative, method="ode")
        assert_allclose(scaled, direct, rtol=1e-5, atol=1e-8)


def test_fundamental_S_domain(basis):
    with pytest.raises(DomainError):
        fundamental_S(2.0, 1.0, 1.0, basis)
    with pytest.raises(DomainError):
        fundamental_S(1.0, 2.0, 0.0, basis)
    with pytest.raises(ConfigurationError):
        fundamental_S(1.0, 2.0, 1.0, basis, method="euler")


def test_resonant_nu_carries_a_log():
    phi0, phi1 = large_tau_basis(2.0)
    assert phi1.log_coeff != 0.0
    tau = np.linspace(1.0, 5.0, 9)
    for phi in (phi0, phi1):
        assert_allclose(phi(tau, 2) + tau**-3 * phi(tau), 0.0, atol=1e-10)
    assert_allclose(phi0(tau) * phi1(tau, 1) - phi0(tau, 1) * phi1(tau), 1.0, atol=1e-10)


def test_nonresonant_wronskians():
    w = mode_basis(1.5).wronskians()
    assert_allclose(w["phi0_phi1"], 1.0, atol=1e-8)
    assert_allclose(w["phi2_conj"], -2j, atol=1e-6)


def test_basis_needs_nu_above_half():
    with pytest.raises(DomainError):
        large_tau_basis(0.4)


def test_s_bound_exponent(basis):
    C, K, envelope = s_bound_exponent(basis, np.geomspace(0.1, 10.0, 30), np.array([1.5, 3.0, 10.0]))
    assert 0.0 <= C <= 1.0
    assert K > 0 and np.all(np.isfinite(envelope))


@pytest.fixture(scope="module")
def transport_grids():
    xi = np.geomspace(1e-2, 1e2, 81)
    tau = aligned_tau_grid(2.0, 8.0, 40, xi, 1.0)
    return tau, xi


def test_aligned_grid_moves_whole_cells(transport_grids):
    tau, xi = transport_grids
    assert label_shift(tau, xi, 1.0) == 2
    with pytest.raises(ConfigurationError):
        label_shift(np.geomspace(2.0, 16.0, 40), xi, 1.0)


def test_apply_H_power_law_source(transport_grids, basis):
    tau, xi = transport_grids
    N = 6
    b = np.broadcast_to(tau[:, None] ** -float(N), (tau.size, xi.size)).copy()
    x, dx = apply_H(b, tau, xi, 1.0, basis, decay_power=float(N))
    for i, j in [(0, 40), (0, 80), (5, 60), (20, 30)]:
        c = xi[j] * tau[i] ** 4
        k = math.sqrt(c)
        t = tau[i]
        # sigma = 1/u along the characteristic omega^2 = c sigma^-4
        integral, _ = quad(lambda u: u ** (N - 3) * math.sin(k * (1.0 / t - u)), 0.0, 1.0 / t, epsabs=1e-14, epsrel=1e-12, limit=200)
        exact = -t / k * integral
        assert x[i, j] == pytest.approx(exact, rel=1e-3, abs=1e-9 * t ** (2 - N))
    defect, consistency, checked = transport_defect(x, dx, b, tau, xi, 1.0)
    assert checked > 0
    assert defect <= 1e-2
    assert consistency <= 1e-2


def test_apply_H_zero_and_shape(transport_grids, basis):
    tau, xi = transport_grids
    x, dx = apply_H(np.zeros((tau.size, xi.size)), tau, xi, 1.0, basis)
    assert not np.any(x) and not np.any(dx)
    with pytest.raises(ConfigurationError):
        apply_H(np.zeros((tau.size, xi.size - 1)), tau, xi, 1.0, basis)


def test_weighted_sup_norm(free_tables):
    tau = np.array([1.0, 2.0, 4.0])
    table = tau[:, None] ** -2.0 * np.ones((3, free_tables.xi_grid.size))
    expected = sobolev_norm(np.ones(free_tables.xi_grid.size), free_tables, 0.5)
    assert weighted_sup_norm(table, tau, free_tables, 0.5, 2.0) == pytest.approx(expected, rel=1e-12)


def test_norm_gain_falls_with_decay_rate(free_tables, basis):
    xi = free_tables.xi_grid
    tau = aligned_tau_grid(1.0, 10.0, 30, xi, 1.0)
    gains = norm_gain_quotient(xi / (1.0 + xi) ** 2, tau, free_tables, 1.0, 0.0, N_values=(4, 8), basis=basis)
    assert all(np.isfinite(g) and g > 0 for g in gains.values())
    assert gains[8] < gains[4]
