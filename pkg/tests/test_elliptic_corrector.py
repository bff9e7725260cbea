import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.interpolate import make_interp_spline

from blowup_modules.elliptic_corrector import (
    T_STAR,
    ConeGrid,
    CorrectionStack,
    LBetaBasis,
    OddCorrection,
    assemble_profile,
    cos2Q,
    cos_minus_one,
    error_exponent_gain,
    error_residual,
    even_step,
    lbeta_apply,
    lbeta_fundamental,
    lbeta_second_derivative,
    odd_step,
    sin2Q,
    sin_minus_identity,
    solve_lbeta,
    solve_radial_L,
    split_error_b0,
    t_effective,
)
from blowup_modules.errors import ConfigurationError, PreconditionError, StateError
from blowup_modules.profile_core import GridFunction, e0_scaled, ground_state, lambda_scale, log_grid, logistic_grid


def test_trigonometry_of_the_ground_state():
    R = np.geomspace(1e-3, 1e3, 40)
    assert_allclose(cos2Q(R), np.cos(2 * ground_state(R)), atol=1e-14)
    assert_allclose(sin2Q(R), np.sin(2 * ground_state(R)), atol=1e-14)


def test_small_argument_helpers():
    x = np.array([1e-6, 1e-3, 0.05])
    x2 = x * x
    sin_series = -(x**3) / 6 * (1 - x2 / 20 + x2**2 / 840 - x2**3 / 60480)
    cos_series = -x2 / 2 * (1 - x2 / 12 + x2**2 / 360)
    assert_allclose(sin_minus_identity(x), sin_series, rtol=1e-12)
    assert_allclose(cos_minus_one(x), cos_series, rtol=1e-10)
    assert sin_minus_identity(np.array([0.5]))[0] == pytest.approx(np.sin(0.5) - 0.5, rel=1e-12)


def test_e0_matches_finite_difference_residual():
    nu = 1.0
    t = np.full(5, 0.01)
    r = t * np.array([0.01, 0.1, 0.3, 0.6, 0.85])
    residual = error_residual(lambda tt, rr: ground_state(lambda_scale(tt, nu) * rr), t, r)
    R = lambda_scale(t, nu) * r
    assert_allclose(t**2 * residual, e0_scaled(R, nu), rtol=1e-5, atol=1e-9)


def test_error_residual_is_nan_outside_cone():
    out = error_residual(lambda t, r: 0.0 * r, np.array([0.01, 0.01]), np.array([0.02, 0.0]))
    assert np.all(np.isnan(out))


def test_error_residual_rejects_coarse_steps():
    with pytest.raises(ConfigurationError):
        error_residual(lambda t, r: r, np.array([0.01]), np.array([0.005]), h_t=0.005)


def test_radial_solve_satisfies_the_equation():
    R = log_grid(1e-4, 1e2, 1200)
    f = GridFunction(R, R * np.exp(-R))
    v = solve_radial_L(f)
    x = np.log(R)
    dv_R = make_interp_spline(x, v.dy, k=5).derivative()(x) / R
    residual = dv_R + v.dy / R - cos2Q(R) * v.y / R**2 - f.y
    inner = (R > 1e-2) & (R < 50)
    assert np.max(np.abs(residual[inner])) < 1e-4 * np.max(np.abs(f.y))
    # v ~ R^3 at the origin
    assert v.fit_leading()[0] == pytest.approx(3.0, abs=0.05)


def test_radial_solve_zero_source():
    R = log_grid(1e-3, 1e2, 100)
    v = solve_radial_L(lambda r: 0.0 * r, R)
    assert not np.any(v.y)


def test_radial_solve_needs_log_grid():
    with pytest.raises(ConfigurationError):
        solve_radial_L(lambda r: r, np.linspace(0.1, 1.0, 50))


def test_lbeta_wronskian_is_constant():
    basis = LBetaBasis(3.0)
    assert basis.wronskian_constant(0.5) == pytest.approx(basis.wronskian_constant(0.9), rel=1e-6)


def test_lbeta_zero_source():
    w = solve_lbeta(lambda a: 0.0 * a, 3.0)
    assert not np.any(w.y)


def test_lbeta_needs_callable():
    with pytest.raises(PreconditionError):
        solve_lbeta(np.zeros(10), 3.0)


def test_t_effective():
    assert t_effective(1e3) == pytest.approx(1e3, rel=1e-12)
    assert t_effective(1e-3) == pytest.approx(T_STAR, rel=1e-12)


def test_steps_check_the_stack_depth():
    stack = CorrectionStack(1.0)
    with pytest.raises(StateError):
        odd_step(2, stack)
    with pytest.raises(StateError):
        even_step(1, stack)
    with pytest.raises(StateError):
        stack.error(1, np.array([1.0]), np.array([10.0]))


def test_first_odd_step_reduces_the_residual():
    stack = CorrectionStack(1.0)
    odd_step(1, stack, log_grid(1e-4, 1e6, 1500))
    t = np.full(6, 0.01)
    r = t * np.array([0.05, 0.1, 0.2, 0.3, 0.45, 0.6])
    before = error_residual(lambda tt, rr: stack.u(tt, rr, level=0), t, r)
    after = error_residual(stack.u, t, r)
    R, T = lambda_scale(t, 1.0) * r, t * lambda_scale(t, 1.0)
    # the stored error agrees with the finite-difference one
    assert_allclose(t**2 * after, stack.error(1, R, T), rtol=5e-3, atol=1e-7)
    assert np.max(np.abs(after)) < np.max(np.abs(before))


def test_profile_stack_error_decays_faster_with_depth(stack, small_params):
    t_values = small_params.t0 * np.array([0.5, 0.25, 0.125])
    gain_1 = error_exponent_gain(stack, 1, t_values)
    gain_3 = error_exponent_gain(stack, 3, t_values)
    assert gain_3 - gain_1 == pytest.approx(2.0 * small_params.nu, abs=0.2)


def test_b_splitting_quotient_is_finite(stack):
    R = np.array([0.5, 2.0, 10.0])
    a = np.array([0.1, 0.3, 0.5])
    out = split_error_b0(stack, 3, R, a, np.full(3, 200.0))
    assert np.all(np.isfinite(out["quotient"]))


def test_assemble_profile_samples(small_params, stack):
    grid = ConeGrid(np.array([small_params.t0 / 2, small_params.t0]), np.array([0.1, 0.5]))
    profile = assemble_profile(small_params, grid, stack)
    assert profile.level == stack.depth
    tt, rr = grid.mesh()
    assert_allclose(profile.u_grid, stack.u(tt, rr))
    assert_allclose(profile.e_grid, profile.evaluate_error(tt, rr))


def test_e0_at_unit_radius():
    assert e0_scaled(1.0, 1.0) == pytest.approx(-2.0, rel=1e-14)


def _near_cone_nodes(a_grid, s_lo, s_hi):
    s = 1.0 - a_grid
    return a_grid[(s >= s_lo) & (s <= s_hi)]


def test_lbeta_basis_solves_the_equation():
    basis = LBetaBasis(1.0)
    a = np.linspace(0.05, 0.95, 19)
    h = 1e-4

    def d(x, row):
        return basis.evaluate(x)[row]

    p = basis.evaluate(a)
    for row in (0, 2):
        d2 = (-d(a + 2 * h, row + 1) + 8 * d(a + h, row + 1) - 8 * d(a - h, row + 1) + d(a - 2 * h, row + 1)) / (12 * h)
        residual = lbeta_apply(p[row], p[row + 1], d2, a, 1.0)
        scale = np.max(np.abs(p[row])) + np.max(np.abs(p[row + 1]))
        assert np.max(np.abs(residual)) <= 1e-6 * scale


def test_second_solution_vanishes_at_the_cone():
    _, phi2 = lbeta_fundamental(1.0)
    assert phi2.fit_leading()[1] == pytest.approx(1.5, abs=0.05)
    s = np.array([1e-6, 1e-7])
    basis = LBetaBasis(1.0)
    assert_allclose(basis.evaluate(1.0 - s)[2] / s**1.5, 1.0, rtol=1e-4)


def test_resonant_basis_carries_a_log():
    beta = 2.5
    basis = LBetaBasis(beta)
    assert basis.resonance == 3
    assert basis.c1 != 0.0
    assert basis.wronskian_constant(0.6) == pytest.approx(basis.wronskian_constant(0.9), rel=1e-6)

    s = np.linspace(0.1, 0.4, 7)
    a = 1.0 - s
    h = 1e-4
    P = np.polynomial.polynomial

    def ds(x):
        return basis.series(x)[1]

    p1, dp1, _, _ = basis.series(s)
    d2 = (-ds(s + 2 * h) + 8 * ds(s + h) - 8 * ds(s - h) + ds(s - 2 * h)) / (12 * h)
    # d/da = -d/ds
    with_log = lbeta_apply(p1, -dp1, d2, a, beta)
    bare = P.polyval(s, basis.c)
    bare_d2 = P.polyval(s, P.polyder(basis.c, 2))
    without_log = lbeta_apply(bare, -P.polyval(s, P.polyder(basis.c)), bare_d2, a, beta)
    assert np.max(np.abs(with_log)) <= 1e-8 * np.max(np.abs(p1))
    assert np.max(np.abs(without_log)) >= 1e-4 * np.max(np.abs(bare))

    # phi1 - c1 phi2 ln(1 - a) stays regular at the cone
    tiny = np.array([1e-6])
    q1, _, q2, _ = basis.series(tiny)
    assert (q1 - basis.c1 * q2 * np.log(tiny))[0] == pytest.approx(1.0, abs=1e-4)


def test_lbeta_manufactured_solution():
    beta = 1.0

    def w_ref(a):
        return a**3 * (1 - a) ** 2

    def f(a):
        w = w_ref(a)
        dw = 3 * a**2 * (1 - a) ** 2 - 2 * a**3 * (1 - a)
        d2w = 6 * a * (1 - a) ** 2 - 12 * a**2 * (1 - a) + 2 * a**3
        return lbeta_apply(w, dw, d2w, a, beta)

    a = logistic_grid(300, a_min=1e-3, s_min=1e-6)
    w = solve_lbeta(f, beta, a_grid=a)
    assert np.max(np.abs(w.y - w_ref(a))) <= 1e-5 * np.max(np.abs(w_ref(a)))


def test_lbeta_linear_source_has_half_integer_exponent_at_the_cone():
    beta = 1.0
    a_grid = logistic_grid(800, a_min=1e-4, s_min=1e-9)
    w = solve_lbeta(lambda a: a, beta, a_grid=a_grid)
    a = _near_cone_nodes(a_grid, 1e-8, 1e-5)
    idx = np.searchsorted(a_grid, a)
    d2 = lbeta_second_derivative(a, w.y[idx], w.dy[idx], a, beta)
    slope, _ = np.polyfit(np.log(1.0 - a), np.log(np.abs(d2)), 1)
    # w = analytic + (1-a)^p analytic, so w'' ~ (1-a)^(p-2)
    assert slope + 2.0 == pytest.approx(1.5, abs=0.05)
    # cubic at the origin
    assert w.fit_leading()[0] == pytest.approx(3.0, abs=0.05)


def test_first_even_step_puts_a_log_in_the_bottom_coefficient():
    nu = 1.0
    R = log_grid(1e-3, 1e3, 50)
    stack = CorrectionStack(nu, corrections=[OddCorrection(1, R, None, np.zeros(R.size), np.zeros(R.size))])
    a_grid = logistic_grid(800, a_min=1e-4, s_min=1e-9)
    q = [
        GridFunction(a_grid, np.zeros(a_grid.size), (0, 0), None, domain="selfsimilar"),
        GridFunction(a_grid, -np.ones(a_grid.size), (0, 0), None, domain="selfsimilar"),
    ]
    even_step(1, stack, q, a_grid)
    corr = stack.corrections[-1]
    assert corr.beta == nu and len(corr.W) == 2

    a = _near_cone_nodes(a_grid, 1e-8, 1e-4)
    idx = np.searchsorted(a_grid, a)
    log_s = np.log(1.0 - a)
    fits = []
    for j in (0, 1):
        W = corr.W[j]
        d2 = lbeta_second_derivative(corr.source(j, a), W.y[idx], W.dy[idx], a, corr.beta)
        # (1-a)^(3/2) [ln(1-a)]^m gives (1-a)^(1/2) w'' ~ A ln(1-a) + B, A = 0 when m = 0
        g = np.sqrt(1.0 - a) * d2
        A, _ = np.polyfit(log_s, g, 1)
        fits.append((A, g))
    A1, g1 = fits[1]
    A0, g0 = fits[0]
    span = log_s.max() - log_s.min()
    assert abs(A1) * span <= 0.05 * np.max(np.abs(g1))
    assert abs(A0) * span >= 0.1 * np.max(np.abs(g0))
