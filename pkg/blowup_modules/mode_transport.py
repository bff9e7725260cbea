"""Fundamental solutions of d_tau^2 + xi tau^(-2-2/nu) and the backward propagator H.

The unit-frequency equation is phi'' + tau^(-2-2/nu) phi = 0. For large tau the
real pair phi0 ~ 1, phi1 ~ tau comes from a series in tau^(-2/nu); for small tau
the complex mode phi2 = tau^p e^(-i nu tau^(-1/nu)) (1 + a(tau^(1/nu))) comes from
a Volterra equation. W(phi0, phi1) = 1 and W(phi2, conj phi2) = -2i.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, make_interp_spline
from scipy.special import exp1

from blowup_modules.errors import (
    AccuracyError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    PreconditionError,
)
from blowup_modules.spectral_toolkit import sobolev_norm

logger = logging.getLogger(__name__)

SERIES_TAU_MIN = 0.25
TAU_SPLIT = 1.0
SERIES_MAX_TERMS = 400
PICARD_TOL = 1e-12
WRONSKIAN_WARN = 1e-8
WRONSKIAN_FAIL = 1e-5
ADIABATIC_Q = 30.0
TAIL_NEGLIGIBLE = 1e-10
GL_NODES = 8


def wronskian(f, df, g, dg):
    return f * dg - df * g


def characteristic_power(nu):
    """m with lambda^2 proportional to tau^m."""
    return 2.0 + 2.0 / nu


# Large tau
@dataclass
class LargeTauSolution:
    """sum_k c_k tau^(j - 2k/nu), plus log_coeff * partner(tau) ln tau in the resonant case."""

    nu: float
    j: int
    coeffs: np.ndarray
    log_coeff: float = 0.0
    partner: Optional["LargeTauSolution"] = None

    def powers(self):
        return self.j - 2.0 * np.arange(self.coeffs.size) / self.nu

    def _power_sum(self, tau, derivative):
        q = self.powers()
        T = tau[..., None]
        if derivative == 0:
            return np.sum(self.coeffs * T**q, axis=-1)
        if derivative == 1:
            return np.sum(self.coeffs * q * T ** (q - 1.0), axis=-1)
        return np.sum(self.coeffs * q * (q - 1.0) * T ** (q - 2.0), axis=-1)

    def __call__(self, tau, derivative=0):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < SERIES_TAU_MIN * (1 - 1e-12)):
            raise DomainError(f"large-tau series used below tau = {SERIES_TAU_MIN}: {np.min(tau):.3g}")
        if derivative not in (0, 1, 2):
            raise ValueError("derivative must be 0, 1 or 2")
        out = self._power_sum(tau, derivative)
        if self.log_coeff:
            L = np.log(tau)
            p0 = self.partner._power_sum(tau, 0)
            if derivative == 0:
                out = out + self.log_coeff * p0 * L
            else:
                p1 = self.partner._power_sum(tau, 1)
                if derivative == 1:
                    out = out + self.log_coeff * (p1 * L + p0 / tau)
                else:
                    p2 = self.partner._power_sum(tau, 2)
                    out = out + self.log_coeff * (p2 * L + 2.0 * p1 / tau - p0 / tau**2)
        return out

    def power_moment(self, s1, p):
        """int_{s1}^inf phi(s) s^(-p) ds."""
        b = self.powers() - p + 1.0
        if np.any(b >= 0):
            raise PreconditionError(f"moment of phi_{self.j} against s^-{p} diverges; need p > {self.j + 1}")
        total = np.sum(self.coeffs * s1**b / -b)
        if self.log_coeff:
            bp = self.partner.powers() - p + 1.0
            total += self.log_coeff * np.sum(-self.partner.coeffs * s1**bp * (math.log(s1) / bp - 1.0 / bp**2))
        return float(total)


def _is_even_integer(nu):
    r = round(nu)
    return abs(nu - r) < 1e-12 and r % 2 == 0


def _series(nu, j, tol, partner=None, include_log=True):
    """Coefficients of phi_j from c_k (j - 2k/nu)(j - 1 - 2k/nu) + c_(k-1) = 0, and the log coefficient."""
    scale = SERIES_TAU_MIN ** (-2.0 / nu)
    half = int(round(nu / 2))
    coeffs = [1.0]
    log_coeff = 0.0
    biggest = 1.0
    quiet = 0
    for m in range(1, SERIES_MAX_TERMS):
        denom = (j - 2.0 * m / nu) * (j - 1.0 - 2.0 * m / nu)
        if abs(denom) < 1e-14:
            # resonance at m = nu/2 for phi1 when nu is an even integer
            log_coeff = coeffs[m - 1] if include_log else 0.0
            coeffs.append(0.0)
            continue
        extra = 0.0
        if partner is not None and log_coeff and 0 <= m - half < partner.size:
            n = m - half
            extra = log_coeff * partner[n] * (-4.0 * n / nu - 1.0)
        c = -(coeffs[m - 1] + extra) / denom
        coeffs.append(c)
        term = abs(c) * scale**m
        biggest = max(biggest, term)
        quiet = quiet + 1 if term < tol * biggest else 0
        if quiet >= 2:
            break
    else:
        raise ConvergenceError(f"large-tau series for phi_{j} did not converge in {SERIES_MAX_TERMS} terms")
    return np.array(coeffs), log_coeff


def large_tau_basis(nu, tol=1e-14, include_log=True):
    """phi0 ~ 1 and phi1 ~ tau at infinity with W(phi0, phi1) = 1."""
    if nu <= 0.5:
        raise DomainError(f"large_tau_basis needs nu > 1/2, got {nu}")
    c0, _ = _series(nu, 0, tol)
    phi0 = LargeTauSolution(nu, 0, c0)
    if not _is_even_integer(nu):
        c1, _ = _series(nu, 1, tol)
        return phi0, LargeTauSolution(nu, 1, c1)
    c1, gamma = _series(nu, 1, tol, partner=c0, include_log=include_log)
    if gamma:
        logger.info(f"nu={nu} is an even integer: phi1 carries {gamma:.6g} phi0 ln tau")
    return phi0, LargeTauSolution(nu, 1, c1, gamma, phi0 if gamma else None)


# Small tau
def _exp_panel_weights(T, nu):
    """Weights (left, right) of int e^(-2i nu / s) g(s) ds on each panel, g linear."""
    c = 2j * nu
    s = T[1:]
    z = c / s
    E1 = exp1(z)
    em = np.exp(-z)
    E2 = em - z * E1
    E3 = 0.5 * (em - z * E2)
    A0 = np.concatenate([[0.0], s * E2])
    A1 = np.concatenate([[0.0], s**2 * E3])
    P0 = np.diff(A0)
    P1 = np.diff(A1)
    h = np.diff(T)
    right = (P1 - T[:-1] * P0) / h
    return P0 - right, right


def volterra_kappa(nu):
    return (1.0 - nu * nu) / (8.0 * nu)


def _picard_blocks(T, nu, kappa, tol, max_sweeps):
    n = T.size
    left, right = _exp_panel_weights(T, nu)
    h = np.diff(T)
    phase = np.zeros(n, dtype=complex)
    phase[1:] = np.exp(2j * nu / T[1:])
    a = np.zeros(n, dtype=complex)

    def sweep(stop):
        g = 1.0 + a[: stop + 1]
        J = np.concatenate([[0.0], np.cumsum(left[:stop] * g[:-1] + right[:stop] * g[1:])])
        I = np.concatenate([[0.0], np.cumsum(0.5 * h[:stop] * (g[:-1] + g[1:]))])
        return 1j * kappa * (I - phase[: stop + 1] * J), J

    start, block = 0, n - 1
    while start < n - 1:
        stop = min(n - 1, start + block)
        saved = a[start + 1 : stop + 1].copy()
        history = []
        converged = False
        for _ in range(max_sweeps):
            new, _ = sweep(stop)
            inc = float(np.max(np.abs(new[start + 1 :] - a[start + 1 : stop + 1])))
            a[start + 1 : stop + 1] = new[start + 1 :]
            history.append(inc)
            if inc < tol:
                converged = True
                break
            if len(history) >= 4 and history[-1] > history[-2] > history[-3] > history[-4]:
                break
        if converged:
            start = stop
            continue
        a[start + 1 : stop + 1] = saved
        block //= 2
        if block < 1:
            raise ConvergenceError("Picard iteration for the small-tau mode failed on a single panel")
        logger.warning(f"Picard iteration not contracting on [{T[start]:.3g}, {T[stop]:.3g}]; shrinking to {block} panels")
    _, J = sweep(n - 1)
    return a, J, phase


@dataclass
class SmallTauSolution:
    """phi2(tau) = tau^p e^(-i nu / T) (1 + a(T)) with T = tau^(1/nu)."""

    nu: float
    T: np.ndarray
    a: np.ndarray
    da: np.ndarray
    tau_max: float
    _spline: object = field(default=None, repr=False)

    def __post_init__(self):
        y = np.column_stack([self.a.real, self.a.imag])
        dy = np.column_stack([self.da.real, self.da.imag])
        self._spline = CubicHermiteSpline(self.T, y, dy)

    @property
    def kappa(self):
        return volterra_kappa(self.nu)

    def atilde(self, T, derivative=False):
        T = np.asarray(T, dtype=float)
        v = self._spline(T)
        val = v[..., 0] + 1j * v[..., 1]
        if not derivative:
            return val
        d = self._spline.derivative()(T)
        return val, d[..., 0] + 1j * d[..., 1]

    def zero_order(self, T):
        """First Picard iterate i kappa int_0^T [1 - e^(-2i nu (1/s - 1/T))] ds."""
        T = np.atleast_1d(np.asarray(T, dtype=float))
        z = 2j * self.nu / T
        E2 = np.exp(-z) - z * exp1(z)
        return 1j * self.kappa * (T - np.exp(z) * T * E2)

    def __call__(self, tau, derivative=False):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0) or np.any(tau > self.tau_max * (1 + 1e-12)):
            raise DomainError(f"small-tau mode evaluated outside (0, {self.tau_max}]")
        nu = self.nu
        T = tau ** (1.0 / nu)
        p = 0.5 + 0.5 / nu
        a, da = self.atilde(T, derivative=True)
        base = tau**p * np.exp(-1j * nu / T)
        phi = base * (1.0 + a)
        if not derivative:
            return phi
        omega = tau ** (-1.0 - 1.0 / nu)
        dphi = base * ((p / tau + 1j * omega) * (1.0 + a) + da * T / (nu * tau))
        return phi, dphi


def small_tau_wkb(nu, tau_max=1.5, n=6001, tol=PICARD_TOL, max_sweeps=200):
    """phi2 from Picard iteration of the Volterra equation for a on a uniform T grid."""
    if nu <= 0.5:
        raise DomainError(f"small_tau_wkb needs nu > 1/2, got {nu}")
    T = np.linspace(0.0, tau_max ** (1.0 / nu), n)
    kappa = volterra_kappa(nu)
    if kappa == 0.0:
        a = np.zeros(n, dtype=complex)
        return SmallTauSolution(nu, T, a, a.copy(), tau_max)
    a, J, phase = _picard_blocks(T, nu, kappa, tol, max_sweeps)
    da = np.empty(n, dtype=complex)
    da[0] = 1j * kappa
    da[1:] = -2.0 * kappa * nu * phase[1:] * J[1:] / T[1:] ** 2
    logger.info(f"small-tau mode: nu={nu}, kappa={kappa:.4g}, max |a| = {np.max(np.abs(a)):.3e}")
    return SmallTauSolution(nu, T, a, da, tau_max)


# Basis and S
class ModeBasis:
    """phi0, phi1 (large tau), phi2 (small tau) and the connection between them at tau = 1."""

    def __init__(self, nu, tol=1e-14, tau_max=1.5, n_volterra=6001, include_log=True):
        if nu <= 0.5:
            raise DomainError(f"ModeBasis needs nu > 1/2, got {nu}")
        self.nu = nu
        self.phi0, self.phi1 = large_tau_basis(nu, tol, include_log)
        self.phi2 = small_tau_wkb(nu, tau_max, n_volterra)
        self.tau_split = TAU_SPLIT
        self.alpha0, self.alpha1 = self.connection_coefficients()
        f, df = self.phi2(TAU_SPLIT, derivative=True)
        # phi2 = beta0 phi0 + beta1 phi1 on the series side
        self.beta0 = complex(wronskian(f, df, self.phi1(TAU_SPLIT), self.phi1(TAU_SPLIT, 1)))
        self.beta1 = complex(wronskian(self.phi0(TAU_SPLIT), self.phi0(TAU_SPLIT, 1), f, df))
        self._check_wronskians()

    def connection_coefficients(self):
        """alpha_j with phi_j = alpha_j phi2 + conj(alpha_j phi2) at tau = 1."""
        f, df = self.phi2(TAU_SPLIT, derivative=True)
        out = []
        for phi in (self.phi0, self.phi1):
            w = wronskian(phi(TAU_SPLIT), phi(TAU_SPLIT, 1), np.conj(f), np.conj(df))
            out.append(complex(w / -2j))
        return tuple(out)

    def wronskians(self, large=(2.0, 5.0, 10.0), small=(0.1, 0.5, 1.0)):
        large = np.asarray(large, dtype=float)
        small = np.asarray(small, dtype=float)
        f, df = self.phi2(small, derivative=True)
        return {
            "phi0_phi1": wronskian(self.phi0(large), self.phi0(large, 1), self.phi1(large), self.phi1(large, 1)),
            "phi2_conj": wronskian(f, df, np.conj(f), np.conj(df)),
        }

    def _check_wronskians(self):
        w = self.wronskians()
        for name, values, target in (("W(phi0, phi1)", w["phi0_phi1"], 1.0), ("W(phi2, conj phi2)", w["phi2_conj"], -2j)):
            spread = float(np.max(np.abs(values - target)))
            if spread > WRONSKIAN_FAIL:
                logger.error(f"{name} deviates by {spread:.2e}")
                raise AccuracyError(f"{name} deviates from {target} by {spread:.2e}")
            if spread > WRONSKIAN_WARN:
                logger.warning(f"{name} deviates from {target} by {spread:.2e}")

    def mode(self, tau, derivative=False):
        """phi2 continued to all tau > 0."""
        tau = np.asarray(tau, dtype=float)
        small = tau < TAU_SPLIT
        val = np.empty(tau.shape, dtype=complex)
        der = np.empty(tau.shape, dtype=complex)
        if np.any(small):
            v, d = self.phi2(tau[small], derivative=True)
            val[small], der[small] = v, d
        big = ~small
        if np.any(big):
            tb = tau[big]
            val[big] = self.beta0 * self.phi0(tb) + self.beta1 * self.phi1(tb)
            der[big] = self.beta0 * self.phi0(tb, 1) + self.beta1 * self.phi1(tb, 1)
        return (val, der) if derivative else val

    def mode_moment(self, s1, p):
        """int_{s1}^inf phi2(s) s^(-p) ds for s1 >= 1."""
        if s1 < TAU_SPLIT:
            raise DomainError(f"mode_moment needs s1 >= {TAU_SPLIT}, got {s1}")
        return self.beta0 * self.phi0.power_moment(s1, p) + self.beta1 * self.phi1.power_moment(s1, p)

    def S_unit(self, tau, sigma, derivative=False):
        """S(tau, sigma, 1) or its tau-derivative."""
        tau, sigma = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(sigma, dtype=float))
        out = np.empty(tau.shape)
        late = sigma >= TAU_SPLIT
        both = late & (tau >= TAU_SPLIT)
        mixed = late & ~both
        early = ~late
        d = 1 if derivative else 0
        if np.any(both):
            t, s = tau[both], sigma[both]
            out[both] = self.phi1(s) * self.phi0(t, d) - self.phi0(s) * self.phi1(t, d)
        if np.any(mixed):
            t, s = tau[mixed], sigma[mixed]
            c = 2.0 * (self.phi1(s) * self.alpha0 - self.phi0(s) * self.alpha1)
            f = self.phi2(t, derivative=derivative)
            f = f[1] if derivative else f
            out[mixed] = np.real(c * f)
        if np.any(early):
            t, s = tau[early], sigma[early]
            f = self.phi2(t, derivative=derivative)
            f = f[1] if derivative else f
            out[early] = np.imag(self.phi2(s) * np.conj(f))
        return out


@lru_cache(maxsize=8)
def mode_basis(nu, tol=1e-14):
    return ModeBasis(nu, tol)


def _solve_S_ode(tau, sigma, xi, nu, derivative):
    m = characteristic_power(nu)

    def rhs(t, y):
        return [y[1], -xi * t ** (-m) * y[0]]

    if tau == sigma:
        return -1.0 if derivative else 0.0
    sol = solve_ivp(rhs, (sigma, tau), [0.0, -1.0], method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise ConvergenceError(f"S integration failed: {sol.message}")
    return float(sol.y[1, -1] if derivative else sol.y[0, -1])


def fundamental_S(tau, sigma, xi, basis, derivative=False, method="scaling"):
    """S(tau, sigma, xi) for d_tau^2 + xi tau^(-2-2/nu), zero at tau = sigma with d_tau S = -1 there."""
    tau_a = np.asarray(tau, dtype=float)
    sigma_a = np.asarray(sigma, dtype=float)
    if np.any(tau_a <= 0) or np.any(tau_a > sigma_a * (1 + 1e-12)):
        raise DomainError("fundamental_S needs 0 < tau <= sigma")
    if xi <= 0:
        raise DomainError(f"fundamental_S needs xi > 0, got {xi}")
    nu = basis.nu
    if method == "ode":
        vec = np.vectorize(lambda t, s: _solve_S_ode(t, s, xi, nu, derivative))
        out = vec(tau_a, sigma_a)
        return float(out) if out.ndim == 0 else out
    if method != "scaling":
        raise ConfigurationError(f"unknown method {method!r}")
    scale = xi ** (-nu / 2.0)
    out = basis.S_unit(tau_a * scale, sigma_a * scale, derivative)
    if not derivative:
        out = out / scale
    return float(out) if out.ndim == 0 else out


def s_bound_exponent(basis, tau_samples, ratios):
    """Fit C in |S(tau, sigma, 1)| <= K sigma (sigma/tau)^C (1 + tau^(-2/nu))^(-1/2).

    Returns (C, K, envelope) where envelope[i] is the sup over tau_samples at sigma = ratios[i] tau.
    """
    tau = np.asarray(tau_samples, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    nu = basis.nu
    envelope = np.empty(ratios.size)
    for i, r in enumerate(ratios):
        sigma = r * tau
        S = np.abs(basis.S_unit(tau, sigma))
        envelope[i] = np.max(S / (sigma * (1.0 + tau ** (-2.0 / nu)) ** -0.5))
    C, logK = np.polyfit(np.log(ratios), np.log(envelope), 1)
    C = max(C, 0.0)
    K = float(np.max(envelope * ratios ** (-C)))
    return float(C), K, envelope


# Backward propagator along characteristics
def aligned_tau_grid(tau_min, tau_factor, n, xi_grid, nu):
    """Geometric tau grid whose step moves characteristics by a whole number of xi cells."""
    dy = math.log(xi_grid[1] / xi_grid[0])
    m = characteristic_power(nu)
    h_target = math.log(tau_factor) / (n - 1)
    shift = max(1, int(round(m * h_target / dy)))
    h = shift * dy / m
    return tau_min * np.exp(h * np.arange(n))


def label_shift(tau_grid, xi_grid, nu):
    """Number of xi cells crossed per tau step; raises unless the grids are aligned."""
    y = np.log(xi_grid)
    dy = y[1] - y[0]
    if not np.allclose(np.diff(y), dy, rtol=1e-8, atol=0):
        raise ConfigurationError("transport needs a logarithmically uniform xi grid")
    h = np.diff(np.log(tau_grid))
    if not np.allclose(h, h[0], rtol=1e-8, atol=0):
        raise ConfigurationError("transport needs a geometric tau grid")
    ratio = characteristic_power(nu) * h[0] / dy
    shift = int(round(ratio))
    if shift < 1 or abs(ratio - shift) > 1e-6:
        raise ConfigurationError(f"tau step moves characteristics by {ratio:.4f} xi cells; use aligned_tau_grid")
    return shift


def _labels(n_tau, n_xi, shift):
    i = np.arange(n_tau)
    for label in range(n_xi + shift * (n_tau - 1)):
        j = label - shift * i
        ok = (j >= 0) & (j < n_xi)
        if np.any(ok):
            yield i[ok], j[ok]


def _fit_tail(sigma, B):
    """(A, p) with B ~ A sigma^-p over the last decade, or None when the sign is not fixed."""
    if sigma.size < 2:
        return None
    tail = sigma >= sigma[-1] / 10.0
    if tail.sum() < 2:
        tail[-2:] = True
    s, v = sigma[tail], B[tail]
    if np.any(v == 0) or np.any(np.sign(v) != np.sign(v[-1])):
        return None
    slope, _ = np.polyfit(np.log(s), np.log(np.abs(v)), 1)
    p = -slope
    return v[-1] * sigma[-1] ** p, p


def _gauss_panels(lo, hi, panels):
    x, w = np.polynomial.legendre.leggauss(GL_NODES)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


class _Label:
    """One characteristic: omega^2 = xi sigma^-m, complex mode psi(sigma) = xi^(nu/4) phi2(sigma xi^(-nu/2))."""

    def __init__(self, xi, basis):
        self.xi = xi
        self.basis = basis
        self.nu = basis.nu
        self.m = characteristic_power(self.nu)
        self.scale = xi ** (-self.nu / 2.0)

    def q(self, sigma):
        return np.sqrt(self.xi) * np.asarray(sigma, dtype=float) ** (-1.0 / self.nu)

    def psi(self, sigma):
        f, df = self.basis.mode(np.asarray(sigma, dtype=float) * self.scale, derivative=True)
        return self.xi ** (self.nu / 4.0) * f, self.xi ** (-self.nu / 4.0) * df

    def state(self, sigma, G):
        """(X, X') from G = int_sigma^inf psi B."""
        f, df = self.psi(sigma)
        return -np.imag(np.conj(f) * G), -np.imag(np.conj(df) * G)

    def weight(self, sigma, X, dX):
        """G carried by the state (X, X') at sigma."""
        f, df = self.psi(sigma)
        return dX * f - X * df

    def powerlaw_adiabatic(self, sigma, A, p):
        q = self.m - p
        K = q * (q - 1.0)
        c = -A / self.xi
        X = c * (sigma**q - K / self.xi * sigma ** (q + self.m - 2.0))
        dX = c * (q * sigma ** (q - 1.0) - K / self.xi * (q + self.m - 2.0) * sigma ** (q + self.m - 3.0))
        return X, dX

    def _scaled_tail(self, s0, p):
        """int_{s0}^inf phi2(s) s^-p ds."""
        s1 = max(s0, TAU_SPLIT)
        total = self.basis.mode_moment(s1, p)
        if s0 < s1:
            nu = self.nu
            u_hi = s0 ** (-1.0 / nu)
            panels = max(2, 2 * math.ceil(nu * (u_hi - 1.0) / math.pi))
            u, w = _gauss_panels(1.0, u_hi, panels)
            s = u ** (-nu)
            total += np.sum(w * self.basis.mode(s) * s ** (-p) * nu * u ** (-nu - 1.0))
        return total

    def tail_weight(self, sigma_end, A, p):
        """G(sigma_end) for the source A sigma^-p beyond sigma_end."""
        nu = self.nu
        factor = A * self.xi ** (nu / 4.0 + nu / 2.0 - p * nu / 2.0)
        if self.q(sigma_end) < ADIABATIC_Q:
            return factor * self._scaled_tail(sigma_end * self.scale, p)
        s_c = ADIABATIC_Q ** (-nu)
        sigma_c = s_c / self.scale
        G_c = factor * self._scaled_tail(s_c, p)
        G_hom = G_c - self.weight(sigma_c, *self.powerlaw_adiabatic(sigma_c, A, p))
        return self.weight(sigma_end, *self.powerlaw_adiabatic(sigma_end, A, p)) + G_hom


def _adiabatic_state(spline, y, xi, nu, m):
    """X = X0 - X0''/omega^2 with X0 = -B/omega^2, from the source spline in y = ln sigma."""
    B = spline(y)
    By, Byy, Byyy = (spline.derivative(k)(y) for k in (1, 2, 3))
    e = -np.exp(m * y) / xi
    X0 = e * B
    X0y = e * (m * B + By)
    X0yy = e * (m * m * B + 2.0 * m * By + Byy)
    X0yyy = e * (m**3 * B + 3.0 * m * m * By + 3.0 * m * Byy + Byyy)
    inv_q2 = np.exp(2.0 * y / nu) / xi
    corr = (X0yy - X0y) * inv_q2
    corr_y = ((X0yyy - X0yy) + (2.0 / nu) * (X0yy - X0y)) * inv_q2
    sigma = np.exp(y)
    return X0 - corr, (X0y - corr_y) / sigma


def backward_duhamel(sigma, B, xi, basis, tail, h_ext):
    """X(sigma_i) = -int_{sigma_i}^inf S B along one characteristic, and X'(sigma_i).

    sigma are the label's samples, B the source there, xi the label's effective
    frequency (omega^2 = xi sigma^-m) and tail = (A, p) the source law beyond sigma[-1].
    """
    label = _Label(xi, basis)
    n = sigma.size
    y = np.log(sigma)
    y_ext = np.concatenate([y, y[-1] + h_ext * np.arange(1, 4)])
    B_ext = np.concatenate([B, np.zeros(3) if tail is None else tail[0] * np.exp(-tail[1] * y_ext[n:])])
    k = 5 if y_ext.size >= 6 else 3
    spline = make_interp_spline(y_ext, B_ext, k=k)
    G_end = 0j if tail is None else label.tail_weight(sigma[-1], *tail)

    Q = label.q(sigma)
    first = int(np.searchsorted(-Q, -ADIABATIC_Q, side="right"))
    X = np.empty(n)
    dX = np.empty(n)
    G = np.empty(n, dtype=complex)
    G[-1] = G_end
    if first < n:
        idx = np.arange(first, n)
        if idx.size > 1:
            ya, yb = y[idx[:-1]], y[idx[1:]]
            dphase = label.nu * (Q[idx[:-1]] - Q[idx[1:]])
            nodes = GL_NODES * max(1, math.ceil(float(np.max(dphase)) / 2.0))
            x, w = np.polynomial.legendre.leggauss(nodes)
            half = 0.5 * (yb - ya)
            yn = 0.5 * (ya + yb)[:, None] + half[:, None] * x
            sn = np.exp(yn)
            f, _ = label.psi(sn)
            pieces = np.sum(f * spline(yn) * sn * w, axis=1) * half
            G[first:-1] = G_end + np.cumsum(pieces[::-1])[::-1]
        X[first:], dX[first:] = label.state(sigma[first:], G[first:])
    if first > 0:
        anchor = min(first, n - 1)
        Xa, dXa = _adiabatic_state(spline, y[: anchor + 1], xi, label.nu, label.m)
        G_hom = G[anchor] - label.weight(sigma[anchor], Xa[-1], dXa[-1])
        Xh, dXh = label.state(sigma[:first], np.full(first, G_hom))
        X[:first] = Xa[:first] + Xh
        dX[:first] = dXa[:first] + dXh
    return X, dX


def apply_H(b_table, tau_grid, xi_grid, nu, basis=None, decay_power=None):
    """x with -(D^2 + xi) x = b and zero data at tau = infinity, plus D x, D = d_tau - 2 (lambda_tau/lambda) xi d_xi.

    b_table has shape (len(tau_grid), len(xi_grid)); the grids must be aligned so that
    characteristics xi lambda(tau)^2 = const run through grid points.
    """
    b = np.asarray(b_table, dtype=float)
    tau_grid = np.asarray(tau_grid, dtype=float)
    xi_grid = np.asarray(xi_grid, dtype=float)
    if b.shape != (tau_grid.size, xi_grid.size):
        raise ConfigurationError(f"source shape {b.shape} does not match grids ({tau_grid.size}, {xi_grid.size})")
    shift = label_shift(tau_grid, xi_grid, nu)
    basis = basis or mode_basis(nu)
    m = characteristic_power(nu)
    h = math.log(tau_grid[1] / tau_grid[0])
    x = np.zeros_like(b)
    dx = np.zeros_like(b)
    if not np.any(b):
        return x, dx

    labels = list(_labels(tau_grid.size, xi_grid.size, shift))
    fits = [_fit_tail(tau_grid[ii], b[ii, jj]) for ii, jj in labels]
    fitted = [f[1] for f in fits if f is not None]
    if decay_power is None:
        decay_power = float(np.median(fitted)) if fitted else 4.0
    dropped = 0
    for (ii, jj), fit in zip(labels, fits):
        sigma = tau_grid[ii]
        B = b[ii, jj]
        if not np.any(B):
            continue
        if fit is None and sigma.size == 1:
            fit = (B[-1] * sigma[-1] ** decay_power, decay_power)
        if fit is None:
            dropped += 1
        elif fit[1] <= 2.0:
            scale = float(np.max(np.abs(B) * sigma**2))
            if abs(B[-1]) * sigma[-1] ** 2 > TAIL_NEGLIGIBLE * max(scale, 1e-300):
                logger.error(f"tail exponent {fit[1]:.3f} at xi={xi_grid[jj[-1]]:.3g} does not decay fast enough")
                raise AccuracyError(f"source tail fit sigma^-{fit[1]:.3f} is not integrable against S (need > 2)")
            fit = None
            dropped += 1
        xi_eff = xi_grid[jj[0]] * sigma[0] ** m
        X, dX = backward_duhamel(sigma, B, xi_eff, basis, fit, h)
        x[ii, jj] = X
        dx[ii, jj] = dX
    if dropped:
        logger.warning(f"apply_H: {dropped} of {len(labels)} characteristics had no stable tail law; tail set to zero")
    return x, dx


def transport_defect(x, dx, b, tau_grid, xi_grid, nu, resolved=0.5):
    """Relative residual of d_sigma X' + omega^2 X + B and of dX/dsigma - X' along characteristics.

    Only samples whose phase step omega sigma h is below `resolved`, away from the label
    ends, are checked. Returns (defect, consistency, checked_count).
    """
    shift = label_shift(tau_grid, xi_grid, nu)
    h = math.log(tau_grid[1] / tau_grid[0])
    worst = worst_dx = 0.0
    scale = scale_dx = 0.0
    checked = 0
    for ii, jj in _labels(tau_grid.size, xi_grid.size, shift):
        if ii.size < 8:
            continue
        sigma = tau_grid[ii]
        y = np.log(sigma)
        X, dX, B = x[ii, jj], dx[ii, jj], b[ii, jj]
        omega2 = xi_grid[jj]
        d2 = make_interp_spline(y, dX, k=5).derivative()(y) / sigma
        d1 = make_interp_spline(y, X, k=5).derivative()(y) / sigma
        mask = np.sqrt(omega2) * sigma * h <= resolved
        mask[:2] = mask[-2:] = False
        if not np.any(mask):
            continue
        checked += int(mask.sum())
        worst = max(worst, float(np.max(np.abs(d2 + omega2 * X + B)[mask])))
        scale = max(scale, float(np.max(np.abs(B[mask]))))
        worst_dx = max(worst_dx, float(np.max(np.abs(d1 - dX)[mask])))
        scale_dx = max(scale_dx, float(np.max(np.abs(dX[mask]))))
    if checked == 0:
        raise ConfigurationError("no resolved characteristic samples to check; refine the tau grid")
    return worst / max(scale, 1e-300), worst_dx / max(scale_dx, 1e-300), checked


def weighted_sup_norm(table, tau_grid, tables, alpha, power):
    """sup_tau tau^power ||table(tau, .)||_{H^alpha_rho}."""
    return max(t**power * sobolev_norm(row, tables, alpha) for t, row in zip(tau_grid, table))


def norm_gain_quotient(profile, tau_grid, tables, nu, alpha, N_values=(4, 6, 8), basis=None):
    """||H b||_{N-2, alpha+1/2} / ||b||_{N, alpha} for b = tau^-N profile(xi), per N."""
    profile = np.asarray(profile, dtype=float)
    out = {}
    for N in N_values:
        b = tau_grid[:, None] ** (-float(N)) * profile[None, :]
        x, _ = apply_H(b, tau_grid, tables.xi_grid, nu, basis, decay_power=float(N))
        num = weighted_sup_norm(x, tau_grid, tables, alpha + 0.5, N - 2)
        den = weighted_sup_norm(b, tau_grid, tables, alpha, N)
        out[N] = num / den
        logger.info(f"N={N}: norm gain quotient {out[N]:.4e}")
    return out
