"""Scattering theory of L = -d^2/dR^2 + 3/(4R^2) + V(R) and its distorted Fourier transform.

Normalizations: W(f, g) = f g' - f' g, W(theta, phi) = 1 at every energy,
W(psi+, psi-) = -2i, phi = a psi+ + conj(a) psi-, rho = 1 / (4 pi |a|^2).
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp
from scipy.interpolate import make_interp_spline
from scipy.signal import lfilter
from scipy.special import comb

from blowup_modules.errors import (
    AccuracyError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    PreconditionError,
)
from blowup_modules.profile_core import GridFunction

logger = logging.getLogger(__name__)

SERIES_DX = 2e-3
PHI_J_MAX = 48
THETA_J_MAX = 25
THETA_R_RANGE = (1e-3, 1e3)
SPREAD_WARN = 1e-6
SPREAD_FAIL = 1e-3


# Tails of the potential for R > 2, eps = 1/R
def _alternating_tail(eps, coeff, power0, n_terms=60):
    eps = np.asarray(eps, dtype=float)
    total = np.zeros_like(eps)
    for n in range(n_terms):
        p = 2 * n + power0
        total += (-1) ** n * coeff(n) * eps**p / p
    return total


def _int_j2(R):
    """int_R^inf (1+s^2)^-2 ds."""
    R = np.asarray(R, dtype=float)
    out = np.empty_like(R)
    near = R <= 2.0
    Rn = R[near]
    out[near] = 0.5 * (np.arctan2(1.0, Rn) - Rn / (1.0 + Rn**2))
    out[~near] = _alternating_tail(1.0 / R[~near], lambda n: n + 1, 3)
    return out


def _int_k2(R):
    """int_R^inf s^-2 (1+s^2)^-2 ds."""
    R = np.asarray(R, dtype=float)
    out = np.empty_like(R)
    near = R <= 2.0
    Rn = R[near]
    out[near] = 1.0 / Rn - 1.5 * np.arctan2(1.0, Rn) + Rn / (2.0 * (1.0 + Rn**2))
    out[~near] = _alternating_tail(1.0 / R[~near], lambda n: n + 1, 5)
    return out


def _int_j4(R):
    """int_R^inf (1+s^2)^-4 ds."""
    R = np.asarray(R, dtype=float)
    out = np.empty_like(R)
    near = R <= 2.0
    Rn = R[near]
    d = 1.0 + Rn**2
    inner = np.arctan(Rn)
    for n in (1, 2, 3):
        inner = Rn / (2 * n * d**n) + (2 * n - 1) / (2 * n) * inner
    out[near] = 5.0 * np.pi / 32.0 - inner
    out[~near] = _alternating_tail(1.0 / R[~near], lambda n: comb(n + 3, 3), 7)
    return out


@dataclass(frozen=True)
class OperatorSpec:
    """-d^2 + singular_coeff / R^2 + V(R); kind "ground" has V = -8/(1+R^2)^2, kind "free" V = 0."""

    kind: str = "ground"
    singular_coeff: float = 0.75

    def __post_init__(self):
        if self.kind not in ("ground", "free"):
            raise ConfigurationError(f"unknown operator kind {self.kind!r}")

    @classmethod
    def ground_state(cls):
        return cls("ground")

    @classmethod
    def free(cls):
        return cls("free")

    def potential(self, R):
        R = np.asarray(R, dtype=float)
        if self.kind == "free":
            return np.zeros_like(R)
        return -8.0 / (1.0 + R**2) ** 2

    def potential_derivatives(self, R):
        R = np.asarray(R, dtype=float)
        if self.kind == "free":
            return np.zeros_like(R), np.zeros_like(R)
        d = 1.0 + R**2
        return 32.0 * R / d**3, 32.0 / d**3 - 192.0 * R**2 / d**4

    def U(self, R):
        R = np.asarray(R, dtype=float)
        return self.singular_coeff / R**2 + self.potential(R)

    def U_derivatives(self, R):
        R = np.asarray(R, dtype=float)
        dV, d2V = self.potential_derivatives(R)
        return -2.0 * self.singular_coeff / R**3 + dV, 6.0 * self.singular_coeff / R**4 + d2V

    def tail_G(self, R):
        """int_R^inf U."""
        R = np.asarray(R, dtype=float)
        base = self.singular_coeff / R
        return base if self.kind == "free" else base - 8.0 * _int_j2(R)

    def tail_H(self, R):
        """int_R^inf U^2."""
        R = np.asarray(R, dtype=float)
        base = self.singular_coeff**2 / (3.0 * R**3)
        if self.kind == "free":
            return base
        return base - 16.0 * self.singular_coeff * _int_k2(R) + 64.0 * _int_j4(R)

    def zero_energy(self, R):
        """(phi0, phi0', theta0, theta0') with W(theta0, phi0) = 1."""
        R = np.asarray(R, dtype=float)
        sq = np.sqrt(R)
        if self.kind == "free":
            return R * sq, 1.5 * sq, 0.5 / sq, -0.25 / (R * sq)
        d = 1.0 + R**2
        phi0 = R * sq / d
        dphi0 = sq * (3.0 - R**2) / (2.0 * d**2)
        num = 1.0 - 4.0 * R**2 * np.log(R) - R**4
        dnum = -8.0 * R * np.log(R) - 4.0 * R - 4.0 * R**3
        den = 2.0 * sq * d
        dden = (1.0 + 5.0 * R**2) / sq
        return phi0, dphi0, num / den, (dnum * den - num * dden) / den**2


# WKB
def wkb_symbols(R, operator):
    """f_j and f_j' for j = 0..3 of sigma = sum_j k^-j f_j."""
    R = np.asarray(R, dtype=float)
    U = operator.U(R)
    dU, d2U = operator.U_derivatives(R)
    G = operator.tail_G(R)
    H = operator.tail_H(R)
    one = np.ones_like(R, dtype=complex)
    f1 = 0.5j * G
    f2 = U / 4.0 - G**2 / 8.0
    df2 = dU / 4.0 + G * U / 4.0
    d2f2 = d2U / 4.0 + (-(U**2) + G * dU) / 4.0
    f3 = 0.5j * (dU / 4.0 + G * U / 4.0 + H / 4.0 - G**3 / 24.0)
    df3 = 0.5j * (d2f2 - U * f2)
    f = [one, f1, f2 * one, f3]
    df = [0.0 * one, -0.5j * U, df2 * one, df3]
    return f, df


def wkb_amplitude(R, xi, operator, terms=4):
    """sigma and d sigma / dR."""
    if not 1 <= terms <= 4:
        raise ConfigurationError(f"WKB supports 1 to 4 terms, got {terms}")
    k = math.sqrt(xi)
    f, df = wkb_symbols(R, operator)
    sigma = sum(f[j] * k ** (-j) for j in range(terms))
    dsigma = sum(df[j] * k ** (-j) for j in range(terms))
    return sigma, dsigma


def psi_plus_wkb(R, xi, j0=4, operator=None, q_min=5.0, derivative=False):
    """psi+ = xi^(-1/4) e^(i R xi^(1/2)) sigma; valid for q = R xi^(1/2) >= q_min."""
    if xi <= 0:
        raise DomainError(f"psi_plus_wkb needs xi > 0, got {xi}")
    operator = operator or OperatorSpec.ground_state()
    R = np.asarray(R, dtype=float)
    k = math.sqrt(xi)
    if np.any(R * k < q_min * (1 - 1e-12)):
        raise DomainError(f"psi_plus_wkb needs q >= {q_min}, got q = {np.min(R * k):.3g}")
    sigma, dsigma = wkb_amplitude(R, xi, operator, j0)
    phase = xi**-0.25 * np.exp(1j * k * R)
    psi = phase * sigma
    if not derivative:
        return psi
    return psi, phase * (1j * k * sigma + dsigma)


# Series tables
def _exp_weights(alpha, h):
    """Weights of int_0^h e^(-alpha (h-s)) g(s) ds from g at s = h, 0, -h, -2h."""
    nodes, wts = np.polynomial.legendre.leggauss(10)
    s = 0.5 * h * (nodes + 1.0)
    kern = np.exp(-alpha * (h - s)) * 0.5 * h * wts
    pts = np.array([h, 0.0, -h, -2.0 * h])
    c = np.empty(4)
    for i in range(4):
        basis = np.ones_like(s)
        for m in range(4):
            if m != i:
                basis *= (s - pts[m]) / (pts[i] - pts[m])
        c[i] = np.sum(kern * basis)
    return c, math.exp(-alpha * h)


def _local_slope(g, h):
    if g[0] != 0 and g[1] != 0 and np.sign(g[0]) == np.sign(g[1]):
        return math.log(g[1] / g[0]) / h
    return 0.0


def weighted_cumulative(g, x, alpha):
    """y(x) = int_-inf^x e^(-alpha (x - x')) g(x') dx' on a uniform grid."""
    h = x[1] - x[0]
    c, E = _exp_weights(alpha, h)
    gamma = _local_slope(g, h)
    if alpha + gamma <= 0:
        raise PreconditionError(f"weighted integral diverges at the left end (alpha + gamma = {alpha + gamma:.3f})")
    head = g[0] / (alpha + gamma)
    ghosts = g[0] * np.exp(-gamma * h * np.arange(3, 0, -1))
    cells = lfilter(c, [1.0], np.concatenate([ghosts, g]))[4:]
    return lfilter([1.0], [1.0, -E], np.concatenate([[head], cells]))


def _log_head(h, x):
    if h[0] == 0:
        return 0.0
    gamma = _local_slope(h, x[1] - x[0])
    if gamma <= 0:
        raise PreconditionError(f"integrand not integrable at R -> 0 (log-slope {gamma:.3f})")
    return h[0] / gamma


class PhiSeriesTables:
    """phi(R, z) = phi0(R) + R^(-1/2) sum_j (R^2 z)^j phi_j(R^2).

    Columns hold phi_j(R^2) and R^(3/2 - 2j) d/dR[R^(2j - 1/2) phi_j(R^2)]
    on a uniform grid in ln R.
    """

    def __init__(self, operator, R_max, R_min=1e-6, dx=SERIES_DX, j_max=PHI_J_MAX):
        self.operator = operator
        self.j_max = j_max
        self.x = np.arange(math.log(R_min), math.log(R_max) + dx, dx)
        self.R = np.exp(self.x)
        R = self.R
        p0, dp0, t0, dt0 = operator.zero_energy(R)
        sq = np.sqrt(R)
        phi = np.empty((R.size, j_max + 1))
        dphi = np.empty_like(phi)
        phi[:, 0] = sq * p0
        dphi[:, 0] = R * sq * dp0
        for j in range(1, j_max + 1):
            prev = phi[:, j - 1]
            A = weighted_cumulative(p0 * prev / (R * sq), self.x, 2.0 * j)
            B = weighted_cumulative(t0 * prev / (R * sq), self.x, 2.0 * j)
            phi[:, j] = sq * (t0 * A - p0 * B)
            dphi[:, j] = R * sq * (dt0 * A - dp0 * B)
        self.phi = phi
        self.dphi = dphi
        self._spline = make_interp_spline(self.x, phi, k=5, axis=0)
        self._dspline = make_interp_spline(self.x, dphi, k=5, axis=0)
        logger.info(f"phi series tables: {R.size} radii, {j_max} terms, R_max={R_max:.3g}")

    def coefficient(self, j, u):
        """phi_j(u)."""
        u = np.asarray(u, dtype=float)
        return self._spline(0.5 * np.log(u))[..., j]

    def evaluate(self, R, z, tol=1e-14, derivative=False):
        R = np.atleast_1d(np.asarray(R, dtype=float))
        if np.any(R > self.R[-1] * (1 + 1e-12)):
            raise DomainError(f"R={np.max(R):.4g} beyond the series table (R_max={self.R[-1]:.4g})")
        if np.any(R**2 * abs(z) > 4.0 * (1 + 1e-12)):
            raise PreconditionError("series evaluation needs R^2 |z| <= 4")
        p0, dp0, _, _ = self.operator.zero_energy(R)
        x = np.log(np.maximum(R, self.R[0]))
        cols = self._spline(x)
        dcols = self._dspline(x) if derivative else None
        w = R**2 * z
        total = p0.astype(complex if np.iscomplexobj(z) else float)
        dtotal = dp0.astype(total.dtype)
        power = np.ones_like(total)
        quiet = 0
        for j in range(1, self.j_max + 1):
            power = power * w
            term = power * cols[:, j] / np.sqrt(R)
            total = total + term
            if derivative:
                dtotal = dtotal + power * dcols[:, j] / (R * np.sqrt(R))
            small = np.all(np.abs(term) <= tol * np.maximum(np.abs(total), 1e-300))
            quiet = quiet + 1 if small else 0
            if quiet >= 2:
                break
        else:
            raise ConvergenceError(f"phi series did not reach tol={tol} within {self.j_max} terms")
        return (total, dtotal) if derivative else total


class ThetaSeriesTables:
    """theta(R, z) = sum_j z^j Theta_j(R) on [1e-3, 1e3], B-integrals based at R = 1."""

    def __init__(self, operator, dx=SERIES_DX, j_max=THETA_J_MAX):
        self.operator = operator
        self.j_max = j_max
        n = int(math.ceil(math.log(THETA_R_RANGE[1]) / dx))
        self.x = dx * np.arange(-n, n + 1)
        self.R = np.exp(self.x)
        R = self.R
        p0, dp0, t0, dt0 = operator.zero_energy(R)
        theta = np.empty((R.size, j_max + 1))
        dtheta = np.empty_like(theta)
        theta[:, 0] = t0
        dtheta[:, 0] = dt0
        for j in range(1, j_max + 1):
            prev = theta[:, j - 1]
            hA = p0 * prev * R
            hB = t0 * prev * R
            A = _log_head(hA, self.x) + cumulative_simpson(hA, x=self.x, initial=0.0)
            C = cumulative_simpson(hB, x=self.x, initial=0.0)
            B = C - C[n]
            theta[:, j] = t0 * A - p0 * B
            dtheta[:, j] = dt0 * A - dp0 * B
        self.theta = theta
        self.dtheta = dtheta
        self._spline = make_interp_spline(self.x, theta, k=5, axis=0)
        self._dspline = make_interp_spline(self.x, dtheta, k=5, axis=0)

    def evaluate(self, R, z, tol=1e-14, derivative=False):
        R = np.atleast_1d(np.asarray(R, dtype=float))
        if np.any(R < THETA_R_RANGE[0] * (1 - 1e-12)) or np.any(R > THETA_R_RANGE[1] * (1 + 1e-12)):
            raise DomainError(f"theta series is tabulated on R in {THETA_R_RANGE}")
        if np.any(R**2 * abs(z) > 4.0 * (1 + 1e-12)):
            raise PreconditionError("series evaluation needs R^2 |z| <= 4")
        x = np.log(R)
        cols = self._spline(x)
        dcols = self._dspline(x) if derivative else None
        dtype = complex if np.iscomplexobj(z) else float
        total = cols[:, 0].astype(dtype)
        dtotal = dcols[:, 0].astype(dtype) if derivative else None
        power = 1.0
        quiet = 0
        for j in range(1, self.j_max + 1):
            power = power * z
            term = power * cols[:, j]
            total = total + term
            if derivative:
                dtotal = dtotal + power * dcols[:, j]
            small = np.all(np.abs(term) <= tol * np.maximum(np.abs(total), 1e-300))
            quiet = quiet + 1 if small else 0
            if quiet >= 2:
                break
        else:
            raise ConvergenceError(f"theta series did not reach tol={tol} within {self.j_max} terms")
        return (total, dtotal) if derivative else total


@lru_cache(maxsize=8)
def _phi_tables_cached(kind, decade):
    return PhiSeriesTables(OperatorSpec(kind), R_max=10.0**decade)


@lru_cache(maxsize=2)
def _theta_tables_cached(kind):
    return ThetaSeriesTables(OperatorSpec(kind))


def phi_tables_for(operator, R_max):
    return _phi_tables_cached(operator.kind, max(1, math.ceil(math.log10(R_max))))


def phi_series(R, z, tol=1e-14, operator=None, derivative=False):
    operator = operator or OperatorSpec.ground_state()
    R_arr = np.atleast_1d(np.asarray(R, dtype=float))
    tables = phi_tables_for(operator, float(np.max(R_arr)) * 1.01)
    return tables.evaluate(R_arr, z, tol, derivative)


def theta_series(R, z, tol=1e-14, operator=None, derivative=False):
    operator = operator or OperatorSpec.ground_state()
    return _theta_tables_cached(operator.kind).evaluate(R, z, tol, derivative)


def fit_series_constant(tables, j_max=10, u_max=1e3):
    """Smallest C with |phi_j(u)| <= 3 C^j ln(1+u)/(j-1)! for j <= j_max on the tabulated u <= u_max."""
    u = tables.R**2
    mask = u <= u_max
    per_j = {}
    for j in range(1, j_max + 1):
        ratio = np.abs(tables.phi[mask, j]) * math.factorial(j - 1) / (3.0 * np.log1p(u[mask]))
        per_j[j] = float(np.max(ratio)) ** (1.0 / j)
    return max(per_j.values()), per_j


# Three-zone phi at one energy
class SpectralColumn:
    """phi(., xi): series for R xi^(1/2) <= 1, ODE in q = R xi^(1/2) up to q_match, WKB beyond."""

    def __init__(self, xi, operator=None, phi_tables=None, q_match=60.0, wkb_terms=4, rtol=1e-12, with_theta=False):
        if xi <= 0:
            raise DomainError(f"spectral column needs xi > 0, got {xi}")
        self.xi = float(xi)
        self.k = math.sqrt(xi)
        self.operator = operator or OperatorSpec.ground_state()
        self.q_match = q_match
        self.wkb_terms = wkb_terms
        k = self.k
        self.R_series = 1.0 / k
        self.match_radius = q_match / k
        self.phi_tables = phi_tables or phi_tables_for(self.operator, 1.01 * self.R_series)
        p, dp = self.phi_tables.evaluate(self.R_series, self.xi, derivative=True)
        y0 = [p[0], dp[0] / k]
        if with_theta:
            t, dt = theta_series(self.R_series, self.xi, operator=self.operator, derivative=True)
            y0 += [t[0], dt[0] / k]
        y0 = np.array(y0, dtype=float)
        op, xi_ = self.operator, self.xi

        def rhs(q, y):
            coeff = op.U(q / k) / xi_ - 1.0
            out = np.empty_like(y)
            out[0::2] = y[1::2]
            out[1::2] = coeff * y[0::2]
            return out

        self._sol = solve_ivp(
            rhs,
            (1.0, q_match),
            y0,
            method="DOP853",
            rtol=rtol,
            atol=1e-14 * np.max(np.abs(y0)),
            dense_output=True,
        )
        if not self._sol.success:
            raise ConvergenceError(f"ODE continuation failed at xi={xi:.4g}: {self._sol.message}")
        self.with_theta = with_theta
        self.a = self._connection()
        self.rho = 1.0 / (4.0 * math.pi * abs(self.a) ** 2)

    def _seam_samples(self, row):
        qs = self.q_match - np.array([10.0, 5.0, 0.0])
        R = qs / self.k
        psi, dpsi = psi_plus_wkb(R, self.xi, self.wkb_terms, self.operator, q_min=qs[0], derivative=True)
        y = self._sol.sol(qs)
        return psi, dpsi, y[row], self.k * y[row + 1]

    @staticmethod
    def _averaged(samples, what, xi):
        mean = np.mean(samples)
        spread = float(np.max(np.abs(samples - mean)) / abs(mean))
        if spread > SPREAD_FAIL:
            logger.error(f"{what} Wronskian spread {spread:.2e} at xi={xi:.4g}")
            raise AccuracyError(f"{what} Wronskian spread {spread:.2e} exceeds {SPREAD_FAIL} at xi={xi:.4g}")
        if spread > SPREAD_WARN:
            logger.warning(f"{what} Wronskian spread {spread:.2e} at xi={xi:.4g}")
        return complex(mean)

    def _connection(self):
        psi, dpsi, phi, dphi = self._seam_samples(0)
        # a = (i/2) W(phi, psi-)
        samples = 0.5j * (phi * np.conj(dpsi) - dphi * np.conj(psi))
        a = self._averaged(samples, "connection", self.xi)
        if a == 0:
            raise AccuracyError(f"connection coefficient vanished at xi={self.xi:.4g}")
        return a

    def weyl_m(self):
        """m = -W(psi+, theta) / W(psi+, phi)."""
        if not self.with_theta:
            raise ConfigurationError("column built without theta")
        psi, dpsi, phi, dphi = self._seam_samples(0)
        _, _, th, dth = self._seam_samples(2)
        samples = -(psi * dth - dpsi * th) / (psi * dphi - dpsi * phi)
        return self._averaged(samples, "m-function", self.xi)

    def theta_phi_wronskian(self, q):
        """W(theta, phi) at R = q / sqrt(xi), for 1 <= q <= q_match."""
        if not self.with_theta:
            raise ConfigurationError("column built without theta")
        y = self._sol.sol(np.asarray(q, dtype=float))
        return self.k * (y[2] * y[1] - y[3] * y[0])

    def evaluate(self, R, derivative=False):
        R = np.atleast_1d(np.asarray(R, dtype=float))
        val = np.empty(R.shape)
        der = np.empty(R.shape)
        z1 = R <= self.R_series
        z3 = R > self.match_radius
        z2 = ~(z1 | z3)
        if np.any(z1):
            out = self.phi_tables.evaluate(R[z1], self.xi, derivative=derivative)
            if derivative:
                val[z1], der[z1] = out
            else:
                val[z1] = out
        if np.any(z2):
            y = self._sol.sol(self.k * R[z2])
            val[z2] = y[0]
            der[z2] = self.k * y[1]
        if np.any(z3):
            psi, dpsi = psi_plus_wkb(R[z3], self.xi, self.wkb_terms, self.operator, q_min=0.0, derivative=True)
            val[z3] = 2.0 * np.real(self.a * psi)
            der[z3] = 2.0 * np.real(self.a * dpsi)
        return (val, der) if derivative else val


def phi_global(R, xi, tables=None, operator=None, derivative=False):
    if xi <= 0:
        raise DomainError(f"phi_global needs xi > 0, got {xi}")
    if tables is not None:
        idx = np.flatnonzero(np.isclose(tables.xi_grid, xi, rtol=1e-13, atol=0.0))
        column = tables.column(int(idx[0])) if idx.size else tables.column_at(xi)
    else:
        column = SpectralColumn(xi, operator)
    return column.evaluate(R, derivative)


def connection_a(xi, operator=None, q_match=60.0, wkb_terms=4):
    return SpectralColumn(xi, operator, q_match=q_match, wkb_terms=wkb_terms).a


def rho(xi, operator=None, q_match=60.0):
    return 1.0 / (4.0 * math.pi * abs(connection_a(xi, operator, q_match)) ** 2)


def weyl_m(xi, operator=None):
    if not THETA_R_RANGE[0] ** 2 <= 1.0 / xi <= THETA_R_RANGE[1] ** 2:
        raise DomainError(f"m-function needs 1/sqrt(xi) inside {THETA_R_RANGE}, got xi={xi:.3g}")
    return SpectralColumn(xi, operator, with_theta=True).weyl_m()


# Quadrature helpers
def simpson_weights(n, h):
    """Composite Simpson weights; 3/8 rule on the last panel when n is even."""
    w = np.zeros(n)
    if n < 2:
        return w
    if n == 2:
        w[:] = 0.5 * h
        return w
    if n % 2 == 1:
        w[0:n:2] = 2.0 * h / 3.0
        w[1:n:2] = 4.0 * h / 3.0
        w[0] = w[-1] = h / 3.0
        return w
    w[: n - 3] = simpson_weights(n - 3, h)
    w[n - 4 :] += 3.0 * h / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def filon_coefficients(theta):
    """Filon alpha, beta, gamma; series below |theta| = 1/6. Accepts arrays."""
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < 1.0 / 6.0
    t2 = theta * theta
    a_series = theta * t2 * (2.0 / 45.0 - 2.0 * t2 / 315.0 + 2.0 * t2 * t2 / 4725.0)
    b_series = 2.0 / 3.0 + t2 * (2.0 / 15.0 - 4.0 * t2 / 105.0 + 2.0 * t2 * t2 / 567.0)
    g_series = 4.0 / 3.0 - t2 * (2.0 / 15.0 - t2 / 210.0 + t2 * t2 / 11340.0)
    t = np.where(small, 1.0, theta)
    s, c = np.sin(t), np.cos(t)
    t3 = t**3
    alpha = np.where(small, a_series, (t**2 + t * s * c - 2.0 * s * s) / t3)
    beta = np.where(small, b_series, 2.0 * (t * (1.0 + c * c) - 2.0 * s * c) / t3)
    gamma = np.where(small, g_series, 4.0 * (s - t * c) / t3)
    return alpha, beta, gamma


def filon_weights(x, k):
    """Complex weights c with int g e^(ikx) dx = sum c g on a uniform grid with an odd point count."""
    n = x.size
    if n < 3 or n % 2 == 0:
        raise ConfigurationError(f"Filon rule needs an odd number of points >= 3, got {n}")
    h = x[1] - x[0]
    alpha, beta, gamma = filon_coefficients(k * h)
    E = np.exp(1j * k * x)
    c = np.empty(n, dtype=complex)
    c[0:n:2] = beta * E[0:n:2]
    c[1:n:2] = gamma * E[1:n:2]
    c[0] = (0.5 * beta + 1j * alpha) * E[0]
    c[-1] = (0.5 * beta - 1j * alpha) * E[-1]
    return h * c


def filon_exp(g, x, k):
    return np.sum(filon_weights(x, k) * g)


@dataclass
class QuadratureGrid:
    """Log-spaced radii up to r_split, then uniform pieces given as (r_end, step) pairs."""

    r_min: float
    r_split: float = 0.05
    n_log: int = 300
    segments: tuple = ((8.0, 0.004),)

    def __post_init__(self):
        self.segments = tuple(tuple(float(v) for v in s) for s in self.segments)
        R_log = np.geomspace(self.r_min, self.r_split, self.n_log)
        pieces = [R_log]
        self.bounds = []
        start, idx = self.r_split, self.n_log - 1
        for r_end, step in self.segments:
            if r_end <= start:
                raise ConfigurationError(f"quadrature segments must increase, got {r_end} after {start}")
            panels = max(2, 2 * math.ceil((r_end - start) / (2.0 * step)))
            pieces.append(np.linspace(start, r_end, panels + 1)[1:])
            self.bounds.append((idx, idx + panels, (r_end - start) / panels))
            idx += panels
            start = r_end
        self.R = np.concatenate(pieces)
        self.split = self.n_log - 1
        self.dx = math.log(R_log[1] / R_log[0])
        self.r_cut = start

    @property
    def key(self):
        return (self.r_min, self.r_split, self.n_log, self.segments)

    @classmethod
    def for_params(cls, params):
        step = (params.r_cut - 0.05) / (params.n_r_quad - 1)
        return cls(params.grid_R.min, 0.05, 300, ((params.r_cut, step),))

    @classmethod
    def for_cone(cls, r_min, r_cone, k_max):
        """Grid reaching r_cone; the first piece resolves frequencies up to k_max."""
        segments = [(min(2.0, r_cone), min(0.004, 0.25 / k_max))]
        if r_cone > 2.0:
            segments.append((min(20.0, r_cone), 0.02))
        if r_cone > 20.0:
            segments.append((r_cone, 0.1))
        return cls(r_min, 0.05, 300, tuple(segments))

    def plain_weights(self, last):
        """Weights of int_{R_0}^{R_last} g dR."""
        w = np.zeros(self.R.size)
        m = min(last, self.split)
        w[: m + 1] = simpson_weights(m + 1, self.dx) * self.R[: m + 1]
        for s0, s1, h in self.bounds:
            if last <= s0:
                break
            e = min(last, s1)
            w[s0 : e + 1] += simpson_weights(e - s0 + 1, h)
        return w

    def oscillatory_start(self, m):
        """Move m inside its uniform piece so that the piece end is an even number of panels away."""
        for s0, s1, _ in self.bounds:
            if s0 <= m < s1:
                if (s1 - m) % 2 == 1:
                    m = m - 1 if m - 1 >= s0 else m + 1
                return m
        return m


# Tables over the xi grid
@dataclass
class SpectralTables:
    operator: OperatorSpec
    xi_grid: np.ndarray
    a_values: np.ndarray
    rho_values: np.ndarray
    match_radius: np.ndarray
    R_grid: np.ndarray
    phi_samples: np.ndarray
    q_match: float = 60.0
    wkb_terms: int = 4
    tol_quad: float = 1e-6
    _phi_tables: object = field(default=None, repr=False)
    _forward: dict = field(default_factory=dict, repr=False)

    @property
    def phi_tables(self):
        if self._phi_tables is None:
            self._phi_tables = phi_tables_for(self.operator, 1.01 / math.sqrt(self.xi_grid[0]))
        return self._phi_tables

    def column(self, i):
        return self.column_at(self.xi_grid[i])

    def column_at(self, xi):
        return SpectralColumn(xi, self.operator, self.phi_tables, self.q_match, self.wkb_terms)

    def phi_matrix(self, R):
        """phi(R_i, xi_j), shape (len(R), len(xi_grid))."""
        R = np.asarray(R, dtype=float)
        if R.shape == self.R_grid.shape and np.array_equal(R, self.R_grid):
            return self.phi_samples
        out = np.empty((R.size, self.xi_grid.size))
        for j in range(self.xi_grid.size):
            out[:, j] = self.column(j).evaluate(R)
        return out

    def log_rho_derivative(self):
        """xi rho'(xi) / rho(xi) by centered differences in ln xi."""
        return np.gradient(np.log(self.rho_values), np.log(self.xi_grid))

    def low_frequency_mass(self):
        """int_0^xi_min rho dxi from a quadratic fit of 1/(4 pi rho xi) in ln xi."""
        y = np.log(self.xi_grid)
        low = y <= y[0] + math.log(10.0)
        if self.operator.kind == "free":
            # rho ~ c xi^p with p > -1 at small energies
            p, _ = np.polyfit(y[low], np.log(self.rho_values[low]), 1)
            return float(self.rho_values[0] * self.xi_grid[0] / (p + 1.0))
        target = 1.0 / (4.0 * math.pi * self.rho_values[low] * self.xi_grid[low])
        A, B, C = np.polyfit(y[low], target, 2)
        D = 4.0 * A * C - B * B
        y0 = y[0]
        if A > 0 and D > 0:
            sq = math.sqrt(D)
            return (1.0 / (4.0 * math.pi)) * (2.0 / sq) * (math.atan((2.0 * A * y0 + B) / sq) + 0.5 * math.pi)
        logger.warning("low-frequency fit is not positive definite; using the leading log law")
        return 1.0 / (4.0 * math.pi * abs(A) * abs(y0))

    def measure_weights(self):
        """Weights w with int g rho dxi ~ sum w g on the xi grid (without the low-frequency mass)."""
        y = np.log(self.xi_grid)
        return simpson_weights(y.size, y[1] - y[0]) * self.xi_grid * self.rho_values

    def forward_matrix(self, quad):
        """M with fhat(xi_i) = sum_j M[i, j] f(quad.R[j])."""
        if quad.key in self._forward:
            return self._forward[quad.key]
        R = quad.R
        M = np.zeros((self.xi_grid.size, R.size))
        end = R.size - 1
        for i, xi in enumerate(self.xi_grid):
            col = self.column(i)
            m = int(np.searchsorted(R, col.match_radius, side="right")) - 1
            if m >= end:
                M[i] = quad.plain_weights(end) * col.evaluate(R)
                continue
            if m < quad.split:
                raise ConfigurationError(f"matching radius {col.match_radius:.3g} below the uniform quadrature zone")
            m = quad.oscillatory_start(m)
            M[i, : m + 1] = quad.plain_weights(m)[: m + 1] * col.evaluate(R[: m + 1])
            scale = col.a * xi**-0.25
            for s0, s1, _ in quad.bounds:
                if s1 <= m:
                    continue
                lo = max(s0, m)
                Rt = R[lo : s1 + 1]
                sigma, _ = wkb_amplitude(Rt, xi, self.operator, self.wkb_terms)
                M[i, lo : s1 + 1] += 2.0 * np.real(scale * filon_weights(Rt, col.k) * sigma)
        self._forward[quad.key] = M
        logger.info(f"forward transform matrix built: {M.shape[0]} x {M.shape[1]}")
        return M

    def inverse_matrix(self, R):
        """A with f(R_i) = sum_j A[i, j] fhat(xi_j), low-frequency mass included."""
        Phi = self.phi_matrix(R)
        A = Phi * self.measure_weights()[None, :]
        A[:, 0] += Phi[:, 0] * self.low_frequency_mass()
        return A

    def to_arrays(self):
        return {
            "xi_grid": self.xi_grid,
            "a_values": self.a_values,
            "rho_values": self.rho_values,
            "match_radius": self.match_radius,
            "R_grid": self.R_grid,
            "phi_samples": self.phi_samples,
            "meta": np.array([self.q_match, self.wkb_terms, self.tol_quad]),
            "kind": np.array(self.operator.kind),
        }

    @classmethod
    def from_arrays(cls, arrays):
        q_match, wkb_terms, tol_quad = arrays["meta"]
        return cls(
            OperatorSpec(str(arrays["kind"])),
            arrays["xi_grid"],
            arrays["a_values"],
            arrays["rho_values"],
            arrays["match_radius"],
            arrays["R_grid"],
            arrays["phi_samples"],
            float(q_match),
            int(wkb_terms),
            float(tol_quad),
        )


def build_spectral_tables(params, operator=None, R_grid=None, xi_grid=None):
    operator = operator or OperatorSpec.ground_state()
    xi_grid = params.grid_xi.points() if xi_grid is None else np.asarray(xi_grid, dtype=float)
    R_grid = params.grid_R.points() if R_grid is None else np.asarray(R_grid, dtype=float)
    phi_tables = phi_tables_for(operator, 1.01 / math.sqrt(xi_grid[0]))
    n = xi_grid.size
    a_values = np.empty(n, dtype=complex)
    phi_samples = np.empty((R_grid.size, n))
    match = np.empty(n)
    step = max(1, n // 10)
    for i, xi in enumerate(xi_grid):
        col = SpectralColumn(xi, operator, phi_tables, params.q_match, params.wkb_terms, params.ode_rtol)
        a_values[i] = col.a
        match[i] = col.match_radius
        phi_samples[:, i] = col.evaluate(R_grid)
        if (i + 1) % step == 0:
            logger.info(f"spectral tables: {i + 1}/{n} columns")
    rho_values = 1.0 / (4.0 * math.pi * np.abs(a_values) ** 2)
    tables = SpectralTables(
        operator,
        xi_grid,
        a_values,
        rho_values,
        match,
        R_grid,
        phi_samples,
        params.q_match,
        params.wkb_terms,
        params.tol_quad,
        phi_tables,
    )
    logger.info(f"Built spectral tables for {operator.kind} operator on {n} energies")
    return tables


# Distorted Fourier transform
def distorted_ft(f, tables, quad=None):
    """fhat(xi) = int phi(R, xi) f(R) dR."""
    quad = quad or QuadratureGrid(float(f.x[0]))
    values = np.asarray(f(quad.R), dtype=float)
    outside = quad.R > f.x[-1]
    values[outside] = 0.0
    scale = np.max(np.abs(values))
    if scale == 0:
        return GridFunction(tables.xi_grid, np.zeros(tables.xi_grid.size))
    edge = quad.R >= 0.95 * quad.r_cut
    tail = np.max(np.abs(values[edge]))
    if tail > tables.tol_quad * scale:
        raise AccuracyError(f"source not negligible at the quadrature cut: tail {tail / scale:.2e}")
    return GridFunction(tables.xi_grid, tables.forward_matrix(quad) @ values)


def distorted_ft_samples(values, tables, quad):
    """Transform of samples on quad.R; values may carry a leading batch axis."""
    values = np.asarray(values, dtype=float)
    return values @ tables.forward_matrix(quad).T


def inverse_distorted_ft(fhat, tables, R=None):
    """f(R) = int phi(R, xi) fhat(xi) rho(xi) dxi, including the mass below xi_min."""
    R = tables.R_grid if R is None else np.asarray(R, dtype=float)
    values = fhat.y if isinstance(fhat, GridFunction) else np.asarray(fhat)
    return GridFunction(R, tables.inverse_matrix(R) @ values, (1.5, 0), None)


def sobolev_norm(fhat, tables, alpha):
    """(int |fhat|^2 <xi>^(2 alpha) rho dxi)^(1/2)."""
    values = fhat.y if isinstance(fhat, GridFunction) else np.asarray(fhat)
    weight = (1.0 + tables.xi_grid**2) ** alpha
    total = np.sum(tables.measure_weights() * weight * np.abs(values) ** 2)
    total += tables.low_frequency_mass() * abs(values[0]) ** 2
    return math.sqrt(total)
