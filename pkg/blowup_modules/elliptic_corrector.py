"""Elliptic profile corrections near the origin (odd steps) and near the cone (even steps).

Corrections are stored as v = T^(-p) G(R, a) with T = t lambda(t), and all
errors are the normalized quantity t^2 e with

    e = (-d_t^2 + d_r^2 + r^-1 d_r) u - sin(2u) / (2 r^2).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp
from scipy.interpolate import RectBivariateSpline, make_interp_spline

from blowup_modules.errors import (
    ConfigurationError,
    DomainError,
    PreconditionError,
    StateError,
)
from blowup_modules.profile_core import (
    GridFunction,
    e0_scaled,
    ground_state,
    lambda_scale,
    log_grid,
    logistic_grid,
)

logger = logging.getLogger(__name__)

# Sources of odd steps are evaluated at T_eff = (T^16 + T_STAR^16)^(1/16)
T_STAR = 2.0
T_EFF_POWER = 16


def cos2Q(R):
    R2 = np.asarray(R, dtype=float) ** 2
    return (1.0 - 6.0 * R2 + R2**2) / (1.0 + R2) ** 2


def sin2Q(R):
    R = np.asarray(R, dtype=float)
    R2 = R**2
    return 4.0 * R * (1.0 - R2) / (1.0 + R2) ** 2


def sin_minus_identity(x):
    """sin(x) - x without cancellation for small |x|."""
    x = np.asarray(x, dtype=float)
    out = np.sin(x) - x
    small = np.abs(x) < 0.1
    if np.any(small):
        xs = x[small]
        x2 = xs * xs
        # -x^3/3! + x^5/5! - ... through x^13
        series = np.zeros_like(xs)
        term = -xs * x2 / 6.0
        for n in range(1, 7):
            series += term
            term = -term * x2 / ((2 * n + 2) * (2 * n + 3))
        out[small] = series
    return out


def cos_minus_one(x):
    return -2.0 * np.sin(0.5 * np.asarray(x, dtype=float)) ** 2


def nonlinear_remainder(w, R, T):
    """-(T^2/2R^2)[sin2Q (cos2w - 1) + cos2Q (sin2w - 2w)]."""
    return -(T**2) / (2.0 * R**2) * (sin2Q(R) * cos_minus_one(2.0 * w) + cos2Q(R) * sin_minus_identity(2.0 * w))


def _power_head(h, x):
    """Integral of h over (-inf, x[0]) in the log variable, assuming h ~ exp(gamma x)."""
    h0, h1 = h[0], h[1]
    if h0 == 0:
        return 0.0, np.inf
    if h1 == 0 or np.sign(h1) != np.sign(h0):
        raise PreconditionError("integrand changes sign at the left endpoint; refine the grid")
    gamma = (np.log(abs(h1)) - np.log(abs(h0))) / (x[1] - x[0])
    if gamma <= 0.05:
        raise PreconditionError(f"integrand not integrable at the endpoint (log-slope {gamma:.3f})")
    return h0 / gamma, gamma


# Radial operator L = d^2 + d/R - cos(2Q)/R^2
def _radial_phi(R):
    return R**1.5 / (1.0 + R**2)


def _radial_theta(R):
    return (-1.0 + 4.0 * R**2 * np.log(R) + R**4) / (np.sqrt(R) * (1.0 + R**2))


def _radial_weighted_derivatives(R):
    """d/dR of R^-1/2 phi and R^-1/2 theta."""
    d = 1.0 + R**2
    dphi = (1.0 - R**2) / d**2
    num = -1.0 + 4.0 * R**2 * np.log(R) + R**4
    dnum = 8.0 * R * np.log(R) + 4.0 * R + 4.0 * R**3
    dtheta = (dnum * R * d - num * (d + 2.0 * R**2)) / (R * d) ** 2
    return dphi, dtheta


def solve_radial_L(f, R=None):
    """Solve L v = f with v(0) = v'(0) = 0 by variation of parameters.

    f is a GridFunction on a log grid in R or a callable evaluated on R.
    Returns a GridFunction carrying v and v_R.
    """
    if isinstance(f, GridFunction):
        R = f.x
        fv = np.asarray(f.y, dtype=float)
    else:
        if R is None:
            raise ConfigurationError("solve_radial_L needs a grid when f is a callable")
        R = np.asarray(R, dtype=float)
        fv = np.asarray(f(R), dtype=float)
    if not np.all(np.isfinite(fv)):
        raise PreconditionError("source is not finite on the grid")
    if not np.allclose(np.diff(np.log(R)), np.log(R[1] / R[0]), rtol=1e-6):
        raise ConfigurationError("solve_radial_L needs a log-spaced grid")

    x = np.log(R)
    sq = np.sqrt(R)
    phi = _radial_phi(R)
    theta = _radial_theta(R)
    if not np.any(fv):
        zeros = np.zeros_like(R)
        return GridFunction(R, zeros, (3, 0), (1, 1), dy=zeros)

    # integrands in d(ln s)
    hA = phi * sq * fv * R
    hB = theta * sq * fv * R
    headA, _ = _power_head(hA, x) if hA[0] != 0 else (0.0, np.inf)
    headB, _ = _power_head(hB, x) if hB[0] != 0 else (0.0, np.inf)
    A = headA + cumulative_simpson(hA, x=x, initial=0.0)
    B = headB + cumulative_simpson(hB, x=x, initial=0.0)

    v = 0.5 / sq * (theta * A - phi * B)
    dphi_w, dtheta_w = _radial_weighted_derivatives(R)
    dv = 0.5 * (dtheta_w * A - dphi_w * B)
    return GridFunction(R, v, (3, 0), (1, 1), dy=dv)


# L_beta = (1-a^2) d^2 + (1/a + (2 beta - 2) a) d + (beta - beta^2 - a^-2)
def lbeta_apply(w, dw, d2w, a, beta):
    return (1.0 - a**2) * d2w + (1.0 / a + (2.0 * beta - 2.0) * a) * dw + (beta - beta**2 - 1.0 / a**2) * w


def lbeta_second_derivative(rhs, w, dw, a, beta):
    """w'' from L_beta w = rhs."""
    return (rhs - (1.0 / a + (2.0 * beta - 2.0) * a) * dw - (beta - beta**2 - 1.0 / a**2) * w) / (1.0 - a**2)


def _lbeta_log_rhs(beta, forcing=None):
    """ODE in x = ln a for the state (w, a w')."""

    def rhs(x, state):
        a = np.exp(x)
        w, z = state[0::2], state[1::2]
        src = a**2 * forcing(a) if forcing is not None else 0.0
        a2w2 = (src - (1.0 + (2.0 * beta - 2.0) * a**2) * z - ((beta - beta**2) * a**2 - 1.0) * w) / (1.0 - a**2)
        out = np.empty_like(state)
        out[0::2] = z
        out[1::2] = z + a2w2
        return out

    return rhs


class LBetaBasis:
    """Fundamental pair of L_beta y = 0 on (0, 1).

    phi2 = (1-a)^(beta+1/2) (1 + O(1-a)); phi1 = 1 + O(1-a), with a
    c1 phi2 ln(1-a) term when beta + 1/2 is an integer.
    Series in s = 1 - a on [a_glue, 1), ODE continuation in ln a below.
    """

    def __init__(self, beta, n_terms=110, a_glue=0.5, a_low=1e-4, rtol=1e-12):
        if beta <= 0.5:
            raise DomainError(f"L_beta basis needs beta > 1/2, got {beta}")
        self.beta = float(beta)
        self.n_terms = n_terms
        self.a_glue = a_glue
        self.a_low = a_low
        b = self.beta
        self._p2 = np.array([0.0, 2.0, -5.0, 4.0, -1.0])
        self._p1 = np.array([2 * b - 1, 5 - 6 * b, 6 * (b - 1), -2 * (b - 1)])
        g = b - b * b
        self._p0 = np.array([g - 1.0, -2.0 * g, g])

        rho2 = b + 0.5
        self.rho2 = rho2
        M = round(rho2)
        self.resonance = int(M) if abs(rho2 - M) < 1e-12 else None
        self.d = self._frobenius(rho2)
        self.c, self.c1 = self._regular_branch()
        self._continuation = self._continue_to_origin(rtol)

    def _bracket(self, coeffs, rho, m):
        total = 0.0
        for i in (2, 3, 4):
            n = m + 1 - i
            if n >= 0:
                total += self._p2[i] * (n + rho) * (n - 1 + rho) * coeffs[n]
        for i in (1, 2, 3):
            n = m - i
            if n >= 0:
                total -= self._p1[i] * (n + rho) * coeffs[n]
        for i in (0, 1, 2):
            n = m - 1 - i
            if n >= 0:
                total += self._p0[i] * coeffs[n]
        return total

    def _log_bracket(self, m):
        M, d = self.resonance, self.d
        total = 0.0
        for i in (1, 2, 3, 4):
            n = m + 1 - i - M
            if 0 <= n < len(d):
                total += self._p2[i] * (2 * (n + M) - 1) * d[n]
        for i in (0, 1, 2, 3):
            n = m - i - M
            if 0 <= n < len(d):
                total -= self._p1[i] * d[n]
        return total

    def _frobenius(self, rho):
        c = np.zeros(self.n_terms)
        c[0] = 1.0
        for m in range(1, self.n_terms):
            c[m] = -self._bracket(c, rho, m) / ((m + rho) * (2 * (m + rho) - 2 * self.beta - 1))
        return c

    def _regular_branch(self):
        c = np.zeros(self.n_terms)
        c[0] = 1.0
        c1 = 0.0
        M = self.resonance
        for m in range(1, self.n_terms):
            S = self._bracket(c, 0.0, m)
            if M is not None and m == M:
                c1 = -S / self._log_bracket(m)
                c[m] = 0.0
                continue
            if M is not None and m > M:
                S += c1 * self._log_bracket(m)
            c[m] = -S / (m * (2 * m - 2 * self.beta - 1))
        if M is not None:
            logger.info(f"L_beta basis at beta={self.beta}: log-modified phi1 with c1={c1:.6g}")
        return c, c1

    def series(self, s):
        """phi1, dphi1/ds, phi2, dphi2/ds for s = 1 - a in (0, 1/2]."""
        s = np.asarray(s, dtype=float)
        P = np.polynomial.polynomial
        dd = P.polyder(self.d)
        dc = P.polyder(self.c)
        pd = P.polyval(s, self.d)
        phi2 = s**self.rho2 * pd
        dphi2 = s**self.rho2 * (self.rho2 / s * pd + P.polyval(s, dd))
        phi1 = P.polyval(s, self.c)
        dphi1 = P.polyval(s, dc)
        if self.c1:
            ls = np.log(s)
            phi1 = phi1 + self.c1 * ls * phi2
            dphi1 = dphi1 + self.c1 * (phi2 / s + ls * dphi2)
        return phi1, dphi1, phi2, dphi2

    def _continue_to_origin(self, rtol):
        s = 1.0 - self.a_glue
        p1, dp1, p2, dp2 = self.series(s)
        a = self.a_glue
        # d/da = -d/ds
        y0 = np.array([p1, -a * dp1, p2, -a * dp2])
        sol = solve_ivp(
            _lbeta_log_rhs(self.beta),
            (np.log(self.a_glue), np.log(self.a_low)),
            y0,
            method="DOP853",
            rtol=rtol,
            atol=1e-14 * np.max(np.abs(y0)),
            dense_output=True,
        )
        if not sol.success:
            raise ConfigurationError(f"L_beta continuation failed: {sol.message}")
        return sol

    def evaluate(self, a):
        """phi1, phi1', phi2, phi2' (derivatives in a)."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        out = np.empty((4, a.size))
        hi = a >= self.a_glue
        if np.any(hi):
            p1, dp1, p2, dp2 = self.series(1.0 - a[hi])
            out[:, hi] = [p1, -dp1, p2, -dp2]
        mid = (~hi) & (a >= self.a_low)
        if np.any(mid):
            y = self._continuation.sol(np.log(a[mid]))
            out[:, mid] = [y[0], y[1] / a[mid], y[2], y[3] / a[mid]]
        lo = a < self.a_low
        if np.any(lo):
            # match y = A a + B / a at a_low
            y = self._continuation.sol(np.log(self.a_low))
            al = self.a_low
            for row in (0, 2):
                val, der = y[row], y[row + 1] / al
                A = 0.5 * (val / al + der)
                B = 0.5 * al * (val - al * der)
                out[row, lo] = A * a[lo] + B / a[lo]
                out[row + 1, lo] = A - B / a[lo] ** 2
        return out

    def wronskian_constant(self, a=0.9):
        """q2 (phi1 phi2' - phi1' phi2), constant in a."""
        p1, dp1, p2, dp2 = self.evaluate(a)[:, 0]
        s = 1.0 - a
        q2 = a * (s * (2.0 - s)) ** (0.5 - self.beta)
        return q2 * (p1 * dp2 - dp1 * p2)


def lbeta_fundamental(beta, a_grid=None):
    basis = LBetaBasis(beta)
    if a_grid is None:
        a_grid = logistic_grid(400, a_min=1e-3, s_min=1e-8)
    p1, dp1, p2, dp2 = basis.evaluate(a_grid)
    phi1 = GridFunction(a_grid, p1, (-1, 0), (0, 0), dy=dp1, domain="selfsimilar")
    phi2 = GridFunction(a_grid, p2, (-1, 0), (basis.beta + 0.5, 0), dy=dp2, domain="selfsimilar")
    return phi1, phi2


def solve_lbeta(f, beta, basis=None, a_grid=None, a_c=0.9, s_min=1e-9, n_s=1600, rtol=1e-11):
    """Solve L_beta w = f on (0, 1) with zero Cauchy data at a = 0."""
    if basis is None:
        basis = LBetaBasis(beta)
    elif abs(basis.beta - beta) > 1e-14:
        raise ConfigurationError("basis built for a different beta")
    if a_grid is None:
        a_grid = logistic_grid(400, a_min=1e-4, s_min=s_min)
    a_grid = np.asarray(a_grid, dtype=float)
    fa = f if callable(f) else None
    if fa is None:
        raise PreconditionError("solve_lbeta needs a callable source")

    # Forward integration from the origin, w ~ f1 a^3 / 8
    a0 = min(1e-4, a_grid[0])
    f0 = float(np.asarray(fa(np.array([a0])))[0])
    y0 = np.array([f0 * a0**2 / 8.0, 3.0 * f0 * a0**2 / 8.0])

    def forcing(a):
        return float(np.asarray(fa(np.array([a])))[0])

    if f0 == 0.0 and not np.any(np.asarray(fa(a_grid))):
        zeros = np.zeros_like(a_grid)
        return GridFunction(a_grid, zeros, (3, 0), None, dy=zeros, domain="selfsimilar")

    sol = solve_ivp(
        _lbeta_log_rhs(beta, forcing),
        (np.log(a0), np.log(a_c)),
        y0,
        method="DOP853",
        rtol=rtol,
        atol=1e-30,
        dense_output=True,
    )
    if not sol.success:
        raise ConfigurationError(f"L_beta forward integration failed: {sol.message}")
    wc, zc = sol.y[:, -1]
    wdc = zc / a_c

    # Variation of parameters on [a_c, 1) in s = 1 - a
    s = np.geomspace(s_min, 1.0 - a_c, n_s)
    xs = np.log(s)
    a = 1.0 - s
    fs = np.asarray(fa(a), dtype=float)
    p1, dp1, p2, dp2 = basis.evaluate(a)
    q1 = a * (s * (2.0 - s)) ** (-beta - 0.5)
    h1 = p1 * q1 * fs * s
    h2 = p2 * q1 * fs * s
    head2, gamma = _power_head(h2, xs) if h2[0] != 0 else (0.0, np.inf)
    if gamma < np.inf and gamma - 1.0 < beta - 1.5 - 0.25:
        logger.warning(f"solve_lbeta source behaves like (1-a)^{gamma - 1:.2f} near the cone")
    I2 = head2 + cumulative_simpson(h2, x=xs, initial=0.0)
    C1 = cumulative_simpson(h1, x=xs, initial=0.0)
    I1 = C1[-1] - C1
    C = basis.wronskian_constant(a_c)
    wp_c = p1[-1] * I2[-1] / C
    wpd_c = dp1[-1] * I2[-1] / C
    A, B = np.linalg.solve(np.array([[p1[-1], p2[-1]], [dp1[-1], dp2[-1]]]), [wc - wp_c, wdc - wpd_c])

    w = np.empty_like(a_grid)
    dw = np.empty_like(a_grid)
    inner = a_grid <= a_c
    y = sol.sol(np.log(np.maximum(a_grid[inner], a0)))
    w[inner] = y[0]
    dw[inner] = y[1] / a_grid[inner]
    outer = ~inner
    if np.any(outer):
        so = np.clip(1.0 - a_grid[outer], s_min, 1.0 - a_c)
        I1o = make_interp_spline(xs, I1, k=3)(np.log(so))
        I2o = make_interp_spline(xs, I2, k=3)(np.log(so))
        b1, db1, b2, db2 = basis.evaluate(1.0 - so)
        w[outer] = (b1 * I2o + b2 * I1o) / C + A * b1 + B * b2
        dw[outer] = (db1 * I2o + db2 * I1o) / C + A * db1 + B * db2
    return GridFunction(a_grid, w, (3, 0), None, dy=dw, domain="selfsimilar")


# Correction stack
@dataclass
class OddCorrection:
    """v_{2k-1} = T^(-2k) V(R, a) with L V = -E, E the regularized source."""

    step: int
    R: np.ndarray
    a: Optional[np.ndarray]
    V: np.ndarray
    V_R: np.ndarray
    kind: str = "odd"
    _splines: tuple = field(default=None, init=False, repr=False)

    @property
    def power(self):
        return 2 * self.step

    def _build(self):
        x = np.log(self.R)
        if self.a is None:
            self._splines = (make_interp_spline(x, self.V, k=5), make_interp_spline(x, self.V_R, k=5))
        else:
            u = np.log(self.a) - np.log1p(-self.a)
            self._splines = (
                RectBivariateSpline(x, u, self.V, kx=3, ky=3, s=0),
                RectBivariateSpline(x, u, self.V_R, kx=3, ky=3, s=0),
            )
        return self._splines

    def value(self, R, a):
        sV = (self._splines or self._build())[0]
        R = np.asarray(R, dtype=float)
        x = np.log(np.clip(R, self.R[0], self.R[-1]))
        if self.a is None:
            G = np.asarray(sV(x), dtype=float)
        else:
            aa = np.clip(a, self.a[0], self.a[-1])
            G = sV.ev(x, np.log(aa) - np.log1p(-aa))
        return np.where(R < self.R[0], G * (R / self.R[0]) ** 3, G)

    def fields(self, R, a, source):
        """G, G_R, G_RR, G_a, G_Ra, G_aa at (R, a); source = E(R, a)."""
        sV, sVR = self._splines or self._build()
        R = np.asarray(R, dtype=float)
        x = np.log(np.clip(R, self.R[0], self.R[-1]))
        if self.a is None:
            G = sV(x)
            G_R = sVR(x)
            G_a = G_Ra = G_aa = np.zeros_like(G)
        else:
            aa = np.clip(a, self.a[0], self.a[-1])
            u = np.log(aa) - np.log1p(-aa)
            G = sV.ev(x, u)
            G_R = sVR.ev(x, u)
            jac = aa * (1.0 - aa)
            Gu, Guu = sV.ev(x, u, dy=1), sV.ev(x, u, dy=2)
            G_a = Gu / jac
            G_aa = (Guu - (1.0 - 2.0 * aa) * Gu) / jac**2
            G_Ra = sVR.ev(x, u, dy=1) / jac
        below = R < self.R[0]
        if np.any(below):
            scale = (R / self.R[0])[below]
            G, G_R = np.array(G), np.array(G_R)
            G[below] = G[below] * scale**3
            G_R[below] = 3.0 * G[below] / R[below]
        G_RR = -source - G_R / R + cos2Q(R) * G / R**2
        return G, G_R, G_RR, G_a, G_Ra, G_aa


@dataclass
class EvenCorrection:
    """v_{2k} = T^(1-2k) sum_j W^j(a) l^j, l = ln(1+R^2)/2."""

    step: int
    nu: float
    W: List[GridFunction]
    q: List[GridFunction]
    kind: str = "even"

    @property
    def power(self):
        return 2 * self.step - 1

    @property
    def beta(self):
        return self.power * self.nu

    def coupling(self, j, a):
        """F_j(a) from W^{j+1}, W^{j+2}; W^j = 0 for j >= 2k."""
        nu, m = self.nu, self.power
        out = np.zeros_like(np.asarray(a, dtype=float))
        if j + 1 < len(self.W):
            W1, dW1 = self.W[j + 1](a), self.W[j + 1].derivative(a)
            out = out + (j + 1) * (2.0 * (1.0 / a - (1.0 + nu) * a) * dW1 + (1.0 + nu) * (2.0 * m * nu - 1.0) * W1)
        if j + 2 < len(self.W):
            W2 = self.W[j + 2](a)
            out = out + (j + 1) * (j + 2) * (1.0 / a**2 - (1.0 + nu) ** 2) * W2
        return out

    def source(self, j, a):
        return -(a * self.q[j](a) + self.coupling(j, a))

    def value(self, R, a):
        ell = 0.5 * np.log1p(np.asarray(R, dtype=float) ** 2)
        return sum(Wj(a) * ell**j for j, Wj in enumerate(self.W))

    def fields(self, R, a, source=None):
        R = np.asarray(R, dtype=float)
        ell = 0.5 * np.log1p(R**2)
        d1 = R / (1.0 + R**2)
        d2 = (1.0 - R**2) / (1.0 + R**2) ** 2
        G = G_R = G_RR = G_a = G_Ra = G_aa = 0.0
        for j, Wj in enumerate(self.W):
            w, dw = Wj(a), Wj.derivative(a)
            d2w = lbeta_second_derivative(self.source(j, a), w, dw, a, self.beta)
            lj = ell**j
            lj1 = j * ell ** (j - 1) if j >= 1 else 0.0
            lj2 = j * (j - 1) * ell ** (j - 2) if j >= 2 else 0.0
            G = G + w * lj
            G_R = G_R + w * lj1 * d1
            G_RR = G_RR + w * (lj2 * d1**2 + lj1 * d2)
            G_a = G_a + dw * lj
            G_Ra = G_Ra + dw * lj1 * d1
            G_aa = G_aa + d2w * lj
        return G, G_R, G_RR, G_a, G_Ra, G_aa


def _cone_operator(p, nu, R, a, T, G, G_R, G_RR, G_a, G_Ra, G_aa, LRG):
    """T^-p [T^2 L_R G + 2T G_Ra + G_aa + G_a/a - (t d_t)^2-part]."""
    H = p * nu * G - (1.0 + nu) * R * G_R - a * G_a
    H_R = p * nu * G_R - (1.0 + nu) * (G_R + R * G_RR) - a * G_Ra
    H_a = p * nu * G_a - (1.0 + nu) * R * G_Ra - G_a - a * G_aa
    TT = p * nu * H - (1.0 + nu) * R * H_R - a * H_a - H
    return T ** (-p) * (T**2 * LRG + 2.0 * T * G_Ra + G_aa + G_a / a - TT)


def t_effective(T):
    T = np.asarray(T, dtype=float)
    big = np.maximum(T, T_STAR)
    small = np.minimum(T, T_STAR)
    return big * (1.0 + (small / big) ** T_EFF_POWER) ** (1.0 / T_EFF_POWER)


@dataclass
class CorrectionStack:
    """Ordered corrections v_1, v_2, ... with the structured error at every level."""

    nu: float
    corrections: list = field(default_factory=list)
    pending_q: Optional[List[GridFunction]] = None

    @property
    def depth(self):
        return len(self.corrections)

    def correction_sum(self, level, R, a, T):
        w = np.zeros(np.broadcast(R, a, T).shape)
        for corr in self.corrections[:level]:
            w = w + T ** (-corr.power) * corr.value(R, a)
        return w

    def odd_source(self, step, R, a):
        """E_step(R, a) = T_eff^(2 step - 2) t^2 e_{2 step - 2}(R, T_eff, a) with T_eff from R / a."""
        R, a = np.broadcast_arrays(np.asarray(R, dtype=float), np.asarray(a, dtype=float))
        if step == 1:
            return e0_scaled(R, self.nu)
        Te = t_effective(R / a)
        return Te ** (2 * step - 2) * self.error(2 * step - 2, R, Te, a=a)

    def error(self, level, R, T, a=None):
        """t^2 e_level at (R, T); a defaults to R / T, i.e. points of the cone."""
        if level > self.depth:
            raise StateError(f"error at level {level} requested, stack depth is {self.depth}")
        R, T = np.broadcast_arrays(np.asarray(R, dtype=float), np.asarray(T, dtype=float))
        on_cone = a is None
        a = R / T if on_cone else np.broadcast_to(np.asarray(a, dtype=float), R.shape)
        if level == 0:
            return e0_scaled(R, self.nu)
        prev = self.error(level - 1, R, T, a=None if on_cone else a)
        corr = self.corrections[level - 1]
        w_prev = self.correction_sum(level - 1, R, a, T)
        nu = self.nu
        if corr.kind == "odd":
            i = corr.step
            if i == 1:
                source = e0_scaled(R, nu)
                lead = np.zeros(R.shape)
            else:
                # where T is its own regularization the source cancels prev exactly
                Te = t_effective(T if on_cone else R / a)
                exact = Te == T
                source = T ** (2 * i - 2) * prev
                lead = np.zeros(R.shape)
                off = ~exact
                if np.any(off):
                    shifted = self.error(2 * i - 2, R[off], Te[off], a=a[off])
                    source[off] = Te[off] ** (2 * i - 2) * shifted
                    lead[off] = prev[off] - (Te[off] / T[off]) ** (2 * i - 2) * shifted
            G, G_R, G_RR, G_a, G_Ra, G_aa = corr.fields(R, a, source)
            body = _cone_operator(corr.power, nu, R, a, T, G, G_R, G_RR, G_a, G_Ra, G_aa, 0.0)
        else:
            G, G_R, G_RR, G_a, G_Ra, G_aa = corr.fields(R, a)
            LRG = G_RR + G_R / R - cos2Q(R) * G / R**2
            body = _cone_operator(corr.power, nu, R, a, T, G, G_R, G_RR, G_a, G_Ra, G_aa, LRG)
            lead = prev
        w = w_prev + T ** (-corr.power) * G
        return lead + body + nonlinear_remainder(w, R, T) - nonlinear_remainder(w_prev, R, T)

    def u(self, t, r, level=None):
        """u_level(t, r) = Q(lambda r) + corrections, for 0 < r < t."""
        level = self.depth if level is None else level
        t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
        lam = lambda_scale(t, self.nu)
        R = lam * r
        return ground_state(R) + self.correction_sum(level, R, r / t, t * lam)

    def u_elliptic(self, t, r, level=None):
        level = self.depth if level is None else level
        t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
        lam = lambda_scale(t, self.nu)
        return self.correction_sum(level, lam * r, r / t, t * lam)


def default_corrector_R_grid(params=None, n=1500):
    r_min = params.grid_R.min if params is not None else 1e-4
    return log_grid(r_min, 1e6, n)


def default_table_a_grid(params=None):
    n = params.n_a if params is not None else 48
    return logistic_grid(n, a_min=1e-8, s_min=1e-6)


def default_even_a_grid(n=400):
    return logistic_grid(n, a_min=1e-4, s_min=1e-9)


def odd_step(k, stack, R_grid=None, a_grid=None):
    """Append v_{2k-1}: solve L V = -E_k in R, column by column in a."""
    if stack.depth != 2 * k - 2:
        raise StateError(f"odd step {k} needs stack depth {2 * k - 2}, got {stack.depth}")
    R_grid = default_corrector_R_grid() if R_grid is None else np.asarray(R_grid, dtype=float)
    nu = stack.nu
    if k == 1:
        V = solve_radial_L(lambda R: -e0_scaled(R, nu), R_grid)
        corr = OddCorrection(1, R_grid, None, V.y, V.dy)
    else:
        a_grid = default_table_a_grid() if a_grid is None else np.asarray(a_grid, dtype=float)
        RR, AA = np.meshgrid(R_grid, a_grid, indexing="ij")
        E = stack.odd_source(k, RR.ravel(), AA.ravel()).reshape(RR.shape)
        V = np.empty_like(E)
        V_R = np.empty_like(E)
        for j in range(a_grid.size):
            sol = solve_radial_L(GridFunction(R_grid, -E[:, j]))
            V[:, j] = sol.y
            V_R[:, j] = sol.dy
        corr = OddCorrection(k, R_grid, a_grid, V, V_R)
    stack.corrections.append(corr)
    stack.pending_q = None
    logger.info(f"Odd step {k} done: stack depth {stack.depth}")
    return stack


def extract_leading_coefficients(stack, k, a_grid=None, R_fit=None):
    """q_j(a), j < 2k, from t^2 e_{2k-1} ~ T^(1-2k) a sum_j q_j(a) l^j at large R.

    Least squares at fixed a against R l^j (j < 2k) and l^j (j < 2k + 2)
    over the outer two decades of R.
    """
    level = 2 * k - 1
    if stack.depth != level:
        raise StateError(f"extraction for step {k} needs stack depth {level}, got {stack.depth}")
    a_grid = default_table_a_grid() if a_grid is None else np.asarray(a_grid, dtype=float)
    R_fit = np.geomspace(1e4, 1e6, 121) if R_fit is None else np.asarray(R_fit, dtype=float)
    RR, AA = np.meshgrid(R_fit, a_grid, indexing="ij")
    TT = RR / AA
    E = (TT ** (2 * k) * stack.error(level, RR.ravel(), TT.ravel()).reshape(RR.shape))

    ell = 0.5 * np.log1p(R_fit**2)
    lo, hi = ell[0], ell[-1]
    x = (2.0 * ell - (lo + hi)) / (hi - lo)
    n_lead, n_sub = 2 * k, 2 * k + 2
    design = np.column_stack([R_fit * x**j for j in range(n_lead)] + [x**j for j in range(n_sub)])
    norms = np.linalg.norm(design, axis=0)
    coeffs, _, rank, _ = np.linalg.lstsq(design / norms, E, rcond=None)
    if rank < design.shape[1]:
        logger.warning(f"Leading-coefficient fit is rank deficient ({rank} < {design.shape[1]})")
    coeffs = coeffs / norms[:, None]
    resid = np.max(np.abs(design @ coeffs - E)) / np.max(np.abs(E))
    logger.info(f"Leading coefficients for step {k}: relative fit residual {resid:.2e}")

    q = np.zeros((n_lead, a_grid.size))
    for i in range(a_grid.size):
        mono = np.polynomial.Polynomial(coeffs[:n_lead, i], domain=[lo, hi]).convert().coef
        q[: mono.size, i] = mono
    # T^(2k) t^2 e = R sum q_j l^j, i.e. t^2 e = T^(1-2k) a sum q_j l^j
    stack.pending_q = [GridFunction(a_grid, q[j], (0, 0), None, domain="selfsimilar") for j in range(n_lead)]
    return stack.pending_q


def even_step(k, stack, q=None, a_grid=None):
    """Append v_{2k}: solve L_beta W^j = -(a q_j + F_j) from j = 2k - 1 down to 0."""
    if stack.depth != 2 * k - 1:
        raise StateError(f"even step {k} needs stack depth {2 * k - 1}, got {stack.depth}")
    q = stack.pending_q if q is None else q
    if q is None:
        raise StateError(f"even step {k} needs the leading coefficients of e_{2 * k - 1}")
    if len(q) != 2 * k:
        raise PreconditionError(f"even step {k} needs {2 * k} coefficients, got {len(q)}")
    a_grid = default_even_a_grid() if a_grid is None else np.asarray(a_grid, dtype=float)
    zeros = np.zeros_like(a_grid)
    blank = GridFunction(a_grid, zeros, (3, 0), None, dy=zeros, domain="selfsimilar")
    corr = EvenCorrection(k, stack.nu, [blank] * (2 * k), list(q))
    basis = LBetaBasis(corr.beta)
    for j in reversed(range(2 * k)):
        corr.W[j] = solve_lbeta(lambda a, j=j: corr.source(j, a), corr.beta, basis, a_grid)
    stack.corrections.append(corr)
    stack.pending_q = None
    logger.info(f"Even step {k} done: stack depth {stack.depth}, beta={corr.beta}")
    return stack


# Finite-difference residual
_CENTRAL_D1 = (np.arange(-2, 3), np.array([1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12]))
_CENTRAL_D2 = (np.arange(-2, 3), np.array([-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12]))
_FORWARD_D1 = (np.arange(5), np.array([-25 / 12, 4.0, -3.0, 4 / 3, -1 / 4]))
_FORWARD_D2 = (np.arange(6), np.array([15 / 4, -77 / 6, 107 / 6, -13.0, 61 / 12, -5 / 6]))


def _stencil(u, t, r, h, along_t, stencil, sign=1):
    offsets, coeffs = stencil
    total = 0.0
    for o, c in zip(offsets, coeffs):
        shift = sign * o * h
        total = total + c * (u(t + shift, r) if along_t else u(t, r + shift))
    return total


def _derivative(u, t, r, h, along_t, order, mode):
    """mode is 'central', 'forward' or 'backward' per point."""
    central, forward = (_CENTRAL_D1, _FORWARD_D1) if order == 1 else (_CENTRAL_D2, _FORWARD_D2)
    out = np.full(t.shape, np.nan)
    for name, stencil, sign in (("central", central, 1), ("forward", forward, 1), ("backward", forward, -1)):
        mask = mode == name
        if not np.any(mask):
            continue
        hm = h[mask]
        val = _stencil(u, t[mask], r[mask], hm, along_t, stencil, sign)
        # backward first derivatives flip sign
        out[mask] = (sign if order == 1 else 1) * val / hm**order
    return out


def error_residual(u, t, r, h_t=None, h_r=None):
    """e = (-d_t^2 + d_r^2 + r^-1 d_r) u - sin(2u)/(2r^2) by fourth-order differences.

    u is a callable u(t, r); points outside 0 < r < t come back as NaN.
    """
    t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
    t, r = t.astype(float).copy(), r.astype(float).copy()
    inside = (r > 0) & (r < t)
    out = np.full(t.shape, np.nan)
    if not np.any(inside):
        return out
    ti, ri = t[inside], r[inside]
    h_t = 1e-3 * ti if h_t is None else np.broadcast_to(np.asarray(h_t, dtype=float), t.shape)[inside]
    if h_r is None:
        h_r = 2e-3 * ri
    else:
        h_r = np.broadcast_to(np.asarray(h_r, dtype=float), t.shape)[inside]
    if np.any(h_t > ti / 10) or np.any(6 * h_r > ti):
        raise ConfigurationError("difference steps too coarse for the cone")

    # backward in time shrinks the cone
    t_mode = np.where(ri > ti - 2 * h_t, "forward", "central")
    r_mode = np.where(ri < 2 * h_r, "forward", np.where(ri + 2 * h_r >= ti, "backward", "central"))
    u_tt = _derivative(u, ti, ri, h_t, True, 2, t_mode)
    u_rr = _derivative(u, ti, ri, h_r, False, 2, r_mode)
    u_r = _derivative(u, ti, ri, h_r, False, 1, r_mode)
    ui = u(ti, ri)
    out[inside] = -u_tt + u_rr + u_r / ri - np.sin(2.0 * ui) / (2.0 * ri**2)
    return out


@dataclass
class ConeGrid:
    """Rectangular grid in (t, a) with r = a t."""

    t: np.ndarray
    a: np.ndarray

    def mesh(self):
        tt, aa = np.meshgrid(self.t, self.a, indexing="ij")
        return tt, aa * tt

    @classmethod
    def for_params(cls, params, n_t=9, n_a=120):
        t = np.geomspace(params.t0 / 10.0, params.t0, n_t)
        a = np.geomspace(1e-4, params.a_max, n_a)
        return cls(t, a)


@dataclass
class ProfileCorrections:
    """u_{2k-1}, its elliptic part and its error, sampled on a cone grid."""

    params: object
    stack: CorrectionStack
    grid: ConeGrid
    u_grid: np.ndarray
    ue_grid: np.ndarray
    e_grid: np.ndarray

    @property
    def level(self):
        return self.stack.depth

    def u(self, t, r):
        return self.stack.u(t, r)

    def u_elliptic(self, t, r):
        return self.stack.u_elliptic(t, r)

    def evaluate_error(self, t, r, level=None):
        """e_level(t, r), unscaled."""
        level = self.level if level is None else level
        t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
        lam = lambda_scale(t, self.stack.nu)
        return self.stack.error(level, lam * r, t * lam) / t**2


def build_correction_stack(params, R_grid=None, a_grid=None):
    """Odd step 1, then (extract, even step k, odd step k + 1) for k < params.k."""
    stack = CorrectionStack(params.nu)
    R_grid = default_corrector_R_grid(params) if R_grid is None else R_grid
    a_grid = default_table_a_grid(params) if a_grid is None else a_grid
    odd_step(1, stack, R_grid)
    for k in range(1, params.k):
        extract_leading_coefficients(stack, k, a_grid)
        even_step(k, stack)
        odd_step(k + 1, stack, R_grid, a_grid)
    return stack


def assemble_profile(params, grid=None, stack=None):
    """Build u_{2k-1} and sample u, u^e and e_{2k-1} on the cone grid."""
    stack = build_correction_stack(params) if stack is None else stack
    grid = ConeGrid.for_params(params) if grid is None else grid
    tt, rr = grid.mesh()
    lam = lambda_scale(tt, params.nu)
    R, T = lam * rr, tt * lam
    ue = stack.correction_sum(stack.depth, R, rr / tt, T)
    e = stack.error(stack.depth, R, T) / tt**2
    logger.info(f"Profile assembled at level {stack.depth}: max |t^2 e| = {np.nanmax(np.abs(e * tt**2)):.3e}")
    return ProfileCorrections(params, stack, grid, ground_state(R) + ue, ue, e)


def split_error_b0(stack, level, R, a, T, T_far=1e3):
    """Split T^level t^2 e_level at (R, a, T) into its b = 0 part and the rest.

    The b = 0 part is the value at T * T_far with R and a held fixed.
    """
    R, a, T = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (R, a, T)))
    full = T**level * stack.error(level, R, T, a=a)
    far = (T * T_far) ** level * stack.error(level, R, T * T_far, a=a)
    b = np.log(2.0 + R**2) ** 2 / T**2
    return {"e": full, "e_b0": far, "quotient": np.abs(full - far) / b}


def normalized_error_sup(stack, level, t, a_values, nu):
    """sup over the cone slice at t of |t^2 e_level| / (R (1 + ln^level(2 + R^2)))."""
    lam = lambda_scale(t, nu)
    T = t * lam
    R = a_values * T
    e = stack.error(level, R, np.full_like(R, T))
    return float(np.max(np.abs(e) / (R * (1.0 + np.log(2.0 + R**2) ** level))))


def error_exponent_gain(stack, level, t_values, a_values=None):
    """Fitted exponent of t in the normalized sup of e_level over t_values."""
    a_values = np.geomspace(1e-3, 0.9, 80) if a_values is None else np.asarray(a_values, dtype=float)
    t_values = np.asarray(t_values, dtype=float)
    sups = np.array([normalized_error_sup(stack, level, t, a_values, stack.nu) for t in t_values])
    slope, _ = np.polyfit(np.log(t_values), np.log(sups), 1)
    return slope
