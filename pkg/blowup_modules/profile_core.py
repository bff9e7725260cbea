"""Coordinates, the ground state, the blow-up scale and grid-function plumbing."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline, make_interp_spline

from blowup_modules.errors import DomainError, PreconditionError

logger = logging.getLogger(__name__)


def lambda_scale(t, nu):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError(f"lambda_scale needs t > 0, got {t}")
    out = t ** (-1.0 - nu)
    return float(out) if out.ndim == 0 else out


def tau_of_t(t, nu):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError(f"tau_of_t needs t > 0, got {t}")
    out = t ** (-nu) / nu
    return float(out) if out.ndim == 0 else out


def t_of_tau(tau, nu):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise DomainError(f"t_of_tau needs tau > 0, got {tau}")
    out = (nu * tau) ** (-1.0 / nu)
    return float(out) if out.ndim == 0 else out


def lambda_of_tau(tau, nu):
    """lambda(t(tau)) = (nu tau)^(1 + 1/nu)."""
    tau = np.asarray(tau, dtype=float)
    out = (nu * tau) ** (1.0 + 1.0 / nu)
    return float(out) if out.ndim == 0 else out


def dilation_rate(tau, nu):
    """Return (lambda_tau / lambda, its tau-derivative)."""
    tau = np.asarray(tau, dtype=float)
    c = 1.0 + 1.0 / nu
    return c / tau, -c / tau**2


def ground_state(R):
    return 2.0 * np.arctan(R)


def ground_state_derivatives(R):
    """Q'(R), Q''(R)."""
    R = np.asarray(R, dtype=float)
    d = 1.0 + R**2
    return 2.0 / d, -4.0 * R / d**2


def e0_scaled(R, nu):
    """t^2 e_0 for u = Q(lambda(t) r), with e = box u - sin(2u)/(2r^2)."""
    R = np.asarray(R, dtype=float)
    d = 1.0 + R**2
    return -((nu + 1.0) ** 2) * 4.0 * R / d**2 + nu * (nu + 1.0) * 2.0 * R / d


@dataclass(frozen=True)
class CoordPoint:
    t: float
    r: float
    R: float
    a: float
    b: float
    tau: float
    lam: float

    def radius(self):
        # inversion (t, R) -> r
        return self.R / self.lam


def coords(t, r, params=None, *, nu=None):
    """Map (t, r) inside the closed light cone to (R, a, b, tau)."""
    if nu is None:
        if params is None:
            raise DomainError("coords needs params or nu")
        nu = params.nu
    if t <= 0:
        raise DomainError(f"coords needs t > 0, got t={t}")
    if params is not None and t > params.t0 * (1 + 1e-12):
        raise DomainError(f"t={t} lies after t0={params.t0}")
    if r < 0 or r > t * (1 + 1e-12):
        raise DomainError(f"point (t={t}, r={r}) is outside the light cone")
    lam = lambda_scale(t, nu)
    T = t * lam
    R = lam * r
    return CoordPoint(
        t=t,
        r=r,
        R=R,
        a=r / t,
        b=np.log(2.0 + R**2) ** 2 / T**2,
        tau=tau_of_t(t, nu),
        lam=lam,
    )


def log_grid(x_min, x_max, n):
    if x_min <= 0 or x_max <= x_min:
        raise DomainError(f"bad log grid [{x_min}, {x_max}]")
    return np.geomspace(x_min, x_max, n)


def logistic_grid(n, a_min=1e-4, s_min=1e-10):
    """Grid on (0, 1), uniform in logit(a), clustered at both ends."""
    lo = np.log(a_min / (1.0 - a_min))
    hi = np.log((1.0 - s_min) / s_min)
    x = np.linspace(lo, hi, n)
    return 1.0 / (1.0 + np.exp(-x))


def _fit_power(x, y, log_power):
    mask = np.isfinite(y) & (np.abs(y) > 1e-300)
    if mask.sum() < 3:
        return None
    lx = np.log(x[mask])
    ly = np.log(np.abs(y[mask]))
    if log_power:
        ly = ly - log_power * np.log(np.abs(lx))
    slope, _ = np.polyfit(lx, ly, 1)
    return slope


@dataclass
class GridFunction:
    """Samples y(x) plus declared endpoint laws x^p (ln x)^m.

    domain "radial" means x in (0, inf); "selfsimilar" means x in (0, 1) and
    the right law is stated in s = 1 - x.
    """

    x: np.ndarray
    y: np.ndarray
    lead_zero: Optional[Tuple[float, float]] = None
    lead_inf: Optional[Tuple[float, float]] = None
    dy: Optional[np.ndarray] = None
    domain: str = "radial"
    _spline: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y)
        if self.x.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise PreconditionError("GridFunction needs matching 1D abscissae and samples")
        if np.any(np.diff(self.x) <= 0):
            raise PreconditionError("GridFunction abscissae must be strictly increasing")
        if self.dy is not None:
            self.dy = np.asarray(self.dy)

    # Coordinates in which interpolation is done
    def _u(self, x):
        x = np.asarray(x, dtype=float)
        if self.domain == "selfsimilar":
            return np.log(x) - np.log1p(-x)
        return np.log(x)

    def _dx_du(self, x):
        return x * (1.0 - x) if self.domain == "selfsimilar" else x

    def _build(self):
        u = self._u(self.x)
        if self.dy is not None:
            self._spline = CubicHermiteSpline(u, self.y, self.dy * self._dx_du(self.x))
        else:
            self._spline = make_interp_spline(u, self.y, k=3)
        return self._spline

    def __call__(self, xq, nu_deriv=0):
        spline = self._spline or self._build()
        xq = np.asarray(xq, dtype=float)
        u = self._u(xq)
        if nu_deriv == 0:
            out = spline(u)
        elif nu_deriv == 1:
            out = spline.derivative()(u) / self._dx_du(xq)
        else:
            raise ValueError("only values and first derivatives are interpolated")
        below = xq < self.x[0]
        if self.lead_zero is not None and np.any(below):
            p = self.lead_zero[0]
            scale = (xq[below] / self.x[0]) ** p
            out = np.array(out, copy=True)
            out[below] = self.y[0] * scale if nu_deriv == 0 else p * self.y[0] * scale / xq[below]
        above = xq > self.x[-1]
        if self.domain == "selfsimilar" and np.any(above):
            # hold the last local power of s = 1 - x
            s_last, s_prev = 1.0 - self.x[-1], 1.0 - self.x[-2]
            if self.lead_inf is not None:
                p = self.lead_inf[0]
            elif self.y[-1] != 0 and np.sign(self.y[-1]) == np.sign(self.y[-2]):
                p = np.log(self.y[-1] / self.y[-2]) / np.log(s_last / s_prev)
            else:
                p = 0.0
            ratio = (1.0 - xq[above]) / s_last
            out = np.array(out, copy=True)
            value = self.y[-1] * ratio**p
            out[above] = value if nu_deriv == 0 else -p * value / (1.0 - xq[above])
        return out

    def derivative(self, xq):
        return self(xq, nu_deriv=1)

    def fit_leading(self):
        """Fitted powers at both ends over the outermost decade."""
        y = np.abs(self.y) if np.iscomplexobj(self.y) else self.y
        left = self.x <= 10.0 * self.x[0]
        p0 = None
        if self.lead_zero is not None:
            p0 = _fit_power(self.x[left], y[left], self.lead_zero[1])
        pinf = None
        if self.lead_inf is not None:
            if self.domain == "selfsimilar":
                s = 1.0 - self.x
                right = s <= 10.0 * s[-1]
                pinf = _fit_power(s[right][::-1], y[right][::-1], self.lead_inf[1])
            else:
                right = self.x >= self.x[-1] / 10.0
                pinf = _fit_power(self.x[right], y[right], self.lead_inf[1])
        return p0, pinf

    def check_leading(self, tol=0.1):
        p0, pinf = self.fit_leading()
        if p0 is not None and abs(p0 - self.lead_zero[0]) > tol:
            raise PreconditionError(f"left endpoint exponent fit {p0:.3f}, declared {self.lead_zero[0]}")
        if pinf is not None and abs(pinf - self.lead_inf[0]) > tol:
            raise PreconditionError(f"right endpoint exponent fit {pinf:.3f}, declared {self.lead_inf[0]}")
        return p0, pinf

    def map(self, fn, lead_zero=None, lead_inf=None):
        return GridFunction(self.x, fn(self.x, self.y), lead_zero, lead_inf, domain=self.domain)
