"""The contraction loop for the Fourier coefficients x(tau, xi) of the radiation part.

With u = u_{2k-1} + R^(-1/2) eps(tau, R) and x = F eps, the perturbation equation reads
-(D^2 + xi) x = b(x), D = d_tau - 2 beta xi d_xi, beta = lambda_tau / lambda, and

    b = 2 beta K D x + beta_tau K x + beta^2 K^2 x - 2 beta^2 [xi d_xi, K] x
        - (beta^2/4 + beta_tau/2) x + F[R^(1/2) (lambda^-2 N - lambda^-2 e)].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import RectBivariateSpline
from scipy.special import j1

from blowup_modules.elliptic_corrector import cos_minus_one, error_residual, sin_minus_identity
from blowup_modules.errors import ConfigurationError, DivergenceError, DomainError, StateError
from blowup_modules.mode_transport import aligned_tau_grid, apply_H, mode_basis, weighted_sup_norm
from blowup_modules.profile_core import (
    GridFunction,
    dilation_rate,
    ground_state,
    lambda_scale,
    t_of_tau,
    tau_of_t,
)
from blowup_modules.spectral_toolkit import QuadratureGrid, distorted_ft, sobolev_norm

logger = logging.getLogger(__name__)

INCREMENT_TOL = 1e-3
DIVERGENCE_RUN = 3
CONE_TAPER_START = 0.95


def cone_taper(a):
    """1 for a <= 0.95, 0 for a >= 1, smooth in between."""
    a = np.asarray(a, dtype=float)
    s = np.clip((a - CONE_TAPER_START) / (1.0 - CONE_TAPER_START), 0.0, 1.0)
    return np.cos(0.5 * np.pi * s) ** 2


def _nonlinear_terms(eps_tilde, R, w):
    """Linear, quadratic and cubic parts of lambda^-2 R^(1/2) N(R^(-1/2) eps) with u = Q + w."""
    two_u = 2.0 * (ground_state(R) + w)
    # cos 2u - cos 2Q without cancellation for small w
    dcos = -2.0 * np.sin(2.0 * ground_state(R) + w) * np.sin(w)
    x = eps_tilde / np.sqrt(R)
    linear = dcos / R**2 * eps_tilde
    quadratic = np.sin(two_u) * cos_minus_one(2.0 * x) / (2.0 * R**1.5)
    cubic = np.cos(two_u) * sin_minus_identity(2.0 * x) / (2.0 * R**1.5)
    return linear, quadratic, cubic


def nonlinearity_N(eps_tilde, tau, stack, level=None):
    """lambda^-2 R^(1/2) N_{2k-1}(R^(-1/2) eps) at time tau, on the abscissae of eps_tilde."""
    if not isinstance(eps_tilde, GridFunction):
        raise ConfigurationError("nonlinearity_N needs eps_tilde as a GridFunction in R")
    level = stack.depth if level is None else level
    nu = stack.nu
    R = eps_tilde.x
    T = nu * tau
    a = R / T
    w = np.zeros_like(R)
    inside = a < 1.0
    if np.any(inside):
        w[inside] = cone_taper(a[inside]) * stack.correction_sum(level, R[inside], a[inside], T)
    terms = _nonlinear_terms(np.asarray(eps_tilde.y, dtype=float), R, w)
    return GridFunction(R, sum(terms), eps_tilde.lead_zero, eps_tilde.lead_inf)


@dataclass(frozen=True)
class IterationState:
    tau_grid: np.ndarray
    xi_grid: np.ndarray
    x_table: np.ndarray
    dx_table: np.ndarray
    norms: Tuple[dict, ...] = ()
    iteration_log: Tuple[dict, ...] = ()
    converged: bool = False

    @property
    def iterations(self):
        return len(self.iteration_log)


@dataclass
class FixedPointProblem:
    """Frozen grids, tables, kernel and the elliptic profile for the iteration."""

    params: object
    stack: object
    tables: object
    kernel: object
    basis: object
    tau_grid: np.ndarray
    quad: QuadratureGrid
    forward: np.ndarray
    inverse: np.ndarray
    w_table: np.ndarray
    source_table: np.ndarray
    source_hat: np.ndarray
    _K: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, params, stack, tables, kernel, basis=None, tau_grid=None, quad=None):
        nu = params.nu
        xi = tables.xi_grid
        if not np.allclose(kernel.xi_grid, xi, rtol=1e-13):
            raise ConfigurationError("kernel and spectral tables live on different xi grids")
        if tau_grid is None:
            spec = params.grid_tau
            tau_grid = aligned_tau_grid(tau_of_t(params.t0, nu), spec.tau_max_factor, spec.n, xi, nu)
        tau_grid = np.asarray(tau_grid, dtype=float)
        if quad is None:
            quad = QuadratureGrid.for_cone(params.grid_R.min, nu * tau_grid[-1], math.sqrt(xi[-1]))
        basis = basis or mode_basis(nu)
        forward = tables.forward_matrix(quad)
        inverse = tables.inverse_matrix(quad.R)
        level = stack.depth
        R = quad.R
        w_table = np.zeros((tau_grid.size, R.size))
        source = np.zeros_like(w_table)
        for i, tau in enumerate(tau_grid):
            T = nu * tau
            inside = R < T
            Ri = R[inside]
            a = Ri / T
            chi = cone_taper(a)
            w_table[i, inside] = chi * stack.correction_sum(level, Ri, a, T)
            source[i, inside] = -np.sqrt(Ri) * chi * stack.error(level, Ri, np.full_like(Ri, T)) / T**2
        logger.info(
            f"Fixed-point problem: {tau_grid.size} times in [{tau_grid[0]:.4g}, {tau_grid[-1]:.4g}], "
            f"{xi.size} energies, {R.size} radii"
        )
        return cls(
            params, stack, tables, kernel, basis, tau_grid, quad, forward, inverse, w_table, source, source @ forward.T
        )

    @property
    def xi_grid(self):
        return self.tables.xi_grid

    def matrices(self, commutator="kernel"):
        if commutator not in self._K:
            K = self.kernel.matrix()
            C = self.kernel.commutator_matrix() if commutator == "kernel" else None
            self._K[commutator] = (K, C)
        return self._K[commutator]

    def eps_tilde(self, x_table):
        """eps(tau, R) on quad.R for every tau."""
        return x_table @ self.inverse.T

    def zero_state(self):
        z = np.zeros((self.tau_grid.size, self.xi_grid.size))
        return IterationState(self.tau_grid, self.xi_grid, z, z.copy())


def _commutator_rows(values, K, C, xi):
    if C is not None:
        return values @ C.T
    y = np.log(xi)
    return np.gradient(values @ K.T, y, axis=-1) - np.gradient(values, y, axis=-1) @ K.T


def rhs_final(state, problem, commutator="kernel", include_source=True):
    """b(x) on the (tau, xi) grid."""
    x, dx = state.x_table, state.dx_table
    beta, beta_tau = dilation_rate(problem.tau_grid, problem.params.nu)
    beta, beta_tau = beta[:, None], beta_tau[:, None]
    K, C = problem.matrices(commutator)
    Kx = x @ K.T
    linear = (
        2.0 * beta * (dx @ K.T)
        + beta_tau * Kx
        + beta**2 * (Kx @ K.T)
        - 2.0 * beta**2 * _commutator_rows(x, K, C, problem.xi_grid)
        - (0.25 * beta**2 + 0.5 * beta_tau) * x
    )
    R = problem.quad.R
    eps = problem.eps_tilde(x)
    nonlinear = np.zeros_like(eps)
    if np.any(eps):
        for i in range(problem.tau_grid.size):
            nonlinear[i] = sum(_nonlinear_terms(eps[i], R, problem.w_table[i]))
    b = linear + nonlinear @ problem.forward.T
    if include_source:
        b = b + problem.source_hat
    return b


def weighted_norm(table, problem, alpha, power):
    """||table||_{L^(inf, power) L^(2, alpha)_rho}."""
    return weighted_sup_norm(table, problem.tau_grid, problem.tables, alpha, power)


def _contraction_norm(x, dx, problem):
    p = problem.params
    return weighted_norm(x, problem, p.alpha + 0.5, p.bigN - 2), weighted_norm(dx, problem, p.alpha, p.bigN - 1)


def iterate(problem, max_iter=8, commutator="kernel", tol=INCREMENT_TOL):
    """x0 = 0, x(n+1) = H b(x(n)) until the weighted increment drops below tol relative to x."""
    state = problem.zero_state()
    nu = problem.params.nu
    increments = []
    norms = []
    log = []
    for n in range(1, max_iter + 1):
        b = rhs_final(state, problem, commutator)
        x_new, dx_new = apply_H(b, problem.tau_grid, problem.xi_grid, nu, problem.basis, decay_power=None)
        x_norm, dx_norm = _contraction_norm(x_new, dx_new, problem)
        inc_x, inc_dx = _contraction_norm(x_new - state.x_table, dx_new - state.dx_table, problem)
        inc = inc_x + inc_dx
        total = x_norm + dx_norm
        ratio = inc / increments[-1] if increments and increments[-1] > 0 else None
        increments.append(inc)
        norms.append({"x": x_norm, "dx": dx_norm})
        log.append({"iteration": n, "increment": inc, "relative": inc / total if total else 0.0, "ratio": ratio})
        logger.info(f"iteration {n}: |x| = {x_norm:.4e}, |Dx| = {dx_norm:.4e}, increment = {inc:.3e}")
        converged = total == 0.0 or inc / total < tol
        state = IterationState(
            problem.tau_grid, problem.xi_grid, x_new, dx_new, tuple(norms), tuple(log), converged
        )
        if converged:
            logger.info(f"fixed point reached after {n} iterations")
            return state
        recent = increments[-(DIVERGENCE_RUN + 1) :]
        if len(recent) == DIVERGENCE_RUN + 1 and all(b > a for a, b in zip(recent, recent[1:])):
            logger.error(f"increments grew over {DIVERGENCE_RUN} iterations: {recent}")
            raise DivergenceError(f"fixed-point increments grew over {DIVERGENCE_RUN} iterations", log)
    logger.warning(f"iteration stopped at max_iter={max_iter} without reaching {tol}")
    return state


def contraction_ratios(state):
    return [entry["ratio"] for entry in state.iteration_log if entry["ratio"] is not None]


def decay_exponent(state, problem):
    """Fitted tau exponent of ||eps(tau)||_{H^(alpha+1/2)_rho}."""
    alpha = problem.params.alpha + 0.5
    norms = np.array([sobolev_norm(row, problem.tables, alpha) for row in state.x_table])
    if np.any(norms <= 0):
        raise StateError("decay exponent needs a nonzero solution at every tau")
    slope, _ = np.polyfit(np.log(state.tau_grid), np.log(norms), 1)
    return float(slope), norms


def source_norm_profile(problem):
    """tau^(2k-2) ||lambda^-2 R^(1/2) e_{2k-1}||_{H^alpha_rho} over the tau grid."""
    k = problem.params.k
    norms = np.array([sobolev_norm(row, problem.tables, problem.params.alpha) for row in problem.source_hat])
    return problem.tau_grid ** (2 * k - 2) * norms


def plancherel_defect(state, problem):
    """max over tau of | ||eps||_{L^2(dR)} / ||x||_{L^2(rho)} - 1 |."""
    w = problem.quad.plain_weights(problem.quad.R.size - 1)
    eps = problem.eps_tilde(state.x_table)
    worst = 0.0
    for row_eps, row_x in zip(eps, state.x_table):
        den = sobolev_norm(row_x, problem.tables, 0.0)
        if den == 0:
            continue
        worst = max(worst, abs(math.sqrt(np.sum(w * row_eps**2)) / den - 1.0))
    return worst


def frequency_tail_fraction(state, problem, alpha=None, xi_cut=1.0):
    """Share of ||x(tau)||_{H^alpha_rho} carried by xi >= xi_cut, per tau."""
    alpha = problem.params.alpha if alpha is None else alpha
    high = problem.xi_grid >= xi_cut
    out = []
    for row in state.x_table:
        full = sobolev_norm(row, problem.tables, alpha)
        out.append(sobolev_norm(np.where(high, row, 0.0), problem.tables, alpha) / full if full else 0.0)
    return np.array(out)


# Assembly
@dataclass
class AssembledSolution:
    """u(t, r) = u_{2k-1}(t, r) + R^(-1/2) eps(tau(t), R) with R = lambda(t) r."""

    stack: object
    tau_grid: np.ndarray
    R_grid: np.ndarray
    eps_table: np.ndarray
    _spline: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        k = min(3, self.tau_grid.size - 1)
        self._spline = RectBivariateSpline(np.log(self.tau_grid), np.log(self.R_grid), self.eps_table, kx=k, ky=3)

    @property
    def nu(self):
        return self.stack.nu

    @property
    def t_range(self):
        return t_of_tau(self.tau_grid[-1], self.nu), t_of_tau(self.tau_grid[0], self.nu)

    def eps_tilde(self, tau, R):
        tau, R = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(R, dtype=float))
        R0 = self.R_grid[0]
        Rc = np.clip(R, R0, self.R_grid[-1])
        out = self._spline.ev(np.log(tau), np.log(Rc))
        # eps ~ R^(3/2) below the grid
        return np.where(R < R0, out * (np.maximum(R, 0.0) / R0) ** 1.5, out)

    def eps(self, t, r):
        t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
        lo, hi = self.t_range
        if np.any(t < lo * (1 - 1e-9)) or np.any(t > hi * (1 + 1e-9)):
            raise DomainError(f"assembled solution covers t in [{lo:.4g}, {hi:.4g}]")
        R = lambda_scale(t, self.nu) * r
        safe = np.where(R > 0, R, 1.0)
        return np.where(R > 0, self.eps_tilde(tau_of_t(t, self.nu), safe) / np.sqrt(safe), 0.0)

    def u(self, t, r):
        t, r = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(r, dtype=float))
        safe = np.where(r > 0, r, t)
        base = np.where(r > 0, self.stack.u(t, safe), 0.0)
        return base + self.eps(t, r)


def assemble_solution(state, problem):
    if not state.converged:
        logger.warning("assembling a solution from an unconverged iteration")
    eps = problem.eps_tilde(state.x_table)
    return AssembledSolution(problem.stack, state.tau_grid, problem.quad.R, eps)


def residual_improvement(solution, grid, a_max=0.9):
    """sup |e(u)| over the grid for u_{2k-1} alone and with the radiation added."""
    tt, rr = grid.mesh()
    lo, hi = solution.t_range
    if tt.min() < lo * 1.01 or tt.max() > hi / 1.01:
        raise ConfigurationError(f"residual grid must lie inside t in [{1.01 * lo:.4g}, {hi / 1.01:.4g}]")
    mask = rr / tt <= a_max
    base = np.abs(error_residual(solution.stack.u, tt, rr))[mask]
    full = np.abs(error_residual(solution.u, tt, rr))[mask]
    out = {"elliptic": float(np.nanmax(base)), "assembled": float(np.nanmax(full))}
    out["factor"] = out["elliptic"] / out["assembled"] if out["assembled"] else math.inf
    return out


# Energies
def local_energy(u, t, n=4001, rel_step=1e-4):
    """int_{r<t} [(u_t^2 + u_r^2)/2 + sin^2 u / (2 r^2)] r dr."""
    if t <= 0:
        raise DomainError(f"local_energy needs t > 0, got {t}")
    r = t * np.geomspace(1e-9, 1.0 - 1e-3, n)
    h_t = rel_step * t
    h_r = rel_step * r
    ut = (u(t + h_t, r) - u(t - h_t, r)) / (2.0 * h_t)
    ur = (u(t, r + h_r) - u(t, r - h_r)) / (2.0 * h_r)
    density = 0.5 * (ut**2 + ur**2) + np.sin(u(t, r)) ** 2 / (2.0 * r**2)
    return float(trapezoid(density * r, r))


def energy_decay_exponent(u, t_values):
    t_values = np.asarray(t_values, dtype=float)
    energies = np.array([local_energy(u, t) for t in t_values])
    slope, _ = np.polyfit(np.log(t_values), np.log(energies), 1)
    return float(slope), energies


# Norm equivalence
def planar_sobolev_norm(eps, s, R, k):
    """H^s norm (up to a fixed constant) of the equivariant planar field eps(|x|) e^(i theta)."""
    hankel = trapezoid(eps[None, :] * j1(k[:, None] * R[None, :]) * R[None, :], R, axis=1)
    return math.sqrt(trapezoid(np.abs(hankel) ** 2 * (1.0 + k**2) ** s * k, k))


def planar_sobolev_ratio(eps_tilde, tables, alpha, resolutions=(1, 2), r_max=12.0, n_k=1000):
    """||F eps||_{H^(alpha/2)_rho} / planar H^alpha norm of R^(-1/2) eps, per resolution."""
    ratios = []
    for factor in resolutions:
        quad = QuadratureGrid(float(eps_tilde.x[0]), segments=((r_max, 0.004 / factor),))
        fhat = distorted_ft(eps_tilde, tables, quad)
        R = quad.R
        k = np.geomspace(1e-3, math.sqrt(tables.xi_grid[-1]), n_k * factor)
        values = np.asarray(eps_tilde(R), dtype=float) / np.sqrt(R)
        planar = planar_sobolev_norm(values, alpha, R, k)
        ratios.append(sobolev_norm(fhat, tables, alpha / 2.0) / planar)
    return ratios
