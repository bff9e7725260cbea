"""The transference operator K with F(R d_R u) = -2 xi d_xi uhat + K uhat."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from blowup_modules.errors import AccuracyError, ConfigurationError, DomainError
from blowup_modules.profile_core import GridFunction
from blowup_modules.spectral_toolkit import (
    QuadratureGrid,
    distorted_ft,
    filon_coefficients,
    sobolev_norm,
    wkb_amplitude,
)

logger = logging.getLogger(__name__)

PV_BAND = 3
TAIL_FREQUENCY_Q = 5.0


def commutator_weight(R):
    """W(R) with [L, R d_R] = 2 L + W(R)."""
    R = np.asarray(R, dtype=float)
    if np.any(R < 0):
        raise DomainError("commutator_weight needs R >= 0")
    d = 1.0 + R**2
    return 16.0 / d**2 - 32.0 * R**2 / d**3


def commutator_weight_derivatives(R):
    """W_R, W_RR."""
    R = np.asarray(R, dtype=float)
    d = 1.0 + R**2
    W_R = -128.0 * R / d**3 + 192.0 * R**3 / d**4
    W_RR = -128.0 / d**3 + 1344.0 * R**2 / d**4 - 1536.0 * R**4 / d**5
    return W_R, W_RR


def _tail_grid(r_start, r_far, step):
    panels = max(2, 2 * math.ceil((r_far - r_start) / (2.0 * step)))
    return np.linspace(r_start, r_far, panels + 1)


def _tail_profiles(tables, R_tail):
    """Columns on the tail as amplitude * e^(ikR) with k = 0 for slowly oscillating energies."""
    r0 = R_tail[0]
    n = tables.xi_grid.size
    amp = np.empty((R_tail.size, n), dtype=complex)
    freq = np.zeros(n)
    for j, xi in enumerate(tables.xi_grid):
        k = math.sqrt(xi)
        if k * r0 >= TAIL_FREQUENCY_Q:
            sigma, _ = wkb_amplitude(R_tail, xi, tables.operator, tables.wkb_terms)
            amp[:, j] = tables.a_values[j] * xi**-0.25 * sigma * np.exp(1j * k * R_tail)
            freq[j] = k
        else:
            amp[:, j] = 0.5 * tables.column(j).evaluate(R_tail)
    return amp, freq


def _filon_class_weights(theta):
    """Filon multipliers (first, even interior, odd interior, last) for an array of phase steps."""
    alpha, beta, gamma = filon_coefficients(theta)
    return 0.5 * beta + 1j * alpha, beta, gamma, 0.5 * beta - 1j * alpha


def _tail_kernel(W_tail, amp, freq, h):
    """int_tail W phi(., xi) phi(., eta) dR from the two-exponential form of each column."""
    n_pts = W_tail.size
    even = np.zeros(n_pts)
    odd = np.zeros(n_pts)
    even[2 : n_pts - 1 : 2] = W_tail[2 : n_pts - 1 : 2]
    odd[1:n_pts:2] = W_tail[1:n_pts:2]
    total = np.zeros((amp.shape[1], amp.shape[1]))
    for partner, sign in ((amp, 1.0), (np.conj(amp), -1.0)):
        theta = (freq[:, None] + sign * freq[None, :]) * h
        first, c_even, c_odd, last = _filon_class_weights(theta)
        M_even = amp.T @ (even[:, None] * partner)
        M_odd = amp.T @ (odd[:, None] * partner)
        M_first = W_tail[0] * np.outer(amp[0], partner[0])
        M_last = W_tail[-1] * np.outer(amp[-1], partner[-1])
        total += 2.0 * np.real(h * (first * M_first + c_even * M_even + c_odd * M_odd + last * M_last))
    return total


def _pv_matrix(xi, G, low_weight=0.0):
    """P with (P f)_i ~ PV int G(xi, eta_i) f(xi) / (eta_i - xi) dxi; G[j, i] holds G(xi_j, eta_i).

    low_weight * G[0, i] stands for G(xi, eta_i) integrated over (0, xi_0), where
    the integrand is carried by f(xi_0) / eta_i.
    """
    n = xi.size
    y = np.log(xi)
    dy = y[1] - y[0]
    trap = np.full(n, dy)
    P = np.zeros((n, n))
    for i in range(n):
        eta = xi[i]
        lo, hi = max(0, i - PV_BAND), min(n - 1, i + PV_BAND)
        left = np.arange(0, lo + 1)
        right = np.arange(hi, n)
        for idx in (left, right):
            if idx.size < 2:
                continue
            w = trap[idx].copy()
            w[0] *= 0.5
            w[-1] *= 0.5
            P[i, idx] += w * xi[idx] * G[idx, i] / (eta - xi[idx])
        xi_lo, xi_hi = xi[lo], xi[hi]
        # g(xi) ~ g(eta) + g'(eta)(xi - eta) on the excluded band
        P[i, i] += G[i, i] * math.log((eta - xi_lo) / (xi_hi - eta)) if 0 < i < n - 1 else 0.0
        a, b = max(0, i - 1), min(n - 1, i + 1)
        span = xi[b] - xi[a]
        P[i, b] -= (xi_hi - xi_lo) * G[b, i] / span
        P[i, a] += (xi_hi - xi_lo) * G[a, i] / span
    if low_weight:
        P[:, 0] += low_weight * G[0, :] / xi
    return P


@dataclass
class TransferenceKernel:
    xi_grid: np.ndarray
    F_table: np.ndarray
    diag_coeff: np.ndarray
    rho_values: np.ndarray
    log_rho_derivative: np.ndarray
    weight_R: np.ndarray
    weight_samples: np.ndarray
    low_mass: float = 0.0
    _matrices: dict = field(default_factory=dict, repr=False)

    @property
    def eta_grid(self):
        return self.xi_grid

    def _low_weight(self):
        # rho mass below the grid, per unit rho(xi_0)
        return float(self.low_mass) / float(self.rho_values[0])

    def off_diagonal_matrix(self):
        if "off" not in self._matrices:
            G = self.rho_values[:, None] * self.F_table
            self._matrices["off"] = _pv_matrix(self.xi_grid, G, self._low_weight())
        return self._matrices["off"]

    def matrix(self):
        if "full" not in self._matrices:
            self._matrices["full"] = np.diag(self.diag_coeff) + self.off_diagonal_matrix()
        return self._matrices["full"]

    def commutator_matrix(self):
        """Kernel form of [xi d_xi, K]."""
        if "com" not in self._matrices:
            y = np.log(self.xi_grid)
            G = self.rho_values[:, None] * self.F_table
            Gcom = np.gradient(G, y, axis=0) + np.gradient(G, y, axis=1)
            diag = np.gradient(self.diag_coeff, y)
            self._matrices["com"] = np.diag(diag) + _pv_matrix(self.xi_grid, Gcom, self._low_weight())
        return self._matrices["com"]

    def to_arrays(self):
        return {
            "xi_grid": self.xi_grid,
            "F_table": self.F_table,
            "diag_coeff": self.diag_coeff,
            "rho_values": self.rho_values,
            "log_rho_derivative": self.log_rho_derivative,
            "weight_R": self.weight_R,
            "weight_samples": self.weight_samples,
            "low_mass": np.array(self.low_mass),
        }

    @classmethod
    def from_arrays(cls, arrays):
        fields = {name: arrays[name] for name in cls.__dataclass_fields__ if not name.startswith("_") and name in arrays}
        if "low_mass" in fields:
            fields["low_mass"] = float(fields["low_mass"])
        return cls(**fields)


def f_kernel(xi, eta, tables, quad=None, r_far=300.0, tail_step=0.1):
    """F(xi, eta) = int W(R) phi(R, xi) phi(R, eta) dR for a single pair."""
    if xi <= 0 or eta <= 0:
        raise DomainError(f"f_kernel needs xi, eta > 0, got ({xi}, {eta})")
    quad = quad or QuadratureGrid(float(tables.R_grid[0]))
    cols = [tables.column_at(xi), tables.column_at(eta)]
    R = quad.R
    near = quad.plain_weights(R.size - 1) * commutator_weight(R) * cols[0].evaluate(R) * cols[1].evaluate(R)
    R_tail = _tail_grid(quad.r_cut, r_far, tail_step)
    amp = np.empty((R_tail.size, 2), dtype=complex)
    freq = np.zeros(2)
    for j, (col, x) in enumerate(zip(cols, (xi, eta))):
        if col.k * R_tail[0] >= TAIL_FREQUENCY_Q:
            sigma, _ = wkb_amplitude(R_tail, x, tables.operator, tables.wkb_terms)
            amp[:, j] = col.a * x**-0.25 * sigma * np.exp(1j * col.k * R_tail)
            freq[j] = col.k
        else:
            amp[:, j] = 0.5 * col.evaluate(R_tail)
    tail = _tail_kernel(commutator_weight(R_tail), amp, freq, R_tail[1] - R_tail[0])
    _check_remainder(amp, r_far, np.sum(near) + tail[0, 1], tables.tol_quad)
    return float(np.sum(near) + tail[0, 1])


def _check_remainder(amp, r_far, scale, tol):
    # int_{r_far}^inf |W| |phi|^2 <= (16/3) r_far^-3 max |phi|^2
    bound = 16.0 / (3.0 * r_far**3) * 4.0 * float(np.max(np.abs(amp[-1]))) ** 2
    if bound > tol * max(abs(scale), 1.0):
        logger.error(f"kernel tail beyond R={r_far} may reach {bound:.2e}")
        raise AccuracyError(f"kernel tail estimate {bound:.2e} above tolerance {tol} at R={r_far}")


def build_kernel(tables, quad=None, r_far=300.0, tail_step=0.1):
    """F on xi_grid x xi_grid, the diagonal coefficient and W(R) samples."""
    quad = quad or QuadratureGrid(float(tables.R_grid[0]))
    if quad.r_cut >= r_far:
        raise ConfigurationError(f"kernel tail start {quad.r_cut} must lie below r_far={r_far}")
    R = quad.R
    W = commutator_weight(R)
    Phi = tables.phi_matrix(R)
    w = quad.plain_weights(R.size - 1) * W
    F = Phi.T @ (w[:, None] * Phi)
    R_tail = _tail_grid(quad.r_cut, r_far, tail_step)
    amp, freq = _tail_profiles(tables, R_tail)
    F += _tail_kernel(commutator_weight(R_tail), amp, freq, R_tail[1] - R_tail[0])
    _check_remainder(amp, r_far, np.max(np.abs(F)), tables.tol_quad)
    asym = float(np.max(np.abs(F - F.T)))
    if asym > 1e-10 * np.max(np.abs(F)):
        logger.warning(f"kernel asymmetry {asym:.2e} before symmetrization")
    F = 0.5 * (F + F.T)
    lrd = tables.log_rho_derivative()
    kernel = TransferenceKernel(
        xi_grid=tables.xi_grid,
        F_table=F,
        diag_coeff=-(1.5 + lrd),
        rho_values=tables.rho_values,
        log_rho_derivative=lrd,
        weight_R=R,
        weight_samples=W,
        low_mass=tables.low_frequency_mass(),
    )
    logger.info(f"Transference kernel built on {tables.xi_grid.size} energies, max |F| = {np.max(np.abs(F)):.3e}")
    return kernel


def _on_kernel_grid(fhat, kernel):
    if isinstance(fhat, GridFunction):
        if fhat.x.shape == kernel.xi_grid.shape and np.allclose(fhat.x, kernel.xi_grid, rtol=1e-13):
            return np.asarray(fhat.y)
        xi = kernel.xi_grid
        if xi[0] < fhat.x[0] or xi[-1] > fhat.x[-1]:
            logger.warning("apply_K: input grid does not cover the kernel grid; extrapolating")
        return np.asarray(fhat(xi))
    values = np.asarray(fhat)
    if values.shape[-1] != kernel.xi_grid.size:
        raise ConfigurationError(f"expected {kernel.xi_grid.size} samples, got {values.shape[-1]}")
    return values


def _result(values, kernel, eta):
    out = GridFunction(kernel.xi_grid, values)
    if eta is None:
        return out
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < kernel.xi_grid[0]) or np.any(eta > kernel.xi_grid[-1]):
        logger.warning("apply_K: output energies outside the kernel grid; extrapolating")
    return GridFunction(eta, out(eta))


def apply_K(fhat, kernel, eta=None):
    """K f(eta) = -(3/2 + eta rho'/rho) f(eta) + PV int rho(xi) F(xi, eta) f(xi) / (eta - xi) dxi."""
    values = _on_kernel_grid(fhat, kernel)
    return _result(values @ kernel.matrix().T, kernel, eta)


def off_diagonal_apply(fhat, kernel, eta=None):
    """K_0, the principal-value part of K."""
    values = _on_kernel_grid(fhat, kernel)
    return _result(values @ kernel.off_diagonal_matrix().T, kernel, eta)


def xi_derivative(values, xi):
    """xi d/dxi along the last axis, from a quintic spline in ln xi."""
    y = np.log(xi)
    return make_interp_spline(y, values, k=5, axis=-1).derivative()(y)


def commutator_apply(fhat, kernel):
    """[xi d_xi, K] f by composition."""
    values = _on_kernel_grid(fhat, kernel)
    K = kernel.matrix()
    xi = kernel.xi_grid
    out = xi_derivative(values @ K.T, xi) - xi_derivative(values, xi) @ K.T
    return GridFunction(xi, out)


def commutator_kernel_apply(fhat, kernel):
    """[xi d_xi, K] f from its own principal-value kernel."""
    values = _on_kernel_grid(fhat, kernel)
    return GridFunction(kernel.xi_grid, values @ kernel.commutator_matrix().T)


def kernel_bounds_report(kernel, decay_power=3):
    """Sampled forms of the kernel bounds: symmetry, small-energy vanishing, decay and derivative sizes."""
    xi = kernel.xi_grid
    F = kernel.F_table
    X, E = np.meshgrid(xi, xi, indexing="ij")
    total = X + E
    small = total <= 1.0
    large = ~small
    scale = float(np.max(np.abs(F)))
    dF = np.gradient(F, xi, axis=0)
    report = {
        "max_abs_F": scale,
        "symmetry_defect": float(np.max(np.abs(F - F.T))) / scale,
        "F_at_smallest": float(F[0, 0]),
        "small_energy_ratio": float(np.max(np.abs(F[small]) / total[small])) if np.any(small) else None,
        "small_energy_derivative": float(np.max(np.abs(dF[small]))) if np.any(small) else None,
        "decay_constant": None,
        "diag_identity_defect": float(
            np.max(
                np.abs(
                    kernel.diag_coeff
                    - (-2.0 * (1.0 + kernel.log_rho_derivative) + (0.5 + kernel.log_rho_derivative))
                )
            )
        ),
    }
    if np.any(large):
        weight = total**1.5 * (1.0 + np.abs(np.sqrt(X) - np.sqrt(E))) ** decay_power
        report["decay_constant"] = float(np.max(np.abs(F[large]) * weight[large]))
    return report


def commutation_identity_sides(xi, eta, tables, quad=None):
    """((eta - xi) F(xi, eta), -<(2 W_R d_R + W_RR) phi(., xi), phi(., eta)>) on the near region."""
    quad = quad or QuadratureGrid(float(tables.R_grid[0]), segments=((40.0, 0.004),))
    R = quad.R
    w = quad.plain_weights(R.size - 1)
    p_xi, dp_xi = tables.column_at(xi).evaluate(R, derivative=True)
    p_eta = tables.column_at(eta).evaluate(R)
    W = commutator_weight(R)
    W_R, W_RR = commutator_weight_derivatives(R)
    left = (eta - xi) * np.sum(w * W * p_xi * p_eta)
    right = -np.sum(w * (2.0 * W_R * dp_xi + W_RR * p_xi) * p_eta)
    return float(left), float(right)


def operator_quotient(kernel, tables, alpha, samples, apply=off_diagonal_apply, gain=0.5):
    """max over samples of ||apply(f)||_{alpha + gain} / ||f||_alpha."""
    quotients = []
    for fhat in samples:
        out = apply(GridFunction(kernel.xi_grid, fhat), kernel)
        quotients.append(sobolev_norm(out.y, tables, alpha + gain) / sobolev_norm(fhat, tables, alpha))
    return float(np.max(quotients)), quotients


def band_limited_samples(xi, n_samples=5, seed=0):
    """Random smooth profiles in ln xi supported inside the grid."""
    rng = np.random.default_rng(seed)
    y = np.log(xi)
    lo, hi = y[0] + 0.2 * (y[-1] - y[0]), y[-1] - 0.2 * (y[-1] - y[0])
    mid, width = 0.5 * (lo + hi), 0.5 * (hi - lo)
    envelope = np.exp(-(((y - mid) / width) ** 8))
    samples = []
    for _ in range(n_samples):
        coeffs = rng.normal(size=6)
        phase = sum(c * np.cos((m + 1) * np.pi * (y - lo) / (hi - lo)) for m, c in enumerate(coeffs))
        samples.append(envelope * phase)
    return samples


def identity_profiles():
    """Test profiles u(R) paired with R u'(R): Gaussian-weighted, bump and band-limited."""

    def gaussian(R):
        return R**1.5 * np.exp(-(R**2))

    def bump(R):
        return (1.0 + R) * R**1.5 * np.exp(-0.5 * R**2)

    def band(R):
        return R**1.5 * np.exp(-0.5 * R**2) * np.cos(2.0 * R)

    return {
        "gaussian": (gaussian, lambda R: (1.5 - 2.0 * R**2) * gaussian(R)),
        "bump": (bump, lambda R: (1.5 + R / (1.0 + R) - R**2) * bump(R)),
        "band_limited": (
            band,
            lambda R: (1.5 - R**2) * band(R) - 2.0 * R**2.5 * np.exp(-0.5 * R**2) * np.sin(2.0 * R),
        ),
    }


def transference_identity_defect(u, R_du, tables, kernel, quad=None):
    """||F(R u') - (-2 xi d_xi uhat + K uhat)||_0 / ||uhat||_0 for callables u and R u'."""
    if kernel.xi_grid.shape != tables.xi_grid.shape or not np.allclose(kernel.xi_grid, tables.xi_grid, rtol=1e-13):
        raise ConfigurationError("kernel and spectral tables live on different energy grids")
    quad = quad or QuadratureGrid(float(tables.R_grid[0]))
    R = quad.R
    uhat = distorted_ft(GridFunction(R, u(R)), tables, quad).y
    lhs = distorted_ft(GridFunction(R, R_du(R)), tables, quad).y
    rhs = -2.0 * xi_derivative(uhat, kernel.xi_grid) + uhat @ kernel.matrix().T
    defect = sobolev_norm(lhs - rhs, tables, 0.0) / sobolev_norm(uhat, tables, 0.0)
    logger.debug(f"transference identity defect {defect:.3e}")
    return float(defect)
