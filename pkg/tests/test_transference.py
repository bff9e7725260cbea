from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from blowup_modules.errors import ConfigurationError, DomainError
from blowup_modules.profile_core import GridFunction
from blowup_modules.spectral_toolkit import OperatorSpec, QuadratureGrid, sobolev_norm
from blowup_modules.transference import (
    TransferenceKernel,
    apply_K,
    band_limited_samples,
    build_kernel,
    commutation_identity_sides,
    commutator_apply,
    commutator_kernel_apply,
    commutator_weight,
    commutator_weight_derivatives,
    f_kernel,
    identity_profiles,
    kernel_bounds_report,
    off_diagonal_apply,
    operator_quotient,
    transference_identity_defect,
)


def test_commutator_weight_closed_form():
    R = np.geomspace(1e-3, 1e3, 30)
    op = OperatorSpec.ground_state()
    dV, _ = op.potential_derivatives(R)
    assert_allclose(commutator_weight(R), -2.0 * op.potential(R) - R * dV, rtol=1e-12, atol=1e-30)
    h = 1e-5 * (1.0 + R)
    W_R, _ = commutator_weight_derivatives(R)
    numeric = (commutator_weight(R + h) - commutator_weight(R - h)) / (2 * h)
    assert_allclose(W_R, numeric, rtol=1e-5, atol=1e-12)
    with pytest.raises(DomainError):
        commutator_weight(-1.0)


@pytest.mark.parametrize("xi, eta", [(0.5, 2.0), (1.0, 3.0)])
def test_commutation_identity(tables, xi, eta):
    left, right = commutation_identity_sides(xi, eta, tables)
    assert left == pytest.approx(right, rel=1e-3)


def test_kernel_bounds(kernel):
    report = kernel_bounds_report(kernel)
    assert report["symmetry_defect"] <= 1e-8
    assert abs(report["F_at_smallest"]) <= 1e-3
    assert report["diag_identity_defect"] <= 1e-12
    assert np.isfinite(report["decay_constant"])


def test_single_pair_matches_the_table(tables, kernel, small_params):
    quad = QuadratureGrid(small_params.grid_R.min)
    i, j = 60, 75
    value = f_kernel(tables.xi_grid[i], tables.xi_grid[j], tables, quad)
    assert value == pytest.approx(kernel.F_table[i, j], rel=1e-6, abs=1e-12)


def test_f_kernel_needs_positive_energies(tables):
    with pytest.raises(DomainError):
        f_kernel(-1.0, 1.0, tables)


def test_kernel_tail_must_start_inside_far_radius(tables):
    with pytest.raises(ConfigurationError):
        build_kernel(tables, QuadratureGrid(1e-4), r_far=5.0)


def test_apply_K(kernel):
    xi = kernel.xi_grid
    assert not np.any(apply_K(np.zeros(xi.size), kernel).y)
    f = np.exp(-((np.log(xi)) ** 2))
    out = apply_K(GridFunction(xi, f), kernel)
    assert_allclose(out.y, kernel.matrix() @ f)
    # diagonal plus principal-value parts
    assert_allclose(out.y, kernel.diag_coeff * f + off_diagonal_apply(f, kernel).y, rtol=1e-12, atol=1e-14)
    with pytest.raises(ConfigurationError):
        apply_K(np.zeros(xi.size - 1), kernel)


def test_apply_K_at_output_energies(kernel):
    xi = kernel.xi_grid
    f = np.exp(-((np.log(xi)) ** 2))
    eta = xi[10:20]
    assert_allclose(apply_K(f, kernel, eta).y, apply_K(f, kernel).y[10:20], rtol=1e-8)


def test_commutator_paths_agree(kernel, tables):
    xi = kernel.xi_grid
    inner = slice(xi.size // 5, xi.size - xi.size // 5)
    for f in band_limited_samples(xi, n_samples=3):
        composed = commutator_apply(f, kernel).y
        direct = commutator_kernel_apply(f, kernel).y
        diff = np.zeros(xi.size)
        diff[inner] = (composed - direct)[inner]
        assert sobolev_norm(diff, tables, 0.0) <= 0.1 * sobolev_norm(direct, tables, 0.0)


def test_operator_quotient_is_finite(kernel, tables):
    samples = band_limited_samples(kernel.xi_grid, n_samples=3, seed=1)
    worst, quotients = operator_quotient(kernel, tables, 0.5, samples)
    assert len(quotients) == 3
    assert 0 < worst < np.inf


def test_kernel_survives_array_export(kernel):
    copy = TransferenceKernel.from_arrays(kernel.to_arrays())
    assert_allclose(copy.matrix(), kernel.matrix())
    assert copy.low_mass == kernel.low_mass


def test_mass_below_the_grid_enters_the_first_column(kernel, tables):
    assert kernel.low_mass == pytest.approx(tables.low_frequency_mass())
    bare = replace(kernel, low_mass=0.0, _matrices={})
    diff = kernel.off_diagonal_matrix() - bare.off_diagonal_matrix()
    expected = kernel.low_mass * kernel.F_table[0, :] / kernel.xi_grid
    assert_allclose(diff[:, 0], expected, rtol=1e-9, atol=1e-12 * np.max(np.abs(bare.off_diagonal_matrix())))
    assert not np.any(diff[:, 1:])


@pytest.mark.parametrize("name", ["gaussian", "bump", "band_limited"])
def test_transference_identity(tables, kernel, name):
    u, R_du = identity_profiles()[name]
    assert transference_identity_defect(u, R_du, tables, kernel) <= 5e-3


def test_transference_identity_needs_the_mass_below_the_grid(tables, kernel):
    u, R_du = identity_profiles()["gaussian"]
    bare = replace(kernel, low_mass=0.0, _matrices={})
    assert transference_identity_defect(u, R_du, tables, kernel) < transference_identity_defect(u, R_du, tables, bare)


def test_transference_identity_checks_the_grids(tables, kernel):
    u, R_du = identity_profiles()["gaussian"]
    with pytest.raises(ConfigurationError):
        transference_identity_defect(u, R_du, tables, replace(kernel, xi_grid=2.0 * kernel.xi_grid, _matrices={}))


@pytest.mark.slow
@pytest.mark.parametrize("name", ["gaussian", "bump", "band_limited"])
def test_transference_identity_on_fine_grid(fine_tables, fine_kernel, name):
    u, R_du = identity_profiles()[name]
    assert transference_identity_defect(u, R_du, fine_tables, fine_kernel) <= 1e-3
