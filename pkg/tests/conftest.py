import numpy as np
import pytest

from blowup_modules.database import SessionLocal, init_db
from blowup_modules.elliptic_corrector import build_correction_stack
from blowup_modules.fixed_point import FixedPointProblem
from blowup_modules.mode_transport import mode_basis
from blowup_modules.schemas import LogGridSpec, Params, TauGridSpec
from blowup_modules.spectral_toolkit import (
    OperatorSpec,
    QuadratureGrid,
    SpectralTables,
    build_spectral_tables,
)
from blowup_modules.transference import build_kernel


@pytest.fixture(scope="session")
def small_params():
    """Reduced grids: a decade of t around 0.1 and energies in [1e-4, 1e2]."""
    return Params(
        t0=0.1,
        k=2,
        bigN=4,
        grid_R=LogGridSpec(min=1e-4, max=1e3, n=200),
        grid_xi=LogGridSpec(min=1e-4, max=1e2, n=121),
        grid_tau=TauGridSpec(n=12, tau_max_factor=4.0),
        n_a=24,
    )


@pytest.fixture(scope="session")
def tables(small_params):
    return build_spectral_tables(small_params)


@pytest.fixture(scope="session")
def fine_params(small_params):
    """Energies in [1e-8, 1e3] at 100 points per decade."""
    return small_params.model_copy(update={"grid_xi": LogGridSpec(min=1e-8, max=1e3, n=1101)})


@pytest.fixture(scope="session")
def fine_tables(fine_params):
    return build_spectral_tables(fine_params)


@pytest.fixture(scope="session")
def fine_kernel(fine_tables, fine_params):
    return build_kernel(fine_tables, QuadratureGrid(fine_params.grid_R.min))


@pytest.fixture(scope="session")
def free_tables():
    """Synthetic tables of the free operator, rho = xi / 8; enough for norms."""
    xi = np.geomspace(1e-4, 1e2, 121)
    R = np.geomspace(1e-3, 10.0, 8)
    a = np.full(xi.size, 1.0 / np.sqrt(0.5 * np.pi), dtype=complex) / np.sqrt(xi)
    return SpectralTables(
        OperatorSpec.free(),
        xi,
        a,
        xi / 8.0,
        60.0 / np.sqrt(xi),
        R,
        np.zeros((R.size, xi.size)),
    )


@pytest.fixture(scope="session")
def kernel(tables, small_params):
    return build_kernel(tables, QuadratureGrid(small_params.grid_R.min))


@pytest.fixture(scope="session")
def stack(small_params):
    return build_correction_stack(small_params)


@pytest.fixture(scope="session")
def basis():
    return mode_basis(1.0)


@pytest.fixture(scope="session")
def problem(small_params, stack, tables, kernel, basis):
    return FixedPointProblem.build(small_params, stack, tables, kernel, basis)


@pytest.fixture
def db(tmp_path):
    init_db(f"sqlite:///{tmp_path / 'cache.db'}")
    session = SessionLocal()
    try:
        yield session
    finally:
        session.close()
