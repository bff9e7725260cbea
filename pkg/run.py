"""Command-line entry point: build, cache, check and export the blow-up construction."""

import argparse
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy.special import j1

from blowup_modules import crud
from blowup_modules.database import LOG_LEVEL, SessionLocal, init_db
from blowup_modules.elliptic_corrector import ConeGrid, assemble_profile, build_correction_stack, error_exponent_gain
from blowup_modules.errors import BlowupError, ConfigurationError, StateError
from blowup_modules.fixed_point import (
    FixedPointProblem,
    assemble_solution,
    contraction_ratios,
    decay_exponent,
    energy_decay_exponent,
    iterate,
    local_energy,
    plancherel_defect,
    residual_improvement,
    source_norm_profile,
)
from blowup_modules.mode_transport import (
    aligned_tau_grid,
    apply_H,
    fundamental_S,
    mode_basis,
    norm_gain_quotient,
    transport_defect,
)
from blowup_modules.profile_core import GridFunction
from blowup_modules.schemas import CommandName, OutputFormat, Params, RunConfig
from blowup_modules.spectral_toolkit import (
    OperatorSpec,
    QuadratureGrid,
    SpectralColumn,
    SpectralTables,
    build_spectral_tables,
    distorted_ft,
    inverse_distorted_ft,
    phi_global,
    psi_plus_wkb,
    sobolev_norm,
)
from blowup_modules.transference import (
    TransferenceKernel,
    build_kernel,
    commutation_identity_sides,
    identity_profiles,
    kernel_bounds_report,
    transference_identity_defect,
)

logging.basicConfig(
    format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NUMERICAL = 3

KERNEL_R_FAR = 300.0


# Configuration
def build_parser():
    parser = argparse.ArgumentParser(prog="blowup", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with a RunConfig")
    common.add_argument("--nu", type=float)
    common.add_argument("--k", type=int)
    common.add_argument("--N", dest="bigN", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--t0", type=float)
    common.add_argument("--xi-min", type=float)
    common.add_argument("--xi-max", type=float)
    common.add_argument("--n-xi", type=int)
    common.add_argument("--r-min", type=float)
    common.add_argument("--n-tau", type=int)
    common.add_argument("--tau-factor", type=float)
    common.add_argument("--cache-dir", type=Path)
    common.add_argument("--output", type=Path)
    common.add_argument("--format", choices=[f.value for f in OutputFormat])
    common.add_argument("--max-iter", type=int)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in CommandName:
        sub.add_parser(name.value, parents=[common])
    return parser


def build_config(args) -> RunConfig:
    raw = json.loads(args.config.read_text()) if args.config else {}
    raw["command"] = args.command
    params = dict(raw.get("params", {}))
    defaults = Params()
    for flag, field in (("nu", "nu"), ("k", "k"), ("bigN", "bigN"), ("alpha", "alpha"), ("t0", "t0")):
        value = getattr(args, flag)
        if value is not None:
            params[field] = value
    for grid, pairs in (
        ("grid_xi", (("xi_min", "min"), ("xi_max", "max"), ("n_xi", "n"))),
        ("grid_R", (("r_min", "min"),)),
        ("grid_tau", (("n_tau", "n"), ("tau_factor", "tau_max_factor"))),
    ):
        updates = {key: getattr(args, flag) for flag, key in pairs if getattr(args, flag) is not None}
        if updates:
            base = params.get(grid) or getattr(defaults, grid).model_dump()
            params[grid] = {**base, **updates}
    raw["params"] = params
    for flag in ("cache_dir", "output", "format", "max_iter"):
        value = getattr(args, flag)
        if value is not None:
            raw[flag] = str(value) if isinstance(value, Path) else value
    env_cache = os.getenv("BLOWUP_CACHE_DIR")
    if env_cache:
        raw["cache_dir"] = env_cache
    return RunConfig.model_validate_json(json.dumps(raw))


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def spectral_cache_key(params: Params, operator: OperatorSpec) -> str:
    return _key(
        {
            "operator": operator.kind,
            "grid_xi": params.grid_xi.model_dump(),
            "grid_R": params.grid_R.model_dump(),
            "q_match": params.q_match,
            "wkb_terms": params.wkb_terms,
            "ode_rtol": params.ode_rtol,
            "tol_quad": params.tol_quad,
        }
    )


def kernel_cache_key(spectral_key: str, quad: QuadratureGrid) -> str:
    return _key({"spectral": spectral_key, "quad": list(map(str, quad.key)), "r_far": KERNEL_R_FAR})


# Cached builds
def load_spectral_tables(db, params, operator=None):
    operator = operator or OperatorSpec.ground_state()
    key = spectral_cache_key(params, operator)
    arrays = crud.get_spectral_tables(db, key)
    if arrays is not None:
        logger.info(f"spectral tables cache hit {key[:12]}")
        return SpectralTables.from_arrays(arrays), key
    tables = build_spectral_tables(params, operator)
    crud.save_spectral_tables(db, key, params.grid_xi.model_dump(), tables.to_arrays())
    return tables, key


def load_kernel(db, params, tables, spectral_key):
    quad = QuadratureGrid(params.grid_R.min)
    key = kernel_cache_key(spectral_key, quad)
    arrays = crud.get_kernel(db, key)
    if arrays is not None:
        logger.info(f"kernel cache hit {key[:12]}")
        return TransferenceKernel.from_arrays(arrays), key
    kernel = build_kernel(tables, quad, r_far=KERNEL_R_FAR)
    crud.save_kernel(db, key, spectral_key, {"quad": list(map(str, quad.key))}, kernel.to_arrays())
    return kernel, key


def build_problem(db, params):
    tables, key = load_spectral_tables(db, params)
    kernel, _ = load_kernel(db, params, tables, key)
    stack = build_correction_stack(params)
    return FixedPointProblem.build(params, stack, tables, kernel, mode_basis(params.nu))


# Output
class Artifact:
    """Columns plus metrics, written as CSV with `#` header lines or as JSON."""

    def __init__(self, columns=None, rows=None, metrics=None, extra=None):
        self.columns = list(columns or [])
        self.rows = np.asarray(rows if rows is not None else np.empty((0, len(self.columns))), dtype=float)
        self.metrics = metrics or {}
        self.extra = extra or {}

    def to_csv(self, config_hash, command):
        header = [f"config_hash={config_hash}", f"command={command}", f"columns={','.join(self.columns)}"]
        header += [f"{name}={json.dumps(_jsonable(value), sort_keys=True)}" for name, value in sorted(self.metrics.items())]
        buffer = io.StringIO()
        np.savetxt(buffer, self.rows, fmt="%.17g", delimiter=",", header="\n".join(header), comments="# ")
        return buffer.getvalue()

    def to_json(self, config_hash, command):
        payload = {
            "schema_version": 1,
            "config_hash": config_hash,
            "command": command,
            "metrics": _jsonable(self.metrics),
            "columns": self.columns,
            "rows": self.rows.tolist(),
            **_jsonable(self.extra),
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        return None if not math.isfinite(float(value)) else float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def write_artifact(config: RunConfig, artifact: Artifact, suffix=""):
    fmt = config.format.value
    path = config.output or config.cache_dir / f"{config.command.value}.{fmt}"
    if suffix:
        path = path.with_name(f"{path.stem}_{suffix}{path.suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    config_hash = config.params.config_hash()
    if config.format == OutputFormat.csv:
        text = artifact.to_csv(config_hash, config.command.value)
    else:
        text = artifact.to_json(config_hash, config.command.value)
    path.write_text(text)
    logger.info(f"wrote {path}")
    return path


# Commands
def cmd_build_profile(config, db):
    params = config.params
    profile = assemble_profile(params)
    tt, rr = profile.grid.mesh()
    rows = np.column_stack([tt.ravel(), rr.ravel(), (rr / tt).ravel(), profile.u_grid.ravel(), profile.ue_grid.ravel(), profile.e_grid.ravel()])
    t_values = params.t0 * np.array([1.0, 0.5, 0.25])
    metrics = {
        "level": profile.level,
        "max_abs_t2e": float(np.nanmax(np.abs(profile.e_grid * tt**2))),
        "error_exponent": error_exponent_gain(profile.stack, profile.level, t_values),
    }
    return Artifact(["t", "r", "a", "u", "u_e", "e"], rows, metrics)


def cmd_spectral_tables(config, db):
    tables, key = load_spectral_tables(db, config.params)
    rows = np.column_stack([tables.xi_grid, tables.rho_values, tables.a_values.real, tables.a_values.imag])
    metrics = {"cache_key": key, "low_frequency_mass": tables.low_frequency_mass()}
    return Artifact(["xi", "rho", "a_re", "a_im"], rows, metrics)


def cmd_transference(config, db):
    tables, key = load_spectral_tables(db, config.params)
    kernel, kernel_key = load_kernel(db, config.params, tables, key)
    report = kernel_bounds_report(kernel)
    rows = np.column_stack([kernel.xi_grid, kernel.diag_coeff, np.diag(kernel.F_table)])
    return Artifact(["xi", "diag_coeff", "F_diagonal"], rows, {"cache_key": kernel_key, **report})


def transport_checks(params, tables=None):
    nu = params.nu
    basis = mode_basis(nu)
    w = basis.wronskians()
    sigma = np.array([0.3, 1.0, 4.0, 20.0])
    S_diag = max(abs(fundamental_S(s, s, xi, basis)) for s in sigma for xi in (0.5, 4.0))
    dS_diag = max(abs(fundamental_S(s, s, xi, basis, derivative=True) + 1.0) for s in sigma for xi in (0.5, 4.0))
    xi = np.geomspace(1e-2, 1e2, 121)
    tau = aligned_tau_grid(1.0, 8.0, 40, xi, nu)
    profile = np.exp(-np.log(xi) ** 2)
    b = tau[:, None] ** -4.0 * profile[None, :]
    x, dx = apply_H(b, tau, xi, nu, basis, decay_power=4.0)
    defect, consistency, checked = transport_defect(x, dx, b, tau, xi, nu)
    metrics = {
        "W_phi0_phi1": float(np.max(np.abs(w["phi0_phi1"] - 1.0))),
        "W_phi2_conj": float(np.max(np.abs(w["phi2_conj"] + 2j))),
        "S_diagonal": S_diag,
        "dS_diagonal": dS_diag,
        "transport_defect": defect,
        "transport_consistency": consistency,
        "checked_samples": checked,
    }
    rows = np.empty((0, 2))
    if tables is not None:
        gains = norm_gain_quotient(profile_on(tables.xi_grid), tau_grid_for(tables, nu), tables, nu, params.alpha)
        metrics["norm_gain"] = gains
        rows = np.array(sorted(gains.items()), dtype=float)
    return Artifact(["N", "gain_quotient"], rows, metrics)


def profile_on(xi):
    y = np.log(xi)
    return np.exp(-(((y - y.mean()) / (0.25 * (y[-1] - y[0]))) ** 2))


def tau_grid_for(tables, nu, n=24):
    return aligned_tau_grid(10.0, 8.0, n, tables.xi_grid, nu)


def cmd_transport_check(config, db):
    tables, _ = load_spectral_tables(db, config.params)
    return transport_checks(config.params, tables)


def _solve(config, db):
    problem = build_problem(db, config.params)
    state = iterate(problem, config.max_iter)
    return problem, state, assemble_solution(state, problem)


def cmd_solve(config, db):
    params = config.params
    problem, state, solution = _solve(config, db)
    lo, hi = solution.t_range
    grid = ConeGrid(np.geomspace(lo, hi, 9), np.linspace(0.0, 1.0, 121)[1:-1])
    tt, rr = grid.mesh()
    eps = solution.eps(tt, rr)
    u = solution.u(tt, rr)
    rows = np.column_stack([tt.ravel(), rr.ravel(), u.ravel(), eps.ravel()])
    energies = {f"{t:.6g}": local_energy(solution.u, t) for t in grid.t}
    metrics = {"converged": state.converged, "iterations": state.iterations, "local_energy": energies}
    log_rows = np.array(
        [[e["iteration"], e["increment"], e["relative"], np.nan if e["ratio"] is None else e["ratio"]] for e in state.iteration_log]
    )
    write_artifact(config, Artifact(["iteration", "increment", "relative", "ratio"], log_rows, {}), suffix="iterations")
    return Artifact(["t", "r", "u", "eps"], rows, metrics)


def _check(report, name, value, threshold, passed):
    report[name] = {"value": value, "threshold": threshold, "passed": bool(passed)}
    level = logging.INFO if passed else logging.WARNING
    logger.log(level, f"{name}: {value} (threshold {threshold}) {'ok' if passed else 'FAILED'}")


def acceptance_report(params, db, max_iter):
    report = {}
    # Bessel oracle on the free operator
    r = np.linspace(0.1, 10.0, 60)
    worst = 0.0
    for z in (0.25, 1.0, 4.0):
        exact = 2.0 * z**-0.5 * np.sqrt(r) * j1(math.sqrt(z) * r)
        approx = phi_global(r, z, operator=OperatorSpec.free())
        worst = max(worst, float(np.max(np.abs(approx - exact) / np.max(np.abs(exact)))))
    _check(report, "bessel_oracle", worst, 1e-8, worst <= 1e-8)

    # Wronskians
    column = SpectralColumn(1.0, with_theta=True)
    w_theta = column.theta_phi_wronskian(np.linspace(1.0, params.q_match, 7))
    R = np.linspace(60.0, 200.0, 7)
    psi, dpsi = psi_plus_wkb(R, 1.0, derivative=True)
    w_psi = psi * np.conj(dpsi) - dpsi * np.conj(psi)
    basis = mode_basis(params.nu)
    w_modes = basis.wronskians()["phi0_phi1"]
    for name, values, target in (("W_theta_phi", w_theta, 1.0), ("W_psi_plus_minus", w_psi, -2j), ("W_phi0_phi1", w_modes, 1.0)):
        spread = float(np.max(np.abs(values - target)))
        _check(report, name, spread, 1e-5, spread < 1e-5)

    tables, key = load_spectral_tables(db, params)
    xi, rho = tables.xi_grid, tables.rho_values
    low = (xi >= 1e-8) & (xi <= 1e-4)
    high = (xi >= 1e2) & (xi <= 1e4)
    if np.any(low):
        g = rho[low] * xi[low] * np.log(xi[low]) ** 2
        _check(report, "density_low", float(g.max() / g.min()), 10.0, g.max() / g.min() <= 10.0)
    if np.any(high):
        g = rho[high] / xi[high]
        _check(report, "density_high", float(g.max() / g.min()), 10.0, g.max() / g.min() <= 10.0)

    # Unitarity of the distorted transform
    quad = QuadratureGrid(params.grid_R.min)
    R_test = np.geomspace(0.05, 5.0, 40)
    round_trip = plancherel = 0.0
    for profile in (lambda x: x**1.5 * np.exp(-x * x), lambda x: x**1.5 * np.exp(-0.5 * x * x) * (1 + x), lambda x: x**1.5 / (1 + x**2) * np.exp(-x * x)):
        f = GridFunction(quad.R, profile(quad.R), (1.5, 0), None)
        fhat = distorted_ft(f, tables, quad)
        back = inverse_distorted_ft(fhat, tables, R_test)
        round_trip = max(round_trip, float(np.max(np.abs(back.y - profile(R_test))) / np.max(np.abs(profile(R_test)))))
        l2 = math.sqrt(np.sum(quad.plain_weights(quad.R.size - 1) * f.y**2))
        plancherel = max(plancherel, abs(sobolev_norm(fhat, tables, 0.0) / l2 - 1.0))
    _check(report, "dft_round_trip", round_trip, 1e-4, round_trip <= 1e-4)
    _check(report, "dft_plancherel", plancherel, 1e-4, plancherel <= 1e-4)

    # Transference
    residual = 0.0
    for a, b in ((0.5, 2.0), (1.0, 3.0), (4.0, 9.0)):
        left, right = commutation_identity_sides(a, b, tables)
        residual = max(residual, abs(left - right) / max(abs(left), abs(right)))
    _check(report, "commutation_identity", residual, 1e-3, residual <= 1e-3)
    kernel, _ = load_kernel(db, params, tables, key)
    defect = max(transference_identity_defect(u, R_du, tables, kernel) for u, R_du in identity_profiles().values())
    _check(report, "transference_identity", defect, 1e-3, defect <= 1e-3)
    bounds = kernel_bounds_report(kernel)
    _check(report, "kernel_symmetry", bounds["symmetry_defect"], 1e-8, bounds["symmetry_defect"] <= 1e-8)
    _check(report, "kernel_origin", abs(bounds["F_at_smallest"]), 1e-3, abs(bounds["F_at_smallest"]) <= 1e-3)

    # Elliptic error decay per odd step
    t_values = params.t0 * np.array([1.0, 0.5, 0.25])
    slopes = {}
    for k in (1, 2):
        sub = Params(**{**params.model_dump(), "k": k, "bigN": min(params.bigN, 2 * k)})
        stack = build_correction_stack(sub)
        slopes[k] = error_exponent_gain(stack, stack.depth, t_values)
    gain = slopes[2] - slopes[1]
    _check(report, "error_gain_per_step", gain, [2 * params.nu - 0.2, 2 * params.nu + 0.2], abs(gain - 2 * params.nu) <= 0.2)

    # Transport
    transport = transport_checks(params, tables).metrics
    _check(report, "S_diagonal", transport["S_diagonal"], 1e-12, transport["S_diagonal"] <= 1e-12)
    _check(report, "dS_diagonal", transport["dS_diagonal"], 1e-8, transport["dS_diagonal"] <= 1e-8)
    _check(report, "transport_defect", transport["transport_defect"], 1e-3, transport["transport_defect"] <= 1e-3)
    gains = [transport["norm_gain"][N] for N in sorted(transport["norm_gain"])]
    _check(report, "norm_gain_decreasing", gains, "monotone", all(b < a for a, b in zip(gains, gains[1:])))

    # Fixed point and blow-up signature
    problem = FixedPointProblem.build(params, build_correction_stack(params), tables, kernel, basis)
    sources = source_norm_profile(problem)
    _check(report, "source_norm_spread", float(sources.max() / sources.min()), 10.0, sources.max() / sources.min() <= 10.0)
    state = iterate(problem, max_iter)
    ratios = contraction_ratios(state)
    _check(report, "contraction", ratios, "< 1 over >= 3 iterations", len(ratios) >= 2 and all(q < 1 for q in ratios))
    slope, _ = decay_exponent(state, problem)
    target = -(params.bigN - 2)
    _check(report, "decay_exponent", slope, [target - 0.5, target + 0.5], abs(slope - target) <= 0.5)
    _check(report, "plancherel_per_tau", plancherel_defect(state, problem), 1e-4, plancherel_defect(state, problem) <= 1e-4)
    solution = assemble_solution(state, problem)
    lo, hi = solution.t_range
    grid = ConeGrid(np.geomspace(lo * 1.02, hi / 1.02, 5), np.linspace(0.05, params.a_max, 40))
    improvement = residual_improvement(solution, grid, params.a_max)
    _check(report, "residual_improvement", improvement["factor"], 5.0, improvement["factor"] >= 5.0)
    t_energy = np.geomspace(lo * 1.02, hi / 1.02, 5)
    energies = np.array([local_energy(solution.u, t) for t in t_energy])
    spread = float(energies.max() / energies.min())
    _check(report, "energy_concentration", spread, 2.0, spread <= 2.0)
    eps_slope, _ = energy_decay_exponent(solution.eps, t_energy)
    _check(report, "eps_energy_exponent", eps_slope, params.bigN - 2, eps_slope >= params.bigN - 2)
    return report


def cmd_verify(config, db):
    report = acceptance_report(config.params, db, config.max_iter)
    passed = all(entry["passed"] for entry in report.values())
    metrics = {"passed": passed, "failed": sorted(name for name, entry in report.items() if not entry["passed"])}
    return Artifact([], None, metrics, {"report": report})


def cmd_export(config, db):
    params = config.params
    key = spectral_cache_key(params, OperatorSpec.ground_state())
    arrays = crud.get_spectral_tables(db, key)
    if arrays is None:
        raise StateError("no spectral tables cached for this configuration; run spectral-tables first")
    tables = SpectralTables.from_arrays(arrays)
    kernel_arrays = crud.get_kernel(db, kernel_cache_key(key, QuadratureGrid(params.grid_R.min)))
    columns = ["xi", "rho", "a_re", "a_im"]
    data = [tables.xi_grid, tables.rho_values, tables.a_values.real, tables.a_values.imag]
    if kernel_arrays is not None:
        columns.append("diag_coeff")
        data.append(kernel_arrays["diag_coeff"])
    runs = [{"id": r.id, "command": r.command, "status": r.status} for r in crud.list_run_records(db)]
    return Artifact(columns, np.column_stack(data), {"cache_key": key, "runs": len(runs)}, {"runs": runs})


COMMANDS = {
    CommandName.build_profile: cmd_build_profile,
    CommandName.spectral_tables: cmd_spectral_tables,
    CommandName.transference: cmd_transference,
    CommandName.transport_check: cmd_transport_check,
    CommandName.solve: cmd_solve,
    CommandName.verify: cmd_verify,
    CommandName.export: cmd_export,
}


# Lock
class RunLock:
    """Exclusive lock file under the cache directory; one writer at a time."""

    def __init__(self, cache_dir: Path):
        self.path = Path(cache_dir) / "run.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"cache {self.path.parent} is locked by another run ({self.path})")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run(config: RunConfig) -> int:
    url = os.getenv("BLOWUP_DATABASE_URL") or f"sqlite:///{config.cache_dir / 'blowup_cache.db'}"
    with RunLock(config.cache_dir):
        init_db(url)
        db = SessionLocal()
        try:
            record = crud.create_run_record(db, config.command.value, config.params.config_hash())
            try:
                artifact = COMMANDS[config.command](config, db)
            except BlowupError as exc:
                crud.finish_run_record(db, record.id, "failed", {"error": str(exc)})
                raise
            write_artifact(config, artifact)
            crud.finish_run_record(db, record.id, "ok", _jsonable(artifact.metrics))
        finally:
            db.close()
    if config.command == CommandName.verify and not artifact.metrics["passed"]:
        logger.warning(f"acceptance checks failed: {artifact.metrics['failed']}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args)
    except (ValidationError, ValueError, OSError) as exc:
        logger.critical(f"invalid configuration: {exc}")
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        return run(config)
    except ValueError as exc:
        logger.critical(f"{type(exc).__name__}: {exc}")
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except RuntimeError as exc:
        logger.error(f"numerical check failed: {type(exc).__name__}: {exc}")
        print(f"numerical check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
