import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, confloat, conint, model_validator


# Grid specs
class LogGridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    min: confloat(gt=0)
    max: confloat(gt=0)
    n: conint(ge=3)

    @model_validator(mode="after")
    def check_order(self):
        if self.max <= self.min:
            raise ValueError(f"grid max {self.max} must exceed grid min {self.min}")
        return self

    def points(self) -> np.ndarray:
        return np.geomspace(self.min, self.max, self.n)


class TauGridSpec(BaseModel):
    """Time grid in tau; tau_max_factor is the ratio tau_max / tau(t0)."""

    model_config = ConfigDict(frozen=True)

    n: conint(ge=4) = 24
    tau_max_factor: confloat(gt=1) = 8.0


class Params(BaseModel):
    model_config = ConfigDict(frozen=True)

    nu: float = 1.0
    t0: confloat(gt=0, lt=1) = 1e-2
    k: conint(ge=1) = 3
    bigN: conint(ge=1) = 4
    alpha: float = 0.37
    grid_R: LogGridSpec = LogGridSpec(min=1e-4, max=1e3, n=600)
    grid_xi: LogGridSpec = LogGridSpec(min=1e-8, max=1e4, n=2401)
    grid_tau: TauGridSpec = TauGridSpec()
    tol_series: confloat(gt=0) = 1e-14
    tol_quad: confloat(gt=0) = 1e-6

    # Numerical knobs
    b0: confloat(gt=0) = 0.25
    a_max: confloat(gt=0, lt=1) = 0.9
    q_match: confloat(gt=5) = 60.0
    q_min: confloat(gt=0) = 5.0
    wkb_terms: conint(ge=1, le=4) = 4
    ode_rtol: confloat(gt=0) = 1e-12
    n_a: conint(ge=16) = 48
    r_cut: confloat(gt=0) = 8.0
    n_r_quad: conint(ge=101) = 2001

    @model_validator(mode="after")
    def check_invariants(self):
        if self.nu <= 0.5:
            raise ValueError(f"nu must exceed 1/2, got {self.nu}")
        if not 0.25 < self.alpha < self.nu / 2:
            raise ValueError(f"alpha must lie in (1/4, nu/2) = (0.25, {self.nu / 2}), got {self.alpha}")
        if self.bigN > 2 * self.k:
            raise ValueError(f"bigN must satisfy bigN <= 2k, got bigN={self.bigN}, k={self.k}")
        T0 = self.t0 ** (-self.nu)
        # b on the cone is maximal at R = tlambda for these grids
        b_edge = np.log(2.0 + T0**2) ** 2 / T0**2
        if b_edge > self.b0:
            raise ValueError(
                f"t0={self.t0} too large: b = ln^2(2+R^2)/(t lambda)^2 reaches {b_edge:.3g} > b0={self.b0}"
            )
        return self

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


class CommandName(str, Enum):
    build_profile = "build-profile"
    spectral_tables = "spectral-tables"
    transference = "transference"
    transport_check = "transport-check"
    solve = "solve"
    verify = "verify"
    export = "export"


class OutputFormat(str, Enum):
    csv = "csv"
    json = "json"


class RunConfig(BaseModel):
    command: CommandName
    params: Params = Field(default_factory=Params)
    cache_dir: Path = Path(".blowup_cache")
    output: Optional[Path] = None
    format: OutputFormat = OutputFormat.csv
    max_iter: conint(ge=1) = 8


class RunRecordResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    command: str
    config_hash: str
    status: str
    metrics: Optional[dict] = None
