from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple
from pathlib import Path
from enum import Enum

from src.utils.validators import DataValidator

class Technology(str, Enum):
    BP = "BP"
    JD = "JD"
    WGD = "WGD"

class Estimator(str, Enum):
    CNLS = "cnls"
    CER = "cer"

class DirectionRule(str, Enum):
    MEDIAN = "median"
    FIXED_SLACK = "fixed_slack"

class Strategy(str, Enum):
    OUTPUT_REDUCTION = "OutputReduction"
    INPUT_REDUCTION = "InputReduction"

class BracketKind(str, Enum):
    ABOVE_TOP = "AboveTop"
    BELOW_BOTTOM = "BelowBottom"
    BETWEEN = "Between"
    ON = "On"
    FULL = "Full"

class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"

class Scenario(str, Enum):
    S1 = "S1"
    S2 = "S2"

class ColumnRole(str, Enum):
    DMU_ID = "dmu_id"
    X_N = "xN"
    X_P = "xP"
    Y = "y"
    B = "b"
    P = "p"
    W = "w"
    U = "u"

class EmissionFactorSource(str, Enum):
    COLUMN = "column"
    RATIO = "ratio"
    CONSTANT = "constant"

class Weights(BaseModel):
    model_config = ConfigDict(frozen=True)

    w1: float = Field(0.0, ge=0, le=1, description="Weight on the emission-generating input change")
    w2: float = Field(0.5, ge=0, le=1, description="Weight on the desirable output change")
    w3: float = Field(0.5, ge=0, le=1, description="Weight on the undesirable output change")

    @model_validator(mode="after")
    def check_not_all_zero(self):
        if self.w1 + self.w2 + self.w3 <= 0:
            raise ValueError("at least one weight must be positive")
        return self

class QuantileGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    taus: Tuple[float, ...] = (0.05, 0.20, 0.35, 0.50, 0.65, 0.80, 0.95)

    @field_validator("taus")
    @classmethod
    def check_taus(cls, v):
        if not v:
            raise ValueError("quantile grid cannot be empty")
        for tau in v:
            if not 0.0 < tau < 1.0:
                raise ValueError(f"quantile {tau} outside (0, 1)")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("quantile grid must be strictly increasing")
        return tuple(float(t) for t in v)

    @property
    def step(self) -> Optional[float]:
        """Common spacing of the grid, None when uneven."""
        if len(self.taus) < 2:
            return None
        gaps = [round(b - a, 10) for a, b in zip(self.taus, self.taus[1:])]
        return gaps[0] if len(set(gaps)) == 1 else None

class QuantileBracket(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: BracketKind
    tau_lo: Optional[float] = Field(None, description="Lower enclosing quantile, or the single quantile")
    tau_hi: Optional[float] = Field(None, description="Upper enclosing quantile for Between")

    @property
    def label(self) -> str:
        if self.kind == BracketKind.BETWEEN:
            return f"Between({self.tau_lo:g},{self.tau_hi:g})"
        if self.kind in (BracketKind.ON, BracketKind.ABOVE_TOP, BracketKind.BELOW_BOTTOM):
            return f"{self.kind.value}({self.tau_lo:g})"
        return self.kind.value

class ShadowPriceRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    dmu_id: str
    bracket: QuantileBracket
    mrt: List[List[float]] = Field(..., description="MRT per (undesirable k, desirable j)")
    mp: List[List[float]] = Field(..., description="MP per (undesirable k, emission input m)")
    pmrt: float
    wmp: float
    mac: float
    strategy: Strategy
    floored_gamma: bool = False
    floored_eta: bool = False

class MacReport(BaseModel):
    technology: Technology
    estimator: Estimator
    n_records: int
    mean: Dict[str, float]
    median: Dict[str, float]
    strategy_share_percent: Dict[str, float]
    input_reduction_percent: float

class ExtremeDmu(BaseModel):
    dmu_id: str
    mac: float
    bracket: str
    relative_to_mean: Dict[str, float]

class DgpConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: Scenario = Scenario.S1
    sigma: float = Field(1.3, ge=0)
    n_dmu: int = Field(100, ge=2)
    n_reps: int = Field(100, ge=1)
    seed: int = 20240601
    s2_fixed_u_scale: Optional[float] = Field(
        None, gt=0, description="Fix the Scenario 2 output inefficiency scale instead of sweeping sigma"
    )

class RmseCell(BaseModel):
    estimator: str
    technology: Technology
    scenario: Scenario
    sigma: float
    tau: Optional[float] = None
    metric: str = Field(..., description="pro_rmse or exp_rmse")
    value: Optional[float] = None
    n_reps: int = 0
    complete: bool = True
    failures: List[str] = Field(default_factory=list)

class RmseReport(BaseModel):
    cells: List[RmseCell] = Field(default_factory=list)

    @property
    def incomplete(self) -> List[RmseCell]:
        return [cell for cell in self.cells if not cell.complete]

    def get(self, estimator: str, technology: Technology, scenario: Scenario,
            sigma: float, tau: Optional[float] = None) -> Optional[RmseCell]:
        for cell in self.cells:
            if (cell.estimator == estimator and cell.technology == technology
                    and cell.scenario == scenario and abs(cell.sigma - sigma) < 1e-12
                    and ((tau is None and cell.tau is None)
                         or (tau is not None and cell.tau is not None and abs(cell.tau - tau) < 1e-12))):
                return cell
        return None

class ColumnSchema(BaseModel):
    columns: Dict[str, ColumnRole] = Field(..., description="CSV header -> role")
    price_fallbacks: Dict[str, float] = Field(default_factory=dict, description="Fallback for empty p / w cells")
    u_source: EmissionFactorSource = EmissionFactorSource.RATIO
    u_constant: Optional[List[float]] = None
    recuperation: float = Field(0.0, ge=0)
    unit_aggregation: str = Field("sum", pattern=r"^(sum|max)$")
    units: Dict[str, str] = Field(default_factory=dict)

    def headers_for(self, role: ColumnRole) -> List[str]:
        return [header for header, r in self.columns.items() if r == role]

    @model_validator(mode="after")
    def check_roles(self):
        if len(self.headers_for(ColumnRole.DMU_ID)) > 1:
            raise ValueError("schema declares more than one dmu_id column")
        for role in (ColumnRole.X_P, ColumnRole.Y, ColumnRole.B):
            if not self.headers_for(role):
                raise ValueError(f"schema declares no {role.value} column")
        for key, value in self.price_fallbacks.items():
            if key not in ("p", "w"):
                raise ValueError(f"unknown price fallback '{key}'")
            if value <= 0:
                raise ValueError(f"price fallback for '{key}' must be positive")
        return self

class RunCommand(str, Enum):
    ESTIMATE = "estimate"
    SIMULATE = "simulate"
    DIRECTION = "direction"
    SUMMARY = "summary"

class RunConfig(BaseModel):
    command: RunCommand
    technology: Technology = Technology.BP
    technologies: List[Technology] = Field(default_factory=lambda: [Technology.BP, Technology.JD, Technology.WGD])
    estimator: Estimator = Estimator.CER
    estimators: List[Estimator] = Field(default_factory=lambda: [Estimator.CNLS, Estimator.CER])
    taus: List[float] = Field(default_factory=lambda: [0.05, 0.20, 0.35, 0.50, 0.65, 0.80, 0.95])
    input_path: Optional[Path] = None
    schema_path: Optional[Path] = None
    out_dir: Path = Path("out")
    seed: int = 20240601
    tol: float = Field(1e-6, gt=0)
    price_fallbacks: Dict[str, float] = Field(default_factory=dict)
    u_source: Optional[EmissionFactorSource] = None
    weights: Weights = Field(default_factory=Weights)
    use_normalized_data: bool = False
    scenario: Scenario = Scenario.S1
    sigmas: List[float] = Field(default_factory=lambda: [0.3, 0.8, 1.3])
    n_dmu: int = Field(100, ge=2)
    n_reps: int = Field(100, ge=1)
    s2_fixed_u_scale: Optional[float] = None
    oracle: bool = False

    @field_validator("taus")
    @classmethod
    def check_taus(cls, v):
        return DataValidator.validate_taus(v) if v else v

    @field_validator("sigmas")
    @classmethod
    def check_sigmas(cls, v):
        if not v:
            raise ValueError("sigma list cannot be empty")
        if any(s < 0 for s in v):
            raise ValueError(f"inefficiency scales must be non-negative, got {v}")
        return v

    @model_validator(mode="after")
    def check_command(self):
        if (self.estimator == Estimator.CER or Estimator.CER in self.estimators) and not self.taus:
            raise ValueError("the cer estimator requires a nonempty quantile list")
        if self.command == RunCommand.ESTIMATE and self.input_path is None:
            raise ValueError("estimate requires an input path")
        if self.command in (RunCommand.DIRECTION, RunCommand.SUMMARY) and self.input_path is None:
            raise ValueError(f"{self.command.value} requires an input path")
        return self

class RunManifest(BaseModel):
    command: RunCommand
    package_version: str
    config: Dict
    seed: int
    solver: str
    tolerances: Dict[str, float]
    data_sha256: Optional[str] = None
    n_records: int = 0
    floored_gamma: int = 0
    floored_eta: int = 0
    quantile_crossings: int = 0
    incomplete: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)

class ErrorResponse(BaseModel):
    error: bool = True
    message: str
    exit_code: int
