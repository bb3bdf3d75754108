from typing import Annotated, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from src.models.schemas import DirectionRule, Estimator, Scenario, Technology

def _frozen_array(value, ndim: int) -> np.ndarray:
    arr = np.array(value, dtype=float, copy=True)
    if arr.ndim == ndim - 1 and ndim == 2:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr

Matrix = Annotated[np.ndarray, BeforeValidator(lambda v: _frozen_array(v, 2))]
Vector = Annotated[np.ndarray, BeforeValidator(lambda v: _frozen_array(v, 1))]

class ArrayModel(BaseModel):
    """Immutable container over read-only numpy arrays"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

class Dataset(ArrayModel):
    dmu_ids: List[str]
    x_n: Matrix = Field(..., description="Non-emission inputs [I x M1]")
    x_p: Matrix = Field(..., description="Emission-generating inputs [I x M2]")
    y: Matrix = Field(..., description="Desirable outputs [I x J]")
    b: Matrix = Field(..., description="Undesirable outputs [I x K]")
    x_n_names: List[str] = Field(default_factory=list)
    x_p_names: List[str] = Field(default_factory=list)
    y_names: List[str] = Field(default_factory=list)
    b_names: List[str] = Field(default_factory=list)
    units: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_shapes(self):
        n = len(self.dmu_ids)
        blocks = {"x_n": self.x_n, "x_p": self.x_p, "y": self.y, "b": self.b}
        for name, block in blocks.items():
            if block.shape[0] != n and not (name == "x_n" and block.size == 0):
                raise ValueError(f"{name} has {block.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(block)):
                raise ValueError(f"{name} contains non-finite entries")
            if np.any(block < 0):
                raise ValueError(f"{name} contains negative entries")
        if self.x_n.size == 0 and self.x_n.shape[0] != n:
            object.__setattr__(self, "x_n", _frozen_array(np.zeros((n, 0)), 2))
        for name, block in blocks.items():
            if name != "x_n" and block.shape[1] == 0:
                raise ValueError(f"{name} needs at least one column")
        defaults = {
            "x_n_names": ("xN", self.x_n.shape[1]),
            "x_p_names": ("xP", self.x_p.shape[1]),
            "y_names": ("y", self.y.shape[1]),
            "b_names": ("b", self.b.shape[1]),
        }
        for field, (prefix, width) in defaults.items():
            names = getattr(self, field)
            if not names:
                object.__setattr__(self, field, [f"{prefix}{c + 1}" for c in range(width)])
            elif len(names) != width:
                raise ValueError(f"{field} has {len(names)} names for {width} columns")
        return self

    @property
    def n_dmu(self) -> int:
        return len(self.dmu_ids)

    @property
    def dims(self) -> Dict[str, int]:
        return {
            "I": self.n_dmu,
            "M1": self.x_n.shape[1],
            "M2": self.x_p.shape[1],
            "J": self.y.shape[1],
            "K": self.b.shape[1],
        }

    def take(self, order) -> "Dataset":
        """Rows in the given order (permutation or subset)"""
        order = np.asarray(order, dtype=int)
        return self.model_copy(update={
            "dmu_ids": [self.dmu_ids[i] for i in order],
            "x_n": _frozen_array(self.x_n[order], 2),
            "x_p": _frozen_array(self.x_p[order], 2),
            "y": _frozen_array(self.y[order], 2),
            "b": _frozen_array(self.b[order], 2),
        })

class Prices(ArrayModel):
    p: Matrix = Field(..., description="Desirable-output prices per DMU [I x J]")
    w: Matrix = Field(..., description="Emission-generating input prices per DMU [I x M2]")

    @field_validator("p", "w")
    @classmethod
    def check_positive(cls, v):
        if v.size and (not np.all(np.isfinite(v)) or np.any(v <= 0)):
            raise ValueError("prices must be strictly positive")
        return v

    @classmethod
    def uniform(cls, p: List[float], w: List[float], n_dmu: int) -> "Prices":
        return cls(p=np.tile(np.asarray(p, dtype=float), (n_dmu, 1)),
                   w=np.tile(np.asarray(w, dtype=float), (n_dmu, 1)))

class EmissionFactors(ArrayModel):
    u: Vector = Field(..., description="Emission factor per emission-generating input [M2]")
    r: float = Field(0.0, ge=0, description="Recuperation factor of desirable outputs")

    @field_validator("u")
    @classmethod
    def check_nonnegative(cls, v):
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("emission factors must be finite and non-negative")
        return v

class NormalizedDataset(ArrayModel):
    dmu_ids: List[str]
    x_p: Matrix
    y: Matrix
    b: Matrix
    mins: Dict[str, List[float]] = Field(default_factory=dict)
    maxs: Dict[str, List[float]] = Field(default_factory=dict)
    x_p_names: List[str] = Field(default_factory=list)
    y_names: List[str] = Field(default_factory=list)
    b_names: List[str] = Field(default_factory=list)

    @property
    def n_dmu(self) -> int:
        return len(self.dmu_ids)

    def to_dataset(self, x_n: np.ndarray) -> Dataset:
        """Reattach raw non-emission inputs to build an estimable dataset"""
        return Dataset(
            dmu_ids=self.dmu_ids, x_n=x_n, x_p=self.x_p, y=self.y, b=self.b,
            x_p_names=self.x_p_names, y_names=self.y_names, b_names=self.b_names,
        )

class DirectionVector(ArrayModel):
    g_x: Vector
    g_y: Vector
    g_b: Vector
    rule: DirectionRule = DirectionRule.MEDIAN

    @model_validator(mode="after")
    def check_components(self):
        parts = np.concatenate([self.g_x, self.g_y, self.g_b])
        if not np.all(np.isfinite(parts)) or np.any(parts < 0):
            raise ValueError("direction components must be finite and non-negative")
        if not np.any(parts > 0):
            raise ValueError("direction vector cannot be all zero")
        return self

    @classmethod
    def fixed_slack(cls, m2: int, j: int, k: int) -> "DirectionVector":
        return cls(g_x=np.ones(m2), g_y=np.ones(j), g_b=np.ones(k), rule=DirectionRule.FIXED_SLACK)

    def as_dict(self) -> Dict[str, List[float]]:
        return {
            "g_x": self.g_x.tolist(),
            "g_b": self.g_b.tolist(),
            "g_y": self.g_y.tolist(),
            "rule": self.rule.value,
        }

class FrontierFit(ArrayModel):
    technology: Technology
    estimator: Estimator
    tau: Optional[float] = None
    dmu_ids: List[str]
    alpha: Vector
    alpha_bar: Optional[Vector] = None
    beta: Matrix
    eta: Matrix
    eta_bar: Optional[Matrix] = None
    omega: Matrix
    gamma: Matrix
    eps: Optional[Vector] = None
    eps_plus: Optional[Vector] = None
    eps_minus: Optional[Vector] = None
    eps_economic: Optional[Vector] = None
    eps_environmental: Optional[Vector] = None
    direction: Optional[DirectionVector] = None
    objective_value: float = 0.0

    @model_validator(mode="after")
    def check_residuals(self):
        if self.estimator == Estimator.CNLS and self.eps is None:
            raise ValueError("CNLS fit requires eps")
        if self.estimator == Estimator.CER and (self.eps_plus is None or self.eps_minus is None):
            raise ValueError("CER fit requires eps_plus and eps_minus")
        if self.technology == Technology.BP and (self.alpha_bar is None or self.eta_bar is None):
            raise ValueError("BP fit requires alpha_bar and eta_bar")
        return self

    @property
    def n_dmu(self) -> int:
        return len(self.dmu_ids)

    @property
    def residual(self) -> np.ndarray:
        if self.eps is not None:
            return self.eps
        return self.eps_plus - self.eps_minus

class DeaScore(ArrayModel):
    technology: Technology
    dmu_index: int
    dmu_id: str
    theta: float = 0.0
    theta_m: float = 0.0
    theta_j: float = 0.0
    theta_k: float = 0.0
    lam: Vector
    mu: Optional[Vector] = None
    objective_value: float = 0.0

class SimulatedSample(ArrayModel):
    scenario: Scenario
    sigma: float
    u_scale: float
    rep: int
    dataset: Dataset
    true_f: Vector
    u_y: Vector = Field(..., description="Output inefficiency draws")
    u_b: Vector = Field(..., description="Emission inefficiency draws")
    resampled: int = 0

class TrueQuantile(ArrayModel):
    tau: float
    factor: float
    values: Vector
