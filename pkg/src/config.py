from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import List
from functools import lru_cache

class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )

    APP_NAME: str = "emission-frontier"
    VERSION: str = "0.1.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False
    DEBUG: bool = False

    # Solver
    QP_SOLVER: str = "clarabel"
    SOLVER_VERBOSE: bool = False
    FEASIBILITY_TOL: float = 1e-6
    OBJECTIVE_REL_TOL: float = 1e-8
    COEFFICIENT_BOUND: float = 1e4  # box on free coefficients, conditioned units

    # Estimation
    DEFAULT_TAUS: List[float] = [0.05, 0.20, 0.35, 0.50, 0.65, 0.80, 0.95]
    PRICE_FLOOR: float = 1e-3  # replaces zero gamma / eta before division
    DIRECTION_FLOOR: float = 1e-6
    USE_NORMALIZED_DATA: bool = False

    # Simulation
    DEFAULT_SEED: int = 20240601
    MAX_WORKERS: int = 1
    S2_EMISSION_FACTOR: float = 0.09404

@lru_cache()
def get_settings():
    return Settings()
