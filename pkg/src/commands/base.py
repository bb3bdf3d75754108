import logging
from typing import List, Optional

from src.config import get_settings
from src.models.schemas import RunConfig, RunManifest

settings = get_settings()
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_INVALID = 2

def build_manifest(cfg: RunConfig, data_sha256: Optional[str] = None, n_records: int = 0,
                   floored_gamma: int = 0, floored_eta: int = 0, quantile_crossings: int = 0,
                   incomplete: Optional[List[str]] = None) -> RunManifest:
    """Everything needed to reproduce the run"""
    return RunManifest(
        command=cfg.command,
        package_version=settings.VERSION,
        config=cfg.model_dump(mode="json"),
        seed=cfg.seed,
        solver=settings.QP_SOLVER,
        tolerances={
            "feasibility": cfg.tol,
            "objective_rel": settings.OBJECTIVE_REL_TOL,
            "coefficient_bound": settings.COEFFICIENT_BOUND,
            "price_floor": settings.PRICE_FLOOR,
            "direction_floor": settings.DIRECTION_FLOOR,
        },
        data_sha256=data_sha256,
        n_records=n_records,
        floored_gamma=floored_gamma,
        floored_eta=floored_eta,
        quantile_crossings=quantile_crossings,
        incomplete=incomplete or [],
    )
