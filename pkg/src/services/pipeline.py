import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Tuple

from src.config import get_settings
from src.models.data import ArrayModel, Dataset, DirectionVector, EmissionFactors, FrontierFit, Prices
from src.models.schemas import (
    ColumnSchema,
    Estimator,
    ExtremeDmu,
    MacReport,
    QuantileGrid,
    RunConfig,
    ShadowPriceRecord,
)
from src.services.dataset import infer_schema, load_csv, load_schema, normalize, summary_stats
from src.services.direction import direction_for
from src.services.shadow_pricing import (
    extremes,
    full_frontier_shadow_prices,
    quantile_shadow_price_table,
    report,
)
from src.services.technologies import fit_cnls, fit_quantile_grid

settings = get_settings()
logger = logging.getLogger(__name__)

def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()

class EstimationResult(ArrayModel):
    dataset: Dataset
    prices: Prices
    factors: EmissionFactors
    direction: DirectionVector
    fits: List[FrontierFit]
    records: List[ShadowPriceRecord]
    report: MacReport
    extremes: List[ExtremeDmu]
    quantile_crossings: int = 0
    data_sha256: str

    @property
    def floored_gamma(self) -> int:
        return sum(1 for r in self.records if r.floored_gamma)

    @property
    def floored_eta(self) -> int:
        return sum(1 for r in self.records if r.floored_eta)

class EstimationService:
    """Load data, pick a direction, fit the frontier(s) and price every DMU"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def schema(self) -> ColumnSchema:
        if self.cfg.schema_path is not None:
            return load_schema(self.cfg.schema_path)
        return infer_schema(self.cfg.input_path)

    def load(self) -> Tuple[Dataset, Prices, EmissionFactors]:
        return load_csv(self.cfg.input_path, self.schema(), self.cfg.price_fallbacks, self.cfg.u_source)

    def estimation_data(self, d: Dataset) -> Dataset:
        if not (self.cfg.use_normalized_data or settings.USE_NORMALIZED_DATA):
            return d
        logger.info("Estimating on min-max normalized outputs and emission-generating inputs")
        return normalize(d).to_dataset(d.x_n)

    def run(self) -> EstimationResult:
        cfg = self.cfg
        d, prices, factors = self.load()
        work = self.estimation_data(d)
        g = direction_for(d, cfg.technology)

        crossings = 0
        if cfg.estimator == Estimator.CER:
            fits = fit_quantile_grid(work, cfg.technology, QuantileGrid(taus=tuple(cfg.taus)), g, factors,
                                     cfg.weights, cfg.tol)
            records, crossings = quantile_shadow_price_table(work, fits, prices)
        else:
            fits = [fit_cnls(work, cfg.technology, g, factors, cfg.weights, cfg.tol)]
            records = full_frontier_shadow_prices(fits[0], prices)

        summary = report(work, records, cfg.technology, cfg.estimator)
        logger.info(
            f"{cfg.technology.value} {cfg.estimator.value}: mean MAC {summary.mean['mac']:.4g}, "
            f"median MAC {summary.median['mac']:.4g}, {summary.input_reduction_percent:.1f}% prefer input reduction"
        )
        return EstimationResult(
            dataset=d,
            prices=prices,
            factors=factors,
            direction=g,
            fits=fits,
            records=records,
            report=summary,
            extremes=extremes(d, records),
            quantile_crossings=crossings,
            data_sha256=file_sha256(Path(cfg.input_path)),
        )

def summarize(cfg: RunConfig, service: Optional[EstimationService] = None):
    """Descriptive table of the input data"""
    service = service or EstimationService(cfg)
    d, prices, _ = service.load()
    return summary_stats(d, prices)
