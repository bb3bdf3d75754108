import logging

from src.commands.base import EXIT_INCOMPLETE, EXIT_OK, build_manifest
from src.models.schemas import RunConfig
from src.services.csv_export import CSVExportService
from src.services.pipeline import EstimationService

logger = logging.getLogger(__name__)

def cmd_estimate(cfg: RunConfig) -> int:
    """
    Estimate shadow prices for every DMU in the input file

    Writes:
    - shadow_prices.csv, one record per DMU
    - mac_report.json with means, medians, strategy shares and the extreme DMUs
    - fits.csv with the fitted hyperplane of every DMU per quantile
    - manifest.json
    """
    result = EstimationService(cfg).run()

    priced = {r.dmu_id for r in result.records}
    missing = [dmu_id for dmu_id in result.dataset.dmu_ids if dmu_id not in priced]

    exporter = CSVExportService(cfg.out_dir)
    exporter.write_records(result.records)
    exporter.write_report(result.report, result.extremes)
    exporter.write_fits(result.fits, result.dataset)
    exporter.write_manifest(build_manifest(
        cfg,
        data_sha256=result.data_sha256,
        n_records=len(result.records),
        floored_gamma=result.floored_gamma,
        floored_eta=result.floored_eta,
        quantile_crossings=result.quantile_crossings,
        incomplete=[f"dmu {dmu_id}" for dmu_id in missing],
    ))

    if result.floored_gamma:
        logger.warning(f"{result.floored_gamma} record(s) used the gamma floor")
    if missing:
        logger.error(f"{len(missing)} DMU(s) without a shadow price record")
        return EXIT_INCOMPLETE
    return EXIT_OK
