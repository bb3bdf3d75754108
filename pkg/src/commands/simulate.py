import logging

from src.commands.base import EXIT_INCOMPLETE, EXIT_OK, build_manifest
from src.models.schemas import DgpConfig, RunConfig
from src.services.csv_export import CSVExportService
from src.services.montecarlo import run_experiment

logger = logging.getLogger(__name__)

def cmd_simulate(cfg: RunConfig) -> int:
    configs = [
        DgpConfig(
            scenario=cfg.scenario,
            sigma=sigma,
            n_dmu=cfg.n_dmu,
            n_reps=cfg.n_reps,
            seed=cfg.seed,
            s2_fixed_u_scale=cfg.s2_fixed_u_scale,
        )
        for sigma in cfg.sigmas
    ]
    report = run_experiment(configs, cfg.technologies, cfg.estimators, cfg.taus, oracle=cfg.oracle)

    incomplete = [
        f"{c.scenario.value}/{c.technology.value}/{c.estimator}/sigma={c.sigma:g}"
        + (f"/tau={c.tau:g}" if c.tau is not None else "")
        for c in report.incomplete
    ]
    exporter = CSVExportService(cfg.out_dir)
    exporter.write_rmse(report)
    exporter.write_manifest(build_manifest(cfg, n_records=len(report.cells), incomplete=incomplete))

    for item in incomplete:
        logger.error(f"Incomplete cell: {item}")
    return EXIT_INCOMPLETE if incomplete else EXIT_OK
