from src.commands.base import EXIT_OK, build_manifest
from src.models.schemas import RunConfig
from src.services.csv_export import CSVExportService
from src.services.pipeline import EstimationService, file_sha256, summarize

def cmd_summary(cfg: RunConfig) -> int:
    """Descriptive statistics of the input, printed and written to summary.csv"""
    service = EstimationService(cfg)
    stats = summarize(cfg, service)
    print(stats.to_string(float_format=lambda v: f"{v:.2f}"))

    exporter = CSVExportService(cfg.out_dir)
    exporter.write_frame(stats, "summary.csv")
    exporter.write_manifest(build_manifest(cfg, data_sha256=file_sha256(cfg.input_path), n_records=len(stats)))
    return EXIT_OK
