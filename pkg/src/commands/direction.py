import json

from src.commands.base import EXIT_OK, build_manifest
from src.models.schemas import RunConfig
from src.services.csv_export import CSVExportService
from src.services.direction import direction_for
from src.services.pipeline import EstimationService, file_sha256

def cmd_direction(cfg: RunConfig) -> int:
    """Print the selected direction vector as JSON"""
    d, _, _ = EstimationService(cfg).load()
    g = direction_for(d, cfg.technology)
    payload = {"technology": cfg.technology.value, **g.as_dict()}
    print(json.dumps(payload, sort_keys=True))

    exporter = CSVExportService(cfg.out_dir)
    exporter.write_json("direction.json", payload)
    exporter.write_manifest(build_manifest(cfg, data_sha256=file_sha256(cfg.input_path), n_records=d.n_dmu))
    return EXIT_OK
