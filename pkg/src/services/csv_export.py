import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pandas as pd

from src.models.data import Dataset, FrontierFit
from src.models.schemas import ExtremeDmu, MacReport, RmseReport, RunManifest, ShadowPriceRecord
from src.services.montecarlo import to_table_rows, to_tidy_rows
from src.services.technologies import fit_to_frame

logger = logging.getLogger(__name__)

RECORD_HEADERS = ["dmu_id", "bracket", "mrt", "mp", "pmrt", "wmp", "mac", "strategy"]

def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)

def _matrix_cell(matrix: List[List[float]]) -> str:
    if len(matrix) == 1 and len(matrix[0]) == 1:
        return _fmt(matrix[0][0])
    return json.dumps([[float(f"{v:.12g}") for v in row] for row in matrix])

class CSVExportService:
    """Deterministic writers for run outputs; nothing time-dependent is written"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.written: List[str] = []

    def _path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written.append(name)
        return self.out_dir / name

    def _write_rows(self, name: str, headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(headers)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        logger.info(f"Wrote {path}")
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        path = self._path(name)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path

    def write_records(self, records: Sequence[ShadowPriceRecord], name: str = "shadow_prices.csv") -> Path:
        """One row per DMU"""
        return self._write_rows(name, RECORD_HEADERS, (
            [r.dmu_id, r.bracket.label, _matrix_cell(r.mrt), _matrix_cell(r.mp), r.pmrt, r.wmp, r.mac,
             r.strategy.value]
            for r in records
        ))

    def write_report(self, report: MacReport, extremes: Sequence[ExtremeDmu],
                     name: str = "mac_report.json") -> Path:
        payload = report.model_dump(mode="json")
        payload["extremes"] = [e.model_dump(mode="json") for e in extremes]
        return self.write_json(name, payload)

    def write_fits(self, fits: Sequence[FrontierFit], d: Optional[Dataset] = None,
                   name: str = "fits.csv") -> Path:
        frame = pd.concat([fit_to_frame(fit, d) for fit in fits], ignore_index=True)
        path = self._path(name)
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.12g")
        logger.info(f"Wrote {path}")
        return path

    def write_frame(self, frame: pd.DataFrame, name: str, index: bool = True) -> Path:
        path = self._path(name)
        frame.to_csv(path, index=index, lineterminator="\n", float_format="%.12g")
        logger.info(f"Wrote {path}")
        return path

    def write_rmse(self, report: RmseReport, prefix: str = "rmse") -> List[Path]:
        """Sigma-column table, tidy long format and JSON"""
        table = to_table_rows(report)
        sigma_columns = sorted({k for row in table for k in row if k.startswith("sigma=")},
                               key=lambda k: float(k.split("=", 1)[1]))
        headers = ["scenario", "technology", "estimator", "tau", "metric"] + sigma_columns
        paths = [self._write_rows(f"{prefix}_table.csv", headers, ([row.get(h) for h in headers] for row in table))]

        tidy = to_tidy_rows(report)
        tidy_headers = ["scenario", "technology", "estimator", "tau", "sigma", "metric", "value", "n_reps", "complete"]
        paths.append(self._write_rows(f"{prefix}_tidy.csv", tidy_headers, ([row[h] for h in tidy_headers] for row in tidy)))
        paths.append(self.write_json(f"{prefix}.json", report.model_dump(mode="json")))
        return paths

    def write_manifest(self, manifest: RunManifest, name: str = "manifest.json") -> Path:
        # lists every file written before it, itself included
        payload: Dict[str, Any] = manifest.model_dump(mode="json")
        payload["outputs"] = self.written + [name]
        return self.write_json(name, payload)
