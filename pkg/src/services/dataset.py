import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.models.data import Dataset, EmissionFactors, NormalizedDataset, Prices
from src.models.schemas import ColumnRole, ColumnSchema, EmissionFactorSource

logger = logging.getLogger(__name__)

NUMERIC_ROLES = (ColumnRole.X_N, ColumnRole.X_P, ColumnRole.Y, ColumnRole.B, ColumnRole.P, ColumnRole.W, ColumnRole.U)
QUANTITY_ROLES = (ColumnRole.X_N, ColumnRole.X_P, ColumnRole.Y, ColumnRole.B)

class DatasetError(Exception):
    """Base class for data ingestion and validation errors"""
    pass

class MissingColumn(DatasetError):
    """Raised when a column required by the schema is absent from the file"""

    def __init__(self, column: str):
        self.column = column
        super().__init__(f"Column '{column}' is required but missing from the input")

class NonNumericCell(DatasetError):
    """Raised when a numeric cell cannot be parsed"""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"Non-numeric value {value!r} in column '{column}' at data row {row}")

class NegativeValue(DatasetError):
    """Raised when a quantity or price is negative"""

    def __init__(self, row: int, column: str, value: float):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"Negative value {value} in column '{column}' at data row {row}")

class EmptyDataset(DatasetError):
    """Raised when the input has no data rows"""
    pass

class ConstantColumn(DatasetError):
    """Raised when min-max normalization meets a column with zero range"""

    def __init__(self, column: str):
        self.column = column
        super().__init__(f"Column '{column}' is constant and cannot be normalized")

def load_schema(path: Union[str, Path]) -> ColumnSchema:
    return ColumnSchema.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))

def infer_schema(path: Union[str, Path]) -> ColumnSchema:
    """Schema for files whose headers are role names, optionally suffixed (xP, xP2, b_co2, ...)"""
    try:
        headers = [c.strip() for c in pd.read_csv(path, nrows=0, encoding="utf-8").columns]
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} is empty")

    # longest prefix first so "xN" is not read as a desirable-output column
    roles = sorted(ColumnRole, key=lambda r: len(r.value), reverse=True)
    columns: Dict[str, ColumnRole] = {}
    for header in headers:
        for role in roles:
            if header == role.value or (role != ColumnRole.DMU_ID and header.startswith(role.value)
                                        and not header[len(role.value)].isalpha()):
                columns[header] = role
                break
    logger.info(f"Inferred column roles for {path}: {', '.join(f'{h}={r.value}' for h, r in columns.items())}")
    return ColumnSchema(columns=columns)

def _parse_numeric(frame: pd.DataFrame, header: str, role: ColumnRole, fallback: Optional[float]) -> pd.Series:
    raw = frame[header].astype(str).str.strip()
    empty = raw == ""
    values = pd.to_numeric(raw.where(~empty), errors="coerce")

    if empty.any():
        if fallback is None:
            row = int(np.flatnonzero(empty.to_numpy())[0])
            raise NonNumericCell(row + 1, header, "")
        logger.info(f"Filling {int(empty.sum())} empty '{header}' cell(s) with fallback {fallback:g}")
        values = values.where(~empty, fallback)

    bad = (values.isna() | ~np.isfinite(values.fillna(0.0))) & ~empty
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonNumericCell(row + 1, header, raw.iloc[row])

    negative = values < 0
    if negative.any():
        row = int(np.flatnonzero(negative.to_numpy())[0])
        raise NegativeValue(row + 1, header, float(values.iloc[row]))

    if role in (ColumnRole.P, ColumnRole.W) and (values == 0).any():
        row = int(np.flatnonzero((values == 0).to_numpy())[0])
        raise DatasetError(f"Price column '{header}' has a zero entry at data row {row + 1}")

    return values.astype(float)

def aggregate_units(frame: pd.DataFrame, schema: ColumnSchema, id_column: str) -> pd.DataFrame:
    """Collapse unit-level rows that share a DMU identifier into one plant row"""
    if not frame[id_column].duplicated().any():
        return frame

    agg: Dict[str, str] = {}
    for header, role in schema.columns.items():
        if header == id_column or header not in frame.columns:
            continue
        if role == ColumnRole.X_N:
            agg[header] = schema.unit_aggregation
        elif role in (ColumnRole.X_P, ColumnRole.Y, ColumnRole.B):
            agg[header] = "sum"
        else:
            agg[header] = "mean"

    before = len(frame)
    grouped = frame.groupby(id_column, sort=False, as_index=False).agg(agg)
    logger.info(f"Aggregated {before} unit rows into {len(grouped)} DMUs ({schema.unit_aggregation} for non-emission inputs)")
    return grouped[[c for c in frame.columns if c in grouped.columns]]

def _emission_factors(frame: pd.DataFrame, schema: ColumnSchema, d: Dataset,
                      source: EmissionFactorSource) -> EmissionFactors:
    u_headers = schema.headers_for(ColumnRole.U)
    m2 = d.x_p.shape[1]

    if u_headers:
        if len(u_headers) != m2:
            raise DatasetError(f"Schema declares {len(u_headers)} u column(s) for {m2} emission-generating input(s)")
        u = frame[u_headers].to_numpy(dtype=float).mean(axis=0)
    elif source == EmissionFactorSource.COLUMN:
        raise MissingColumn("u")
    elif source == EmissionFactorSource.CONSTANT:
        if not schema.u_constant or len(schema.u_constant) != m2:
            raise DatasetError(f"Constant emission factors need {m2} value(s)")
        u = np.asarray(schema.u_constant, dtype=float)
    else:
        totals = d.x_p.sum(axis=0)
        if np.any(totals <= 0):
            raise DatasetError("Cannot derive emission factors from an all-zero emission-generating input")
        u = d.b[:, 0].sum() / totals

    return EmissionFactors(u=u, r=schema.recuperation)

def load_csv(path: Union[str, Path], schema: ColumnSchema,
             price_fallbacks: Optional[Dict[str, float]] = None,
             u_source: Optional[EmissionFactorSource] = None) -> Tuple[Dataset, Prices, EmissionFactors]:
    """Read a plant CSV through a column-role schema"""
    fallbacks = {**schema.price_fallbacks, **(price_fallbacks or {})}
    source = u_source or schema.u_source

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} is empty")
    frame.columns = [c.strip() for c in frame.columns]
    if frame.empty:
        raise EmptyDataset(f"{path} has no data rows")

    for header in schema.columns:
        if header not in frame.columns:
            raise MissingColumn(header)

    id_headers = schema.headers_for(ColumnRole.DMU_ID)
    id_column = id_headers[0] if id_headers else "__dmu_id__"
    numeric = pd.DataFrame({id_column: frame[id_headers[0]].str.strip() if id_headers
                            else [str(i + 1) for i in range(len(frame))]})

    for header, role in schema.columns.items():
        if role in NUMERIC_ROLES:
            fallback = fallbacks.get(role.value) if role in (ColumnRole.P, ColumnRole.W) else None
            numeric[header] = _parse_numeric(frame, header, role, fallback)

    numeric = aggregate_units(numeric, schema, id_column)

    def block(role: ColumnRole) -> np.ndarray:
        headers = schema.headers_for(role)
        return numeric[headers].to_numpy(dtype=float) if headers else np.zeros((len(numeric), 0))

    d = Dataset(
        dmu_ids=numeric[id_column].tolist(),
        x_n=block(ColumnRole.X_N),
        x_p=block(ColumnRole.X_P),
        y=block(ColumnRole.Y),
        b=block(ColumnRole.B),
        x_n_names=schema.headers_for(ColumnRole.X_N),
        x_p_names=schema.headers_for(ColumnRole.X_P),
        y_names=schema.headers_for(ColumnRole.Y),
        b_names=schema.headers_for(ColumnRole.B),
        units=schema.units,
    )

    def price_block(role: ColumnRole, width: int) -> np.ndarray:
        headers = schema.headers_for(role)
        if headers:
            if len(headers) != width:
                raise DatasetError(f"Schema declares {len(headers)} {role.value} column(s), expected {width}")
            return block(role)
        if role.value in fallbacks:
            return np.full((d.n_dmu, width), fallbacks[role.value])
        raise MissingColumn(role.value)

    prices = Prices(p=price_block(ColumnRole.P, d.y.shape[1]), w=price_block(ColumnRole.W, d.x_p.shape[1]))
    factors = _emission_factors(numeric, schema, d, source)

    logger.info(f"Loaded {d.n_dmu} DMUs from {path} with dimensions {d.dims}")
    return d, prices, factors

def write_csv(d: Dataset, prices: Prices, factors: EmissionFactors, path: Union[str, Path],
              schema: ColumnSchema) -> Path:
    """Write data back in the schema's column layout"""
    blocks = {
        ColumnRole.X_N: d.x_n, ColumnRole.X_P: d.x_p, ColumnRole.Y: d.y, ColumnRole.B: d.b,
        ColumnRole.P: prices.p, ColumnRole.W: prices.w,
    }
    position: Dict[ColumnRole, int] = {}
    columns: Dict[str, List] = {}
    for header, role in schema.columns.items():
        offset = position.get(role, 0)
        position[role] = offset + 1
        if role == ColumnRole.DMU_ID:
            columns[header] = list(d.dmu_ids)
        elif role == ColumnRole.U:
            columns[header] = [factors.u[offset]] * d.n_dmu
        else:
            columns[header] = blocks[role][:, offset]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns).to_csv(path, index=False, lineterminator="\n")
    return path

def normalize(d: Union[Dataset, NormalizedDataset]) -> NormalizedDataset:
    """Min-max map of the emission-generating inputs and both outputs onto [0, 1]"""
    if d.n_dmu == 0:
        raise EmptyDataset("cannot normalize an empty dataset")

    scaled, mins, maxs = {}, {}, {}
    for block, names in (("x_p", d.x_p_names), ("y", d.y_names), ("b", d.b_names)):
        values = getattr(d, block)
        lo, hi = values.min(axis=0), values.max(axis=0)
        for c in np.flatnonzero(hi == lo):
            raise ConstantColumn(names[c])
        scaled[block] = (values - lo) / (hi - lo)
        mins[block], maxs[block] = lo.tolist(), hi.tolist()

    return NormalizedDataset(
        dmu_ids=list(d.dmu_ids),
        x_p=scaled["x_p"],
        y=scaled["y"],
        b=scaled["b"],
        mins=mins,
        maxs=maxs,
        x_p_names=list(d.x_p_names),
        y_names=list(d.y_names),
        b_names=list(d.b_names),
    )

def summary_stats(d: Dataset, prices: Optional[Prices] = None) -> pd.DataFrame:
    """Mean, sample standard deviation, min and max per column"""
    if d.n_dmu == 0:
        raise EmptyDataset("no rows to summarize")

    columns = {}
    for names, block in ((d.y_names, d.y), (d.b_names, d.b), (d.x_p_names, d.x_p), (d.x_n_names, d.x_n)):
        for c, name in enumerate(names):
            columns[name] = block[:, c]
    if prices is not None:
        for c in range(prices.p.shape[1]):
            columns[f"p_{d.y_names[c]}"] = prices.p[:, c]
        for c in range(prices.w.shape[1]):
            columns[f"w_{d.x_p_names[c]}"] = prices.w[:, c]

    frame = pd.DataFrame(columns)
    stats = pd.DataFrame({
        "unit": [d.units.get(name, "") for name in frame.columns],
        "mean": frame.mean(),
        "std": frame.std(ddof=1).fillna(0.0) if d.n_dmu > 1 else 0.0,
        "min": frame.min(),
        "max": frame.max(),
    })
    stats.index.name = "variable"
    return stats
