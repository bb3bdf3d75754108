import logging
import warnings
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config import get_settings
from src.models.data import Dataset, FrontierFit, Prices
from src.models.schemas import (
    BracketKind,
    Estimator,
    ExtremeDmu,
    MacReport,
    QuantileBracket,
    ShadowPriceRecord,
    Strategy,
    Technology,
)
from src.services.technologies import frontier_output

settings = get_settings()
logger = logging.getLogger(__name__)

class NonMonotoneFits(UserWarning):
    """Fitted quantile frontiers cross at a DMU"""
    pass

def _ratio(numerator: np.ndarray, denominator: np.ndarray, what: str, fit: FrontierFit, dmu: int) -> Tuple[np.ndarray, bool]:
    floor = settings.PRICE_FLOOR
    numerator = np.asarray(numerator, dtype=float)
    if np.any(numerator < 0):
        logger.warning(
            f"{fit.technology.value} fit at {fit.dmu_ids[dmu]}: negative omega {numerator.round(6).tolist()} "
            f"treated as zero in {what}"
        )
        numerator = np.maximum(numerator, 0.0)
    floored = bool(np.any(denominator < floor))
    return numerator[:, None] / np.maximum(denominator, floor)[None, :], floored

def _mrt(fit: FrontierFit, dmu: int) -> Tuple[np.ndarray, bool]:
    return _ratio(fit.omega[dmu], fit.gamma[dmu], "MRT", fit, dmu)

def _mp(fit: FrontierFit, dmu: int) -> Tuple[np.ndarray, bool]:
    return _ratio(fit.omega[dmu], fit.eta[dmu], "MP", fit, dmu)

def compute_mrt(fit: FrontierFit, dmu: int) -> np.ndarray:
    """omega_k / gamma_j for the DMU's hyperplane, [K x J], gamma floored at PRICE_FLOOR"""
    return _mrt(fit, dmu)[0]

def compute_mp(fit: FrontierFit, dmu: int) -> np.ndarray:
    """omega_k / eta_m for the DMU's hyperplane, [K x M2], eta floored at PRICE_FLOOR"""
    return _mp(fit, dmu)[0]

def compute_mac(pmrt: float, wmp: float) -> Tuple[float, Strategy]:
    """Least-cost abatement; ties go to output reduction"""
    if pmrt <= wmp:
        return pmrt, Strategy.OUTPUT_REDUCTION
    return wmp, Strategy.INPUT_REDUCTION

def assign_bracket(observed: float, frontier_values: Sequence[float], taus: Sequence[float]) -> QuantileBracket:
    """Place an observed output among the fitted quantile frontier values at the same DMU"""
    values = np.asarray(frontier_values, dtype=float)
    if values.shape[0] != len(taus) or not len(taus):
        raise ValueError("need one fitted value per grid quantile")

    if np.any(np.diff(values) < -1e-9 * (1.0 + np.abs(values[:-1]))):
        warnings.warn(
            f"quantile frontiers cross: fitted values {values.round(6).tolist()} are not nondecreasing in tau",
            NonMonotoneFits,
            stacklevel=2,
        )

    on = np.flatnonzero(np.isclose(observed, values, rtol=1e-9, atol=1e-12))
    if on.size:
        return QuantileBracket(kind=BracketKind.ON, tau_lo=taus[on[0]])

    for t in range(len(taus) - 1):
        lo, hi = sorted((values[t], values[t + 1]))
        if lo <= observed <= hi:
            return QuantileBracket(kind=BracketKind.BETWEEN, tau_lo=taus[t], tau_hi=taus[t + 1])

    if observed > values[-1]:
        return QuantileBracket(kind=BracketKind.ABOVE_TOP, tau_lo=taus[-1])
    return QuantileBracket(kind=BracketKind.BELOW_BOTTOM, tau_lo=taus[0])

def is_crossing(frontier_values: Sequence[float]) -> bool:
    values = np.asarray(frontier_values, dtype=float)
    return bool(np.any(np.diff(values) < -1e-9 * (1.0 + np.abs(values[:-1]))))

def quantile_frontier_values(d: Dataset, fits: Sequence[FrontierFit]) -> np.ndarray:
    """Fitted first-output frontier per DMU (rows) and quantile (columns)"""
    return np.column_stack([frontier_output(fit, d.x_n, d.x_p, d.b, d.y) for fit in fits])

def _record(dmu_id: str, bracket: QuantileBracket, mrt: np.ndarray, mp: np.ndarray, prices: Prices,
            dmu: int, floored_gamma: bool, floored_eta: bool) -> ShadowPriceRecord:
    pmrt = float(prices.p[dmu, 0] * mrt[0, 0])
    wmp = float(np.min(prices.w[dmu] * mp[0]))
    mac, strategy = compute_mac(pmrt, wmp)
    return ShadowPriceRecord(
        dmu_id=dmu_id,
        bracket=bracket,
        mrt=mrt.tolist(),
        mp=mp.tolist(),
        pmrt=pmrt,
        wmp=wmp,
        mac=mac,
        strategy=strategy,
        floored_gamma=floored_gamma,
        floored_eta=floored_eta,
    )

def quantile_shadow_prices(d: Dataset, dmu: int, fits: Sequence[FrontierFit], prices: Prices,
                           frontier_values: Optional[Sequence[float]] = None) -> ShadowPriceRecord:
    """Shadow prices of one DMU from the quantile fits that bracket it"""
    taus = [fit.tau for fit in fits]
    if frontier_values is None:
        frontier_values = [
            frontier_output(fit, d.x_n[dmu:dmu + 1], d.x_p[dmu:dmu + 1], d.b[dmu:dmu + 1], d.y[dmu:dmu + 1])[0]
            for fit in fits
        ]
    bracket = assign_bracket(float(d.y[dmu, 0]), frontier_values, taus)

    if bracket.kind == BracketKind.BETWEEN:
        lo, hi = fits[taus.index(bracket.tau_lo)], fits[taus.index(bracket.tau_hi)]
        (mrt_lo, fg_lo), (mrt_hi, fg_hi) = _mrt(lo, dmu), _mrt(hi, dmu)
        (mp_lo, fe_lo), (mp_hi, fe_hi) = _mp(lo, dmu), _mp(hi, dmu)
        mrt, mp = 0.5 * (mrt_lo + mrt_hi), 0.5 * (mp_lo + mp_hi)
        floored_gamma, floored_eta = fg_lo or fg_hi, fe_lo or fe_hi
    else:
        fit = fits[taus.index(bracket.tau_lo)]
        mrt, floored_gamma = _mrt(fit, dmu)
        mp, floored_eta = _mp(fit, dmu)

    return _record(d.dmu_ids[dmu], bracket, mrt, mp, prices, dmu, floored_gamma, floored_eta)

def quantile_shadow_price_table(d: Dataset, fits: Sequence[FrontierFit],
                                prices: Prices) -> Tuple[List[ShadowPriceRecord], int]:
    """Records for every DMU plus the number of DMUs where the fitted quantiles cross"""
    values = quantile_frontier_values(d, fits)
    crossings = 0
    records = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonMonotoneFits)
        for i in range(d.n_dmu):
            records.append(quantile_shadow_prices(d, i, fits, prices, values[i]))
        crossings = sum(1 for w in caught if issubclass(w.category, NonMonotoneFits))
    if crossings:
        logger.warning(f"Quantile frontiers cross at {crossings} of {d.n_dmu} DMUs; first enclosing pair used")
    return records, crossings

def full_frontier_shadow_prices(fit: FrontierFit, prices: Prices) -> List[ShadowPriceRecord]:
    """Shadow prices from the single full-frontier fit"""
    bracket = QuantileBracket(kind=BracketKind.FULL)
    records = []
    for i, dmu_id in enumerate(fit.dmu_ids):
        mrt, floored_gamma = _mrt(fit, i)
        mp, floored_eta = _mp(fit, i)
        records.append(_record(dmu_id, bracket, mrt, mp, prices, i, floored_gamma, floored_eta))
    n_floored = sum(r.floored_gamma for r in records)
    if n_floored:
        logger.warning(f"{fit.technology.value} full frontier: gamma floored at {settings.PRICE_FLOOR} for {n_floored} DMU(s)")
    return records

def report(d: Dataset, records: Sequence[ShadowPriceRecord], technology: Technology,
           estimator: Estimator) -> MacReport:
    """Mean and median of MAC and its two priced components, plus strategy shares"""
    if not records:
        raise ValueError("cannot report on an empty record set")
    if len(records) != d.n_dmu:
        logger.warning(f"Report covers {len(records)} records for {d.n_dmu} DMUs")

    table = {
        "mac": np.array([r.mac for r in records]),
        "pmrt": np.array([r.pmrt for r in records]),
        "wmp": np.array([r.wmp for r in records]),
    }
    n = len(records)
    shares = {
        s.value: 100.0 * sum(1 for r in records if r.strategy == s) / n
        for s in Strategy
    }
    return MacReport(
        technology=technology,
        estimator=estimator,
        n_records=n,
        mean={k: float(v.mean()) for k, v in table.items()},
        median={k: float(np.median(v)) for k, v in table.items()},
        strategy_share_percent=shares,
        input_reduction_percent=shares[Strategy.INPUT_REDUCTION.value],
    )

def extremes(d: Dataset, records: Sequence[ShadowPriceRecord]) -> List[ExtremeDmu]:
    """Lowest- and highest-MAC DMUs with fuel, emission and output levels relative to the sample mean"""
    if not records:
        raise ValueError("no records")
    macs = np.array([r.mac for r in records])
    index = {dmu_id: i for i, dmu_id in enumerate(d.dmu_ids)}

    def describe(k: int) -> ExtremeDmu:
        rec = records[k]
        i = index[rec.dmu_id]
        relative = {}
        for names, block in ((d.x_p_names, d.x_p), (d.b_names, d.b), (d.y_names, d.y)):
            means = block.mean(axis=0)
            for c, name in enumerate(names):
                relative[name] = float(block[i, c] / means[c]) if means[c] > 0 else float("nan")
        return ExtremeDmu(dmu_id=rec.dmu_id, mac=rec.mac, bracket=rec.bracket.label, relative_to_mean=relative)

    return [describe(int(np.argmin(macs))), describe(int(np.argmax(macs)))]
