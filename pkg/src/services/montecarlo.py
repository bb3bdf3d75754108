import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import halfnorm

from src.config import get_settings
from src.models.data import Dataset, EmissionFactors, FrontierFit, SimulatedSample, TrueQuantile
from src.models.schemas import DgpConfig, Estimator, RmseCell, RmseReport, Scenario, Technology
from src.services.dataset import DatasetError
from src.services.direction import direction_for
from src.services.qp import DimensionMismatch, SolveError
from src.services.technologies import fit_cer, fit_cnls, fitted_frontier
from src.utils.validators import DataValidator

settings = get_settings()
logger = logging.getLogger(__name__)

EMISSION_COEFFICIENT = 0.09404
OUTPUT_ELASTICITY = 0.3
S2_EMISSION_PENALTY = 0.12
MAX_RESAMPLES = 100

# a replication that raises one of these is recorded and skipped; anything else propagates
REPLICATION_ERRORS = (SolveError, DimensionMismatch, DatasetError, ValueError, ArithmeticError)

class NonPositiveBase(Exception):
    """Raised when the Scenario 2 fuel term x3 - 0.12 b stays non-positive after resampling"""
    pass

class ReplicationMismatch(Exception):
    """Raised when estimates and targets disagree in replication count or DMU count"""
    pass

# (sample, technology, estimator, tau) -> fitted first-output frontier per DMU
EstimateFn = Callable[[SimulatedSample, Technology, Estimator, Optional[float]], np.ndarray]

_SCENARIO_KEY = {Scenario.S1: 1, Scenario.S2: 2}

def _rng(cfg: DgpConfig, rep: int) -> np.random.Generator:
    # one counter-based substream per (scenario, sigma, I, rep)
    key = (_SCENARIO_KEY[cfg.scenario], int(round(cfg.sigma * 1000)), cfg.n_dmu, rep)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=key)))

def _half_normal(rng: np.random.Generator, scale: float, size: int) -> np.ndarray:
    draws = np.abs(rng.standard_normal(size))
    return scale * draws

def u_scale(cfg: DgpConfig) -> float:
    """Output inefficiency scale; Scenario 2 may pin it regardless of the sigma sweep"""
    if cfg.scenario == Scenario.S2 and cfg.s2_fixed_u_scale is not None:
        return cfg.s2_fixed_u_scale
    return cfg.sigma

def generate(cfg: DgpConfig, rep: int) -> SimulatedSample:
    """Draw one replication of the scenario's data generating process"""
    if rep < 0:
        raise ValueError(f"replication index must be non-negative, got {rep}")
    rng = _rng(cfg, rep)
    n = cfg.n_dmu
    scale_y = u_scale(cfg)

    x = rng.uniform(5.0, 15.0, size=(n, 3))
    u_y = _half_normal(rng, scale_y, n)
    u_b = _half_normal(rng, cfg.sigma, n)
    b = EMISSION_COEFFICIENT * x[:, 2] * np.exp(-u_b)
    resampled = 0

    if cfg.scenario == Scenario.S1:
        true_f = np.prod(x, axis=1) ** OUTPUT_ELASTICITY
    else:
        for _ in range(MAX_RESAMPLES):
            bad = x[:, 2] - S2_EMISSION_PENALTY * b <= 0
            if not bad.any():
                break
            resampled += int(bad.sum())
            u_b[bad] = _half_normal(rng, cfg.sigma, int(bad.sum()))
            b[bad] = EMISSION_COEFFICIENT * x[bad, 2] * np.exp(-u_b[bad])
        else:
            raise NonPositiveBase(f"x3 - {S2_EMISSION_PENALTY} b stayed non-positive after {MAX_RESAMPLES} resamples")
        if resampled:
            logger.warning(f"S2 rep {rep}: resampled emissions for {resampled} row(s) to keep x3 - 0.12 b positive")
        true_f = (x[:, 0] * x[:, 1] * (x[:, 2] - S2_EMISSION_PENALTY * b)) ** OUTPUT_ELASTICITY

    y = true_f * np.exp(-u_y)
    dataset = Dataset(
        dmu_ids=[str(i + 1) for i in range(n)],
        x_n=x[:, :2],
        x_p=x[:, 2:],
        y=y[:, None],
        b=b[:, None],
        x_n_names=["x1", "x2"],
        x_p_names=["x3"],
        y_names=["y"],
        b_names=["b"],
    )
    return SimulatedSample(
        scenario=cfg.scenario, sigma=cfg.sigma, u_scale=scale_y, rep=rep, dataset=dataset,
        true_f=true_f, u_y=u_y, u_b=u_b, resampled=resampled,
    )

def quantile_factor(tau: float, scale: float) -> float:
    """tau-quantile of exp(-u) for half-normal u"""
    tau = DataValidator.validate_tau(tau)
    if scale == 0:
        return 1.0
    return float(np.exp(-halfnorm.ppf(1.0 - tau, scale=scale)))

def true_quantile(sample: SimulatedSample, tau: float) -> TrueQuantile:
    factor = quantile_factor(tau, sample.u_scale)
    return TrueQuantile(tau=tau, factor=factor, values=sample.true_f * factor)

def _values(estimate: Union[np.ndarray, FrontierFit], dataset: Dataset) -> np.ndarray:
    if isinstance(estimate, FrontierFit):
        return fitted_frontier(estimate, dataset)
    return np.asarray(estimate, dtype=float)

def _mean_rmse(estimates: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    if len(estimates) != len(targets):
        raise ReplicationMismatch(f"{len(estimates)} estimate set(s) for {len(targets)} replication(s)")
    if not estimates:
        raise ReplicationMismatch("no replications to score")
    per_rep = []
    for r, (est, target) in enumerate(zip(estimates, targets)):
        if est.shape != target.shape:
            raise ReplicationMismatch(f"replication {r}: {est.shape[0]} estimates for {target.shape[0]} DMUs")
        per_rep.append(np.sqrt(np.mean((est - target) ** 2)))
    return float(np.mean(per_rep))

def pro_rmse(estimates: Sequence[Union[np.ndarray, FrontierFit]], samples: Sequence[SimulatedSample]) -> float:
    """Mean over replications of the per-replication RMSE against the noise-free frontier"""
    if len(estimates) != len(samples):
        raise ReplicationMismatch(f"{len(estimates)} estimate set(s) for {len(samples)} sample(s)")
    return _mean_rmse(
        [_values(e, s.dataset) for e, s in zip(estimates, samples)],
        [s.true_f for s in samples],
    )

def exp_rmse(estimates: Sequence[Union[np.ndarray, FrontierFit]], targets: Sequence[TrueQuantile],
             tau: float, samples: Optional[Sequence[SimulatedSample]] = None) -> float:
    """Pro-RMSE with the true tau-quantile frontier as target"""
    for t in targets:
        if abs(t.tau - tau) > 1e-12:
            raise ReplicationMismatch(f"target quantile {t.tau} does not match {tau}")
    if any(isinstance(e, FrontierFit) for e in estimates):
        if samples is None or len(samples) != len(estimates):
            raise ReplicationMismatch("fits need their samples to be evaluated")
        estimates = [_values(e, s.dataset) for e, s in zip(estimates, samples)]
    return _mean_rmse([np.asarray(e, dtype=float) for e in estimates], [t.values for t in targets])

def frontier_estimates(sample: SimulatedSample, tech: Technology, estimator: Estimator,
                       tau: Optional[float]) -> np.ndarray:
    """Fit the estimator to a sample and evaluate the frontier at each DMU"""
    d = sample.dataset
    g, u = None, None
    if tech == Technology.WGD:
        u = EmissionFactors(u=[settings.S2_EMISSION_FACTOR] * d.x_p.shape[1])
    else:
        g = direction_for(d, tech)
    if estimator == Estimator.CNLS:
        fit = fit_cnls(d, tech, g, u)
    else:
        fit = fit_cer(d, tech, tau, g, u)
    return fitted_frontier(fit, d)

def oracle_estimates(sample: SimulatedSample, tech: Technology, estimator: Estimator,
                     tau: Optional[float]) -> np.ndarray:
    """Returns the true target, zero-error reference"""
    if estimator == Estimator.CNLS:
        return np.array(sample.true_f)
    return np.array(true_quantile(sample, tau).values)

def _run_cell(cfg: DgpConfig, samples: List[SimulatedSample], tech: Technology, estimator: Estimator,
              tau: Optional[float], estimate: EstimateFn) -> RmseCell:
    estimates, targets, failures = [], [], []
    for sample in samples:
        try:
            values = estimate(sample, tech, estimator, tau)
        except REPLICATION_ERRORS as e:
            failures.append(f"rep {sample.rep}: {type(e).__name__}: {e}")
            logger.warning(f"{tech.value} {estimator.value} tau={tau} {cfg.scenario.value} sigma={cfg.sigma:g} rep {sample.rep} failed: {e}")
            continue
        estimates.append(values)
        targets.append(sample.true_f if estimator == Estimator.CNLS else true_quantile(sample, tau).values)

    value = _mean_rmse(estimates, targets) if estimates else None
    cell = RmseCell(
        estimator=estimator.value,
        technology=tech,
        scenario=cfg.scenario,
        sigma=cfg.sigma,
        tau=tau,
        metric="pro_rmse" if estimator == Estimator.CNLS else "exp_rmse",
        value=value,
        n_reps=len(estimates),
        complete=not failures,
        failures=failures,
    )
    logger.info(f"{cfg.scenario.value} sigma={cfg.sigma:g} {tech.value} {estimator.value}"
                + (f" tau={tau:g}" if tau is not None else "") + f": {cell.metric}={value} over {cell.n_reps} rep(s)")
    return cell

def run_experiment(configs: Sequence[DgpConfig], technologies: Sequence[Technology],
                   estimators: Sequence[Estimator], taus: Sequence[float],
                   oracle: bool = False, max_workers: Optional[int] = None,
                   estimate: Optional[EstimateFn] = None) -> RmseReport:
    """Score every (config, technology, estimator, tau) cell over the configured replications"""
    if not configs:
        raise ValueError("experiment grid is empty")
    taus = DataValidator.validate_taus(taus) if Estimator.CER in estimators else []
    estimate = estimate or (oracle_estimates if oracle else frontier_estimates)

    units = []
    for cfg in configs:
        samples = [generate(cfg, rep) for rep in range(cfg.n_reps)]
        for tech in technologies:
            for estimator in estimators:
                for tau in ([None] if estimator == Estimator.CNLS else taus):
                    units.append((cfg, samples, tech, estimator, tau))

    workers = max_workers or settings.MAX_WORKERS
    logger.info(f"Running {len(units)} cell(s) with {workers} worker(s){' in oracle mode' if oracle else ''}")
    if workers <= 1:
        cells = [_run_cell(*unit, estimate) for unit in units]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda unit: _run_cell(*unit, estimate), units))

    report = RmseReport(cells=cells)
    if report.incomplete:
        logger.warning(f"{len(report.incomplete)} of {len(cells)} cell(s) incomplete")
    return report

def _sigma_column(sigma: float) -> str:
    return f"sigma={sigma:g}"

def to_table_rows(report: RmseReport) -> List[Dict]:
    """Rows per scenario, technology, estimator and tau; one column per sigma"""
    rows: Dict[tuple, Dict] = {}
    for cell in report.cells:
        key = (cell.scenario.value, cell.technology.value, cell.estimator, cell.tau)
        row = rows.setdefault(key, {
            "scenario": cell.scenario.value,
            "technology": cell.technology.value,
            "estimator": cell.estimator,
            "tau": cell.tau,
            "metric": cell.metric,
        })
        row[_sigma_column(cell.sigma)] = cell.value
    return list(rows.values())

def to_tidy_rows(report: RmseReport) -> List[Dict]:
    """Long format, one row per cell"""
    return [
        {
            "scenario": cell.scenario.value,
            "technology": cell.technology.value,
            "estimator": cell.estimator,
            "tau": cell.tau,
            "sigma": cell.sigma,
            "metric": cell.metric,
            "value": cell.value,
            "n_reps": cell.n_reps,
            "complete": cell.complete,
        }
        for cell in report.cells
    ]
