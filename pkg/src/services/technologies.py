import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from src.config import get_settings
from src.models.data import Dataset, DeaScore, DirectionVector, EmissionFactors, FrontierFit
from src.models.schemas import Estimator, QuantileGrid, Technology, Weights
from src.services.qp import (
    DimensionMismatch,
    FeasibilityReport,
    ProgramBuilder,
    QuadraticProgram,
    Solution,
    check_feasibility,
    polish,
    solve,
)
from src.utils.validators import DataValidator

settings = get_settings()
logger = logging.getLogger(__name__)

class MissingEmissionFactors(Exception):
    """Raised when a weak G-disposability model is built without emission factors"""
    pass

# (variable index block [rows x cols], conditioned data [rows x cols], sign)
Term = Tuple[np.ndarray, np.ndarray, float]

class _Scaling(NamedTuple):
    x_n: np.ndarray
    x_p: np.ndarray
    y: np.ndarray
    b: np.ndarray
    rho: float

def _column_scale(block: np.ndarray) -> np.ndarray:
    if block.shape[1] == 0:
        return np.ones(0)
    scale = np.abs(block).max(axis=0).astype(float)
    scale[scale <= 0] = 1.0
    return scale

def _scaling(d: Dataset, tech: Technology, g: DirectionVector) -> _Scaling:
    s_xn, s_xp, s_y, s_b = (_column_scale(m) for m in (d.x_n, d.x_p, d.y, d.b))
    if tech == Technology.WGD:
        parts = np.concatenate([1.0 / s_xp, 1.0 / s_y, 1.0 / s_b])
    else:
        parts = np.concatenate([g.g_x / s_xp, g.g_y / s_y, g.g_b / s_b])
    return _Scaling(s_xn, s_xp, s_y, s_b, float(parts.max()))

def _check_dimensions(d: Dataset, g: Optional[DirectionVector], u: Optional[EmissionFactors]):
    dims = d.dims
    if g is not None:
        for name, vec, width in (("g_x", g.g_x, dims["M2"]), ("g_y", g.g_y, dims["J"]), ("g_b", g.g_b, dims["K"])):
            if vec.shape[0] != width:
                raise DimensionMismatch(f"{name} has {vec.shape[0]} components, data has {width} columns")
    if u is not None and u.u.shape[0] != dims["M2"]:
        raise DimensionMismatch(f"u has {u.u.shape[0]} factors for {dims['M2']} emission-generating inputs")

def _evaluate(terms: Sequence[Term], coef_owner: np.ndarray, point_owner: np.ndarray, sign: float = 1.0):
    """Sparse triplets of rows sum_terms coef[coef_owner[r]] . data[point_owner[r]]"""
    r = np.arange(len(coef_owner))
    rows, cols, vals = [], [], []
    for idx, data, term_sign in terms:
        width = idx.shape[1]
        if width == 0:
            continue
        rows.append(np.repeat(r, width))
        cols.append(idx[coef_owner].ravel())
        vals.append((sign * term_sign * data[point_owner]).ravel())
    if not rows:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

def _stack(*triplets):
    return tuple(np.concatenate(parts) for parts in zip(*triplets))

def _add_afriat(builder: ProgramBuilder, group: str, terms: Sequence[Term], n: int,
                shift: Optional[np.ndarray] = None):
    """
    Each DMU's hyperplane is the lowest one at its own data point

    With `shift`, the own value is first lowered by that DMU's residual, so every
    other hyperplane has to stay on or above the fitted point itself.
    """
    own, other = np.nonzero(~np.eye(n, dtype=bool))
    if own.size == 0:
        return
    parts = [_evaluate(terms, own, own), _evaluate(terms, other, own, sign=-1.0)]
    if shift is not None:
        parts.append((np.arange(own.size), np.asarray(shift)[own], np.full(own.size, -1.0)))
    rows, cols, vals = _stack(*parts)
    builder.add_inequalities(group, rows, cols, vals, np.zeros(own.size), "<=")

def _add_residual(builder: ProgramBuilder, group: str, lhs: Sequence[Tuple[np.ndarray, float]],
                  terms: Sequence[Term], n: int):
    """sum(sign * lhs_var) - H_i(z_i) = 0 for every DMU"""
    owner = np.arange(n)
    parts = [_evaluate(terms, owner, owner, sign=-1.0)]
    for var, sign in lhs:
        parts.append((owner, np.asarray(var), np.full(n, sign)))
    rows, cols, vals = _stack(*parts)
    builder.add_equalities(group, rows, cols, vals, np.zeros(n))

def _add_per_dmu_rows(builder: ProgramBuilder, group: str, blocks: Sequence[Tuple[np.ndarray, np.ndarray]],
                      rhs: float, sense: str, n: int):
    """Rows sum_blocks coef_i . weights  (sense) rhs, one per DMU"""
    parts = []
    for idx, weights in blocks:
        width = idx.shape[1]
        if width == 0:
            continue
        parts.append((np.repeat(np.arange(n), width), idx.ravel(), np.tile(weights, n)))
    rows, cols, vals = _stack(*parts)
    if sense == "==":
        builder.add_equalities(group, rows, cols, vals, np.full(n, rhs))
    else:
        builder.add_inequalities(group, rows, cols, vals, np.full(n, rhs), sense)

class FrontierModel:
    """A built estimation program together with its variable layout"""

    def __init__(self, qp: QuadraticProgram, technology: Technology, estimator: Estimator,
                 tau: Optional[float], dmu_ids: List[str], layout: Dict[str, np.ndarray],
                 direction: Optional[DirectionVector] = None, environmental: Optional[sp.csr_matrix] = None):
        self.qp = qp
        self.technology = technology
        self.estimator = estimator
        self.tau = tau
        self.dmu_ids = dmu_ids
        self.layout = layout
        self.direction = direction
        # own-point environmental values in conditioned units, set for BP expectile models
        self.environmental = environmental

    def solve(self, tol: Optional[float] = None) -> Solution:
        """Solve the program; CNLS solutions are polished to a vertex of the optimal face"""
        solution = solve(self.qp, tol)
        if self.estimator == Estimator.CNLS:
            solution = polish(self.qp, solution, tol)
        return solution

    def _anchor(self, values: np.ndarray) -> np.ndarray:
        """
        Move both intercept families by the same amount so the lowest environmental
        value at the data is zero. Residuals and every row are unchanged by the move;
        only the split between the two sub-technologies is fixed.
        """
        x = values / self.qp.var_scale
        shift = float((self.environmental @ x).min())
        x[self.layout["alpha"]] += shift
        x[self.layout["alpha_bar"]] += shift
        return x * self.qp.var_scale

    def decode(self, solution: Solution) -> FrontierFit:
        solution.raise_for_status()
        values = solution.values
        if self.environmental is not None:
            values = self._anchor(values)
        block = {name: values[idx] for name, idx in self.layout.items()}
        fields = {
            "technology": self.technology,
            "estimator": self.estimator,
            "tau": self.tau,
            "dmu_ids": self.dmu_ids,
            "alpha": block["alpha"],
            "beta": block["beta"],
            "eta": block["eta"],
            "omega": block["omega"],
            "gamma": block["gamma"],
            "direction": self.direction,
            "objective_value": solution.objective_value,
        }
        if self.technology == Technology.BP:
            fields["alpha_bar"] = block["alpha_bar"]
            fields["eta_bar"] = block["eta_bar"]
        if self.estimator == Estimator.CNLS:
            fields["eps"] = block["eps"]
            if "eps_economic" in block:
                fields["eps_economic"] = block["eps_economic"]
                fields["eps_environmental"] = block["eps_environmental"]
        else:
            fields["eps_plus"] = block["eps_plus"]
            fields["eps_minus"] = block["eps_minus"]
        return FrontierFit(**fields)

    def encode(self, fit: FrontierFit) -> np.ndarray:
        """Original-unit value vector of a decoded fit, in this model's layout"""
        values = np.zeros(self.qp.n_vars)
        for name, idx in self.layout.items():
            source = getattr(fit, name)
            if source is None:
                raise DimensionMismatch(f"fit has no '{name}' block for this model")
            values[idx] = np.asarray(source).reshape(idx.shape)
        return values

def _build_frontier(d: Dataset, tech: Technology, g: Optional[DirectionVector], u: Optional[EmissionFactors],
                    wts: Weights, tau: Optional[float]) -> FrontierModel:
    estimator = Estimator.CNLS if tau is None else Estimator.CER
    if tech == Technology.WGD:
        if u is None:
            raise MissingEmissionFactors("weak G-disposability needs emission factors for the emission-generating inputs")
        dims = d.dims
        g = DirectionVector.fixed_slack(dims["M2"], dims["J"], dims["K"])
    elif g is None:
        raise ValueError(f"{tech.value} needs a direction vector")
    _check_dimensions(d, g, u)

    n = d.n_dmu
    dims = d.dims
    sc = _scaling(d, tech, g)
    rho = sc.rho
    x_n, x_p, y, b = d.x_n / sc.x_n, d.x_p / sc.x_p, d.y / sc.y, d.b / sc.b
    ones = np.ones((n, 1))

    tag = f"{tech.value}-{estimator.value}" + (f"-tau{tau:g}" if tau is not None else "")
    builder = ProgramBuilder(tag)
    signed = 0.0 if tech == Technology.BP else None

    alpha = builder.add_variables("alpha", (n, 1), lower=None, scale=1.0 / rho)
    layout = {"alpha": alpha[:, 0]}
    if tech == Technology.BP:
        alpha_bar = builder.add_variables("alpha_bar", (n, 1), lower=None, scale=1.0 / rho)
        layout["alpha_bar"] = alpha_bar[:, 0]
    beta = builder.add_variables("beta", (n, dims["M1"]), lower=0.0, scale=1.0 / (rho * sc.x_n))
    eta = builder.add_variables("eta", (n, dims["M2"]), lower=signed, scale=1.0 / (rho * sc.x_p))
    layout.update(beta=beta, eta=eta)
    if tech == Technology.BP:
        eta_bar = builder.add_variables("eta_bar", (n, dims["M2"]), lower=None, scale=1.0 / (rho * sc.x_p))
        layout["eta_bar"] = eta_bar
    omega = builder.add_variables("omega", (n, dims["K"]), lower=signed, scale=1.0 / (rho * sc.b))
    gamma = builder.add_variables("gamma", (n, dims["J"]), lower=0.0, scale=1.0 / (rho * sc.y))
    layout.update(omega=omega, gamma=gamma)

    if tech == Technology.BP:
        economic = [(alpha, ones, 1.0), (beta, x_n, 1.0), (eta, x_p, 1.0), (eta_bar, x_p, 1.0), (gamma, y, -1.0)]
        environmental = [(omega, b, 1.0), (alpha_bar, ones, -1.0), (eta_bar, x_p, -1.0)]
        families = [("afriat_economic", economic), ("afriat_environmental", environmental)]
    else:
        economic = [(alpha, ones, 1.0), (beta, x_n, 1.0), (eta, x_p, 1.0), (omega, b, 1.0), (gamma, y, -1.0)]
        environmental = []
        families = [("afriat", economic)]

    shifts: Dict[str, np.ndarray] = {}
    if estimator == Estimator.CNLS:
        eps = builder.add_variables("eps", n, lower=0.0, scale=1.0 / rho)
        layout["eps"] = eps
        if tech == Technology.BP:
            eps_economic = builder.add_variables("eps_economic", n, lower=0.0, scale=1.0 / rho)
            eps_environmental = builder.add_variables("eps_environmental", n, lower=0.0, scale=1.0 / rho)
            layout.update(eps_economic=eps_economic, eps_environmental=eps_environmental)
            # each sub-technology's hyperplanes must support every observed point
            shifts = {"afriat_economic": eps_economic, "afriat_environmental": eps_environmental}
            _add_residual(builder, "residual_economic", [(eps_economic, 1.0)], economic, n)
            _add_residual(builder, "residual_environmental", [(eps_environmental, 1.0)], environmental, n)
            owner = np.arange(n)
            builder.add_equalities(
                "residual",
                np.concatenate([owner, owner, owner]),
                np.concatenate([eps, eps_economic, eps_environmental]),
                np.concatenate([np.ones(n), -np.ones(n), -np.ones(n)]),
                np.zeros(n),
            )
        else:
            _add_residual(builder, "residual", [(eps, 1.0)], economic, n)
        builder.add_squares(eps, 1.0)
    else:
        eps_plus = builder.add_variables("eps_plus", n, lower=0.0, scale=1.0 / rho)
        eps_minus = builder.add_variables("eps_minus", n, lower=0.0, scale=1.0 / rho)
        layout.update(eps_plus=eps_plus, eps_minus=eps_minus)
        _add_residual(builder, "residual", [(eps_plus, 1.0), (eps_minus, -1.0)], economic + environmental, n)
        builder.add_squares(eps_plus, 1.0 - tau)
        builder.add_squares(eps_minus, tau)

    for group, terms in families:
        _add_afriat(builder, group, terms, n, shifts.get(group))

    if tech == Technology.BP:
        _add_per_dmu_rows(builder, "direction_output", [(gamma, g.g_y / sc.y / rho)], wts.w2, ">=", n)
        _add_per_dmu_rows(builder, "direction_emission", [(omega, g.g_b / sc.b / rho)], wts.w3, ">=", n)
        _add_per_dmu_rows(builder, "direction_input", [(eta, g.g_x / sc.x_p / rho)], wts.w1, ">=", n)
    elif tech == Technology.JD:
        _add_per_dmu_rows(
            builder, "normalization",
            [(eta, g.g_x / sc.x_p / rho), (omega, g.g_b / sc.b / rho), (gamma, g.g_y / sc.y / rho)],
            1.0, "==", n,
        )
    else:
        _add_per_dmu_rows(
            builder, "normalization",
            [(gamma, 1.0 / sc.y / rho), (omega, 1.0 / sc.b / rho), (eta, 1.0 / sc.x_p / rho)],
            1.0, "==", n,
        )
        _add_material_balance(builder, eta, omega, gamma, u, sc, n)

    qp = builder.build(objective_scale=1.0 / rho ** 2)
    logger.debug(f"Built {tag}: {qp.n_vars} variables, {qp.A_eq.shape[0] + qp.G.shape[0]} rows, rho={rho:.4g}")
    anchor = None
    if tech == Technology.BP and estimator == Estimator.CER:
        owner = np.arange(n)
        rows, cols, vals = _evaluate(environmental, owner, owner)
        anchor = sp.csr_matrix((vals, (rows, cols)), shape=(n, qp.n_vars))
    return FrontierModel(qp, tech, estimator, tau, list(d.dmu_ids), layout, g, anchor)

def _add_material_balance(builder: ProgramBuilder, eta, omega, gamma, u: EmissionFactors, sc: _Scaling, n: int):
    """eta_m + omega_k u_m >= 0 per (m, k), each row multiplied through by rho * s_xP[m]"""
    m2, k = eta.shape[1], omega.shape[1]
    rows, cols, vals = [], [], []
    r = 0
    for i in range(n):
        for m in range(m2):
            for kk in range(k):
                rows += [r, r]
                cols += [eta[i, m], omega[i, kk]]
                vals += [1.0, u.u[m] * sc.x_p[m] / sc.b[kk]]
                r += 1
    builder.add_inequalities("material_balance", rows, cols, vals, np.zeros(r), ">=")

    if u.r > 0:
        # desirable outputs recuperate part of the emissions
        rows, cols, vals = [], [], []
        r = 0
        for i in range(n):
            for j in range(gamma.shape[1]):
                for kk in range(k):
                    rows += [r, r]
                    cols += [gamma[i, j], omega[i, kk]]
                    vals += [1.0, u.r * sc.y[j] / sc.b[kk]]
                    r += 1
        builder.add_inequalities("recuperation", rows, cols, vals, np.zeros(r), ">=")

def build_cnls(d: Dataset, tech: Technology, g: Optional[DirectionVector] = None,
               u: Optional[EmissionFactors] = None, wts: Optional[Weights] = None) -> FrontierModel:
    """Sign-constrained CNLS model of the full frontier"""
    return _build_frontier(d, tech, g, u, wts or Weights(), None)

def build_cer(d: Dataset, tech: Technology, tau: float, g: Optional[DirectionVector] = None,
              u: Optional[EmissionFactors] = None, wts: Optional[Weights] = None) -> FrontierModel:
    """Convex expectile regression at quantile tau"""
    tau = DataValidator.validate_tau(tau)
    return _build_frontier(d, tech, g, u, wts or Weights(), tau)

def fit_cnls(d: Dataset, tech: Technology, g: Optional[DirectionVector] = None,
             u: Optional[EmissionFactors] = None, wts: Optional[Weights] = None,
             tol: Optional[float] = None) -> FrontierFit:
    model = build_cnls(d, tech, g, u, wts)
    return model.decode(model.solve(tol))

def fit_cer(d: Dataset, tech: Technology, tau: float, g: Optional[DirectionVector] = None,
            u: Optional[EmissionFactors] = None, wts: Optional[Weights] = None,
            tol: Optional[float] = None) -> FrontierFit:
    model = build_cer(d, tech, tau, g, u, wts)
    return model.decode(model.solve(tol))

def fit_quantile_grid(d: Dataset, tech: Technology, grid: QuantileGrid, g: Optional[DirectionVector] = None,
                      u: Optional[EmissionFactors] = None, wts: Optional[Weights] = None,
                      tol: Optional[float] = None, max_workers: Optional[int] = None) -> List[FrontierFit]:
    """One CER fit per grid quantile, returned in grid order"""
    workers = max_workers or settings.MAX_WORKERS
    logger.info(f"Fitting {tech.value} CER on {len(grid.taus)} quantiles with {workers} worker(s)")
    if workers <= 1:
        return [fit_cer(d, tech, tau, g, u, wts, tol) for tau in grid.taus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda tau: fit_cer(d, tech, tau, g, u, wts, tol), grid.taus))

def verify_fit(fit: FrontierFit, model: FrontierModel, tol: Optional[float] = None) -> FeasibilityReport:
    """Re-check a decoded fit against the constraint block it came from"""
    return check_feasibility(model.qp, model.encode(fit), tol)

def _hyperplane_values(fit: FrontierFit, x_n: np.ndarray, x_p: np.ndarray, b: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Value of every fitted hyperplane at every query point, [points x hyperplanes]"""
    eta = fit.eta + fit.eta_bar if fit.technology == Technology.BP else fit.eta
    values = fit.alpha[None, :] + x_n @ fit.beta.T + x_p @ eta.T - y @ fit.gamma.T
    if fit.technology != Technology.BP:
        values = values + b @ fit.omega.T
    return values

def _economic_roots(fit: FrontierFit, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    """First output at which the lowest economic hyperplane with a usable slope reaches zero"""
    slope = fit.gamma[:, 0]
    usable = slope >= settings.PRICE_FLOOR
    if not np.any(usable):
        logger.warning(
            f"{fit.technology.value} fit has no hyperplane with first-output slope above "
            f"{settings.PRICE_FLOOR}; flooring every slope"
        )
        usable = np.ones_like(usable)
    floored = np.maximum(slope[usable], settings.PRICE_FLOOR)
    roots = y[:, :1] + values[:, usable] / floored[None, :]
    return roots.min(axis=1)

def frontier_output(fit: FrontierFit, x_n, x_p, b, y) -> np.ndarray:
    """
    Fitted frontier value of the first desirable output at each query point

    BP reads it off the economic sub-technology: the smallest output at which a
    hyperplane whose first-output slope is at least PRICE_FLOOR turns zero. JD and
    WGD move the point along the fit's direction by the lowest hyperplane value,
    which is the fitted distance under the unit normalization; a fit that records
    no direction is read along the unit output direction.
    """
    x_n, x_p, b, y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x_n, x_p, b, y))
    if x_n.size == 0:
        x_n = np.zeros((x_p.shape[0], fit.beta.shape[1]))
    values = _hyperplane_values(fit, x_n, x_p, b, y)
    if fit.technology == Technology.BP:
        return _economic_roots(fit, values, y)
    g_y = float(fit.direction.g_y[0]) if fit.direction is not None else 1.0
    return y[:, 0] + g_y * values.min(axis=1)

def fitted_frontier(fit: FrontierFit, d: Dataset) -> np.ndarray:
    return frontier_output(fit, d.x_n, d.x_p, d.b, d.y)

class DeaModel:
    """Graph-efficiency LP for one evaluated DMU"""

    def __init__(self, qp: QuadraticProgram, technology: Technology, dmu_index: int, dmu_id: str,
                 layout: Dict[str, np.ndarray], wts: Weights):
        self.qp = qp
        self.technology = technology
        self.dmu_index = dmu_index
        self.dmu_id = dmu_id
        self.layout = layout
        self.wts = wts

    def decode(self, solution: Solution) -> DeaScore:
        solution.raise_for_status()
        v = solution.values
        if self.technology == Technology.BP:
            theta_m = float(v[self.layout["theta_m"]][0])
            theta_j = float(v[self.layout["theta_j"]][0])
            theta_k = float(v[self.layout["theta_k"]][0])
            objective = self.wts.w1 * theta_m + self.wts.w2 * theta_j + self.wts.w3 * theta_k
            return DeaScore(
                technology=self.technology, dmu_index=self.dmu_index, dmu_id=self.dmu_id,
                theta_m=theta_m, theta_j=theta_j, theta_k=theta_k,
                lam=v[self.layout["lam"]], mu=v[self.layout["mu"]], objective_value=objective,
            )
        theta = float(v[self.layout["theta"]][0])
        return DeaScore(
            technology=self.technology, dmu_index=self.dmu_index, dmu_id=self.dmu_id,
            theta=theta, lam=v[self.layout["lam"]], objective_value=theta,
        )

def build_dea(d: Dataset, o: int, tech: Technology, g: DirectionVector, wts: Optional[Weights] = None) -> DeaModel:
    if tech == Technology.WGD:
        raise ValueError("no primal envelopment model is provided for weak G-disposability")
    if not 0 <= o < d.n_dmu:
        raise IndexError(f"DMU index {o} outside 0..{d.n_dmu - 1}")
    _check_dimensions(d, g, None)
    wts = wts or Weights()

    n = d.n_dmu
    sc = _scaling(d, tech, g)
    rho = sc.rho
    x_n, x_p, y, b = d.x_n / sc.x_n, d.x_p / sc.x_p, d.y / sc.y, d.b / sc.b
    gx, gy, gb = g.g_x / sc.x_p / rho, g.g_y / sc.y / rho, g.g_b / sc.b / rho

    builder = ProgramBuilder(f"{tech.value}-dea-{d.dmu_ids[o]}")
    lam = builder.add_variables("lambda", n, lower=0.0)
    layout = {"lam": lam}

    def intensity_rows(group, weights_var, data, extra_var, extra_coef, rhs, sense):
        width = data.shape[1]
        if width == 0:
            return
        rows = [np.repeat(np.arange(width), n)]
        cols = [np.tile(weights_var, width)]
        vals = [data.T.ravel()]
        if extra_var is not None:
            rows.append(np.arange(width))
            cols.append(np.full(width, extra_var[0]))
            vals.append(extra_coef)
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        if sense == "==":
            builder.add_equalities(group, rows, cols, vals, rhs)
        else:
            builder.add_inequalities(group, rows, cols, vals, rhs, sense)

    if tech == Technology.BP:
        mu = builder.add_variables("mu", n, lower=0.0)
        theta_m = builder.add_variables("theta_m", 1, lower=0.0, scale=1.0 / rho)
        theta_j = builder.add_variables("theta_j", 1, lower=0.0, scale=1.0 / rho)
        theta_k = builder.add_variables("theta_k", 1, lower=0.0, scale=1.0 / rho)
        layout.update(mu=mu, theta_m=theta_m, theta_j=theta_j, theta_k=theta_k)
        intensity_rows("output", lam, y, theta_j, -gy, y[o], ">=")
        intensity_rows("non_emission_input", lam, x_n, None, None, x_n[o], "<=")
        intensity_rows("emission_input", lam, x_p, theta_m, gx, x_p[o], "<=")
        intensity_rows("emission", mu, b, theta_k, gb, b[o], "<=")
        width = x_p.shape[1]
        builder.add_equalities(
            "coupling",
            np.concatenate([np.repeat(np.arange(width), n)] * 2),
            np.concatenate([np.tile(lam, width), np.tile(mu, width)]),
            np.concatenate([x_p.T.ravel(), -x_p.T.ravel()]),
            np.zeros(width),
        )
        builder.add_equalities("intensity", np.zeros(n, dtype=int), lam, np.ones(n), [1.0])
        builder.add_equalities("intensity_environmental", np.zeros(n, dtype=int), mu, np.ones(n), [1.0])
        builder.add_linear(theta_m, -wts.w1)
        builder.add_linear(theta_j, -wts.w2)
        builder.add_linear(theta_k, -wts.w3)
    else:
        theta = builder.add_variables("theta", 1, lower=0.0, scale=1.0 / rho)
        layout["theta"] = theta
        intensity_rows("output", lam, y, theta, -gy, y[o], ">=")
        intensity_rows("non_emission_input", lam, x_n, None, None, x_n[o], "<=")
        intensity_rows("emission_input", lam, x_p, theta, gx, x_p[o], "==")
        intensity_rows("emission", lam, b, theta, gb, b[o], "==")
        builder.add_equalities("intensity", np.zeros(n, dtype=int), lam, np.ones(n), [1.0])
        builder.add_linear(theta, -1.0)

    qp = builder.build(objective_scale=1.0 / rho)
    return DeaModel(qp, tech, o, d.dmu_ids[o], layout, wts)

def run_dea(d: Dataset, tech: Technology, g: DirectionVector, wts: Optional[Weights] = None,
            tol: Optional[float] = None) -> List[DeaScore]:
    """Evaluate every DMU against the envelopment technology"""
    scores = []
    for o in range(d.n_dmu):
        model = build_dea(d, o, tech, g, wts)
        scores.append(model.decode(solve(model.qp, tol)))
    return scores

def equivalence_check(d: Dataset, tech: Technology, g: DirectionVector, u: Optional[EmissionFactors] = None,
                      wts: Optional[Weights] = None, tol: float = 1e-4) -> pd.DataFrame:
    """Per-DMU envelopment objective next to the sign-constrained CNLS residual"""
    if tech not in (Technology.BP, Technology.JD):
        raise ValueError(f"equivalence check covers BP and JD, got {tech.value}")
    scores = run_dea(d, tech, g, wts)
    fit = fit_cnls(d, tech, g, u, wts)
    dea = np.array([s.objective_value for s in scores])
    frame = pd.DataFrame({
        "dmu_id": d.dmu_ids,
        "dea": dea,
        "cnls": fit.eps,
        "difference": fit.eps - dea,
    })
    frame["flagged"] = frame["difference"].abs() > tol
    n_flagged = int(frame["flagged"].sum())
    if n_flagged:
        logger.warning(f"{tech.value} equivalence: {n_flagged} of {d.n_dmu} DMUs differ by more than {tol:g}")
    return frame

def fit_to_frame(fit: FrontierFit, d: Optional[Dataset] = None) -> pd.DataFrame:
    """One row per DMU, one column per coefficient"""
    names = {
        "beta": d.x_n_names if d else [f"xN{c + 1}" for c in range(fit.beta.shape[1])],
        "eta": d.x_p_names if d else [f"xP{c + 1}" for c in range(fit.eta.shape[1])],
        "eta_bar": d.x_p_names if d else [f"xP{c + 1}" for c in range(fit.eta.shape[1])],
        "omega": d.b_names if d else [f"b{c + 1}" for c in range(fit.omega.shape[1])],
        "gamma": d.y_names if d else [f"y{c + 1}" for c in range(fit.gamma.shape[1])],
    }
    columns: Dict[str, np.ndarray] = {"dmu_id": fit.dmu_ids, "alpha": fit.alpha}
    if fit.alpha_bar is not None:
        columns["alpha_bar"] = fit.alpha_bar
    for block, labels in names.items():
        values = getattr(fit, block)
        if values is None:
            continue
        for c, label in enumerate(labels):
            columns[f"{block}_{label}"] = values[:, c]
    for block in ("eps", "eps_economic", "eps_environmental", "eps_plus", "eps_minus"):
        values = getattr(fit, block)
        if values is not None:
            columns[block] = values
    frame = pd.DataFrame(columns)
    frame.insert(1, "technology", fit.technology.value)
    frame.insert(2, "tau", fit.tau if fit.tau is not None else np.nan)
    return frame

def dea_to_frame(scores: List[DeaScore]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "dmu_id": s.dmu_id,
            "technology": s.technology.value,
            "objective": s.objective_value,
            "theta": s.theta,
            "theta_m": s.theta_m,
            "theta_j": s.theta_j,
            "theta_k": s.theta_k,
        }
        for s in scores
    ])
