import numpy as np
import pytest

from src.config import get_settings
from src.models.data import Dataset, DirectionVector, EmissionFactors
from src.models.schemas import Estimator, QuantileGrid, Technology
from src.services.direction import direction_for
from src.services.qp import DimensionMismatch
from src.services.technologies import (
    MissingEmissionFactors,
    build_cer,
    build_cnls,
    build_dea,
    equivalence_check,
    fit_cer,
    fit_cnls,
    fit_quantile_grid,
    fit_to_frame,
    fitted_frontier,
    verify_fit,
)
from src.tests.factories import make_dataset
from src.utils.validators import InvalidTau

settings = get_settings()

ALL_TECHS = [Technology.BP, Technology.JD, Technology.WGD]

def fit_for(d, tech, factors, tau=None):
    g = direction_for(d, tech)
    if tau is None:
        return fit_cnls(d, tech, g, factors), g
    return fit_cer(d, tech, tau, g, factors), g

# ---------------------- NORMALIZATION ROWS ----------------------

def test_bp_direction_rows(small_dataset, factors):
    fit, g = fit_for(small_dataset, Technology.BP, factors)

    assert np.all(fit.gamma @ g.g_y >= 0.5 - 1e-6)
    assert np.all(fit.omega @ g.g_b >= 0.5 - 1e-6)
    assert np.all(fit.eta >= -1e-9)
    assert np.all(fit.omega >= -1e-9)

def test_jd_normalization(small_dataset, factors):
    fit, g = fit_for(small_dataset, Technology.JD, factors)

    total = fit.eta @ g.g_x + fit.omega @ g.g_b + fit.gamma @ g.g_y
    assert np.allclose(total, 1.0, atol=1e-6)

def test_wgd_normalization_and_material_balance(small_dataset, factors):
    fit, _ = fit_for(small_dataset, Technology.WGD, factors)

    total = fit.gamma.sum(axis=1) + fit.omega.sum(axis=1) + fit.eta.sum(axis=1)
    assert np.allclose(total, 1.0, atol=1e-6)
    assert np.all(fit.eta[:, 0] + fit.omega[:, 0] * factors.u[0] >= -1e-6)

def test_wgd_uses_the_fixed_slack_direction(small_dataset, factors):
    model = build_cnls(small_dataset, Technology.WGD, None, factors)

    rows = model.qp.group_slice("normalization")

    assert model.technology == Technology.WGD
    assert rows.stop - rows.start == small_dataset.n_dmu
    assert np.allclose(model.qp.b_eq[rows], 1.0)

def test_free_coefficients_are_boxed(small_dataset, factors):
    wgd = build_cnls(small_dataset, Technology.WGD, None, factors)
    bp = build_cnls(small_dataset, Technology.BP, direction_for(small_dataset, Technology.BP))

    assert np.all(wgd.qp.lb[wgd.layout["eta"].ravel()] == -settings.COEFFICIENT_BOUND)
    assert np.all(bp.qp.lb[bp.layout["eta"].ravel()] == 0.0)
    assert np.all(bp.qp.lb[bp.layout["gamma"].ravel()] == 0.0)

def test_recuperation_rows_only_when_factor_is_positive(small_dataset):
    plain = build_cnls(small_dataset, Technology.WGD, None, EmissionFactors(u=[0.09404]))
    recuperating = build_cnls(small_dataset, Technology.WGD, None, EmissionFactors(u=[0.09404], r=0.5))

    with pytest.raises(KeyError):
        plain.qp.group_slice("recuperation")
    assert recuperating.qp.group_slice("recuperation").stop > recuperating.qp.group_slice("recuperation").start

# ---------------------- CNLS ----------------------

@pytest.mark.parametrize("tech", [Technology.BP, Technology.JD, Technology.WGD])
def test_cnls_frontier_envelops_the_data(small_dataset, factors, tech):
    fit, _ = fit_for(small_dataset, tech, factors)
    y = small_dataset.y[:, 0]

    yhat = fitted_frontier(fit, small_dataset)

    assert fit.estimator == Estimator.CNLS
    assert np.all(fit.eps >= -1e-9)
    assert np.all(yhat >= y - 1e-4 * (1.0 + y))

def test_bp_residual_splits_into_two_parts(small_dataset):
    fit, _ = fit_for(small_dataset, Technology.BP, None)

    assert np.allclose(fit.eps, fit.eps_economic + fit.eps_environmental, atol=1e-6)

# ---------------------- CER ----------------------

@pytest.mark.parametrize("tau", settings.DEFAULT_TAUS)
@pytest.mark.parametrize("tech", ALL_TECHS)
def test_cer_residual_parts_are_complementary(small_dataset, factors, tech, tau):
    fit, _ = fit_for(small_dataset, tech, factors, tau=tau)

    assert fit.estimator == Estimator.CER
    assert fit.tau == tau
    assert np.max(fit.eps_plus * fit.eps_minus) <= 1e-6
    assert np.all(fit.eps_plus >= -1e-9)
    assert np.all(fit.eps_minus >= -1e-9)

@pytest.mark.parametrize("tau", [0.2, 0.5, 0.999])
def test_cer_balances_weighted_residual_mass(small_dataset, tau):
    g = direction_for(small_dataset, Technology.JD)

    fit = fit_cer(small_dataset, Technology.JD, tau, g)

    # free intercepts make the weighted positive and negative parts cancel
    above = tau * np.sum(fit.eps_minus)
    below = (1.0 - tau) * np.sum(fit.eps_plus)
    assert above == pytest.approx(below, rel=1e-2, abs=1e-6)

@pytest.mark.parametrize("tau", [None, 0.05, 0.5, 0.95])
@pytest.mark.parametrize("tech", ALL_TECHS)
def test_decoded_fit_passes_its_own_constraints(small_dataset, factors, tech, tau):
    g = None if tech == Technology.WGD else direction_for(small_dataset, tech)
    if tau is None:
        model = build_cnls(small_dataset, tech, g, factors)
    else:
        model = build_cer(small_dataset, tech, tau, g, factors)

    fit = model.decode(model.solve())
    report = verify_fit(fit, model, tol=1e-6)

    assert report.feasible, report.groups
    assert report.max_violation <= 1e-6

def test_bp_expectile_environmental_part_is_anchored_at_the_data(small_dataset):
    fit, _ = fit_for(small_dataset, Technology.BP, None, tau=0.5)
    d = small_dataset

    environmental = d.b @ fit.omega.T - fit.alpha_bar[None, :] - d.x_p @ fit.eta_bar.T

    assert environmental.min() == pytest.approx(0.0, abs=1e-6)

def test_asymmetry_moves_residual_mass(medium_dataset):
    g = direction_for(medium_dataset, Technology.JD)
    taus = [0.2, 0.5, 0.8]

    fits = [fit_cer(medium_dataset, Technology.JD, tau, g) for tau in taus]
    balance = [float(np.sum(f.eps_minus ** 2) - np.sum(f.eps_plus ** 2)) for f in fits]

    for lower, upper in zip(balance, balance[1:]):
        assert upper <= lower + 1e-6

def test_quantile_grid_in_parallel_matches_sequential(small_dataset):
    g = direction_for(small_dataset, Technology.JD)
    grid = QuantileGrid(taus=(0.35, 0.65))

    sequential = fit_quantile_grid(small_dataset, Technology.JD, grid, g, max_workers=1)
    parallel = fit_quantile_grid(small_dataset, Technology.JD, grid, g, max_workers=2)

    assert [f.tau for f in parallel] == [0.35, 0.65]
    for a, b in zip(sequential, parallel):
        assert np.allclose(a.residual, b.residual, atol=1e-9)

def test_tau_must_be_inside_unit_interval(small_dataset):
    g = direction_for(small_dataset, Technology.JD)

    with pytest.raises(InvalidTau):
        build_cer(small_dataset, Technology.JD, 1.0, g)

# ---------------------- INPUT CHECKS ----------------------

def test_wgd_requires_emission_factors(small_dataset):
    with pytest.raises(MissingEmissionFactors):
        build_cnls(small_dataset, Technology.WGD)

def test_direction_width_must_match_data(small_dataset):
    g = DirectionVector(g_x=[0.5, 0.5], g_y=[0.5], g_b=[0.5])

    with pytest.raises(DimensionMismatch):
        build_cnls(small_dataset, Technology.JD, g)

def test_emission_factor_width_must_match_data(small_dataset):
    with pytest.raises(DimensionMismatch):
        build_cnls(small_dataset, Technology.WGD, None, EmissionFactors(u=[0.1, 0.2]))

def test_bp_needs_a_direction(small_dataset):
    with pytest.raises(ValueError):
        build_cnls(small_dataset, Technology.BP)

# ---------------------- DEA EQUIVALENCE ----------------------

@pytest.mark.parametrize("seed, n", [(1, 5), (2, 10), (3, 20)])
def test_jd_envelopment_matches_cnls(seed, n):
    d = make_dataset(seed=seed, n=n)
    g = direction_for(d, Technology.JD)

    frame = equivalence_check(d, Technology.JD, g)

    assert list(frame["dmu_id"]) == d.dmu_ids
    assert not frame["flagged"].any()

@pytest.mark.parametrize("seed, n", [(4, 5), (5, 5), (6, 10), (7, 10), (8, 20), (9, 20)])
def test_bp_envelopment_matches_cnls(seed, n):
    d = make_dataset(seed=seed, n=n)
    g = direction_for(d, Technology.BP)

    frame = equivalence_check(d, Technology.BP, g)

    assert not frame["flagged"].any(), frame.loc[frame["flagged"]]
    assert np.allclose(frame["cnls"], frame["dea"], atol=1e-4)

@pytest.mark.parametrize("tech", [Technology.BP, Technology.JD])
def test_points_on_a_concave_frontier_are_all_efficient(tech):
    d = Dataset(
        dmu_ids=["A", "B", "C"],
        x_n=np.zeros((3, 0)),
        x_p=[[1.0], [2.0], [3.0]],
        y=[[1.0], [2.0], [2.2]],
        b=[[0.1], [0.2], [0.3]],
    )
    g = DirectionVector(g_x=[0.5], g_y=[0.5], g_b=[0.5])

    frame = equivalence_check(d, tech, g)

    assert np.allclose(frame["dea"], 0.0, atol=1e-6)
    assert np.allclose(frame["cnls"], 0.0, atol=1e-6)

def test_single_bp_dmu_is_efficient():
    d = Dataset(dmu_ids=["A"], x_n=np.zeros((1, 0)), x_p=[[10.0]], y=[[4.0]], b=[[1.0]])
    g = DirectionVector(g_x=[0.5], g_y=[0.5], g_b=[0.5])

    frame = equivalence_check(d, Technology.BP, g)

    assert frame["dea"].tolist() == [pytest.approx(0.0, abs=1e-9)]
    assert frame["cnls"].tolist() == [pytest.approx(0.0, abs=1e-9)]

def test_bp_envelopment_matches_cnls_with_constant_fuel():
    d = make_dataset(seed=5, n=8, constant_fuel=True)
    g = DirectionVector(g_x=[0.5], g_y=[0.5], g_b=[0.5])

    frame = equivalence_check(d, Technology.BP, g)

    assert not frame["flagged"].any()

def test_no_envelopment_model_for_wgd(small_dataset):
    with pytest.raises(ValueError):
        build_dea(small_dataset, 0, Technology.WGD, DirectionVector.fixed_slack(1, 1, 1))

def test_envelopment_index_out_of_range(small_dataset):
    g = direction_for(small_dataset, Technology.JD)

    with pytest.raises(IndexError):
        build_dea(small_dataset, small_dataset.n_dmu, Technology.JD, g)

# ---------------------- EXPORT ----------------------

def test_fit_frame_columns(small_dataset):
    fit, _ = fit_for(small_dataset, Technology.BP, None, tau=0.5)

    frame = fit_to_frame(fit, small_dataset)

    assert len(frame) == small_dataset.n_dmu
    assert list(frame.columns[:4]) == ["dmu_id", "technology", "tau", "alpha"]
    for column in ("alpha_bar", "beta_xN1", "beta_xN2", "eta_xP1", "eta_bar_xP1", "omega_b1", "gamma_y1",
                   "eps_plus", "eps_minus"):
        assert column in frame.columns
    assert set(frame["technology"]) == {"BP"}

# ---------------------- HIGH QUANTILE ----------------------

def test_high_quantile_leaves_few_points_above():
    # with little inefficiency the mass above the frontier, 0.001 / 0.999 of the mass below, stays under 1e-4
    d = make_dataset(seed=41, n=10, inefficiency=1e-5)
    g = direction_for(d, Technology.JD)

    fit = fit_cer(d, Technology.JD, 0.999, g)

    assert np.sum(fit.eps_minus <= 1e-4) >= 9

# ---------------------- SYMMETRIES ----------------------

def permuted(d: Dataset, order) -> Dataset:
    return Dataset(
        dmu_ids=[d.dmu_ids[i] for i in order],
        x_n=d.x_n[order],
        x_p=d.x_p[order],
        y=d.y[order],
        b=d.b[order],
    )

@pytest.mark.parametrize("tau", [None, 0.5])
@pytest.mark.parametrize("tech", ALL_TECHS)
def test_reordering_dmus_reorders_residuals(small_dataset, factors, tech, tau):
    order = np.random.default_rng(3).permutation(small_dataset.n_dmu)
    shuffled = permuted(small_dataset, order)

    base, _ = fit_for(small_dataset, tech, factors, tau)
    moved, _ = fit_for(shuffled, tech, factors, tau)

    assert moved.dmu_ids == [small_dataset.dmu_ids[i] for i in order]
    assert np.allclose(moved.residual, base.residual[order], atol=1e-5)

@pytest.mark.parametrize("tau", [None, 0.5])
@pytest.mark.parametrize("tech", ALL_TECHS)
def test_identical_dmus_get_identical_fits(small_dataset, factors, tech, tau):
    d = small_dataset
    twin = Dataset(
        dmu_ids=d.dmu_ids + ["twin"],
        x_n=np.vstack([d.x_n, d.x_n[:1]]),
        x_p=np.vstack([d.x_p, d.x_p[:1]]),
        y=np.vstack([d.y, d.y[:1]]),
        b=np.vstack([d.b, d.b[:1]]),
    )

    fit, _ = fit_for(twin, tech, factors, tau)
    yhat = fitted_frontier(fit, twin)

    assert fit.residual[-1] == pytest.approx(fit.residual[0], abs=1e-5)
    assert yhat[-1] == pytest.approx(yhat[0], abs=1e-6)

# ---------------------- FITTED VALUES ----------------------

def test_jd_fitted_values_stay_inside_the_observed_range(small_dataset):
    fit, _ = fit_for(small_dataset, Technology.JD, None)
    y = small_dataset.y[:, 0]

    yhat = fitted_frontier(fit, small_dataset)

    assert np.all(yhat >= y - 1e-6)
    assert np.all(yhat <= y.max() + 1e-6)

@pytest.mark.parametrize("tau", [None, 0.05, 0.5, 0.95])
@pytest.mark.parametrize("tech", ALL_TECHS)
def test_fitted_values_are_on_the_data_scale(medium_dataset, factors, tech, tau):
    fit, _ = fit_for(medium_dataset, tech, factors, tau)
    y = medium_dataset.y[:, 0]

    yhat = fitted_frontier(fit, medium_dataset)

    assert np.all(np.isfinite(yhat))
    assert np.all(np.abs(yhat) <= 10.0 * y.max())

def test_flat_output_slopes_are_not_used_to_read_bp_values(small_dataset):
    fit, _ = fit_for(small_dataset, Technology.BP, None, tau=0.5)
    gamma = fit.gamma.copy()
    gamma[0, 0] = 1e-6
    flattened = fit.model_copy(update={"gamma": gamma})

    yhat = fitted_frontier(flattened, small_dataset)

    assert np.all(np.isfinite(yhat))
    assert np.all(np.abs(yhat) <= 10.0 * small_dataset.y.max())
