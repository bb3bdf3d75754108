import numpy as np
import pytest

from src.models.schemas import DgpConfig, Estimator, Scenario, Technology
from src.services.montecarlo import (
    EMISSION_COEFFICIENT,
    ReplicationMismatch,
    exp_rmse,
    generate,
    pro_rmse,
    quantile_factor,
    run_experiment,
    to_table_rows,
    to_tidy_rows,
    true_quantile,
    u_scale,
)
from src.services.qp import NumericalFailure
from src.utils.validators import InvalidTau

ALL_TECHS = [Technology.BP, Technology.JD, Technology.WGD]

def config(**overrides) -> DgpConfig:
    fields = {"scenario": Scenario.S1, "sigma": 0.8, "n_dmu": 20, "n_reps": 2, "seed": 7}
    fields.update(overrides)
    return DgpConfig(**fields)

# ---------------------- DATA GENERATION ----------------------

def test_generation_is_deterministic():
    a = generate(config(), 1)
    b = generate(config(), 1)

    assert np.array_equal(a.dataset.y, b.dataset.y)
    assert np.array_equal(a.dataset.b, b.dataset.b)
    assert np.array_equal(a.u_y, b.u_y)

def test_replications_draw_different_samples():
    assert not np.array_equal(generate(config(), 0).dataset.y, generate(config(), 1).dataset.y)

def test_scenario_one_sample():
    sample = generate(config(), 0)
    d = sample.dataset
    x = np.column_stack([d.x_n, d.x_p])

    assert d.dims == {"I": 20, "M1": 2, "M2": 1, "J": 1, "K": 1}
    assert d.x_n_names == ["x1", "x2"]
    assert np.all((x >= 5.0) & (x <= 15.0))
    assert np.all(sample.u_y >= 0.0)
    assert np.all(sample.u_b >= 0.0)
    assert np.allclose(sample.true_f, np.prod(x, axis=1) ** 0.3)
    assert np.allclose(d.y[:, 0], sample.true_f * np.exp(-sample.u_y))
    assert np.allclose(d.b[:, 0], EMISSION_COEFFICIENT * d.x_p[:, 0] * np.exp(-sample.u_b))

def test_scenario_two_sample():
    sample = generate(config(scenario=Scenario.S2), 0)
    d = sample.dataset
    expected = (d.x_n[:, 0] * d.x_n[:, 1] * (d.x_p[:, 0] - 0.12 * d.b[:, 0])) ** 0.3

    assert np.allclose(sample.true_f, expected)
    assert sample.resampled == 0

def test_zero_sigma_has_no_inefficiency():
    sample = generate(config(sigma=0.0), 0)

    assert np.allclose(sample.dataset.y[:, 0], sample.true_f)
    assert np.allclose(sample.dataset.b[:, 0], EMISSION_COEFFICIENT * sample.dataset.x_p[:, 0])

def test_fixed_output_scale_only_applies_to_scenario_two():
    assert u_scale(config(scenario=Scenario.S2, s2_fixed_u_scale=0.5)) == 0.5
    assert u_scale(config(scenario=Scenario.S1, s2_fixed_u_scale=0.5)) == 0.8

# ---------------------- TRUE QUANTILES ----------------------

def test_quantile_factor_grows_with_tau():
    factors = [quantile_factor(tau, 1.3) for tau in (0.05, 0.5, 0.95)]

    assert factors == sorted(factors)
    assert all(0.0 < f < 1.0 for f in factors)

def test_quantile_factor_matches_simulation():
    rng = np.random.default_rng(0)
    draws = np.exp(-1.3 * np.abs(rng.standard_normal(1_000_000)))

    assert quantile_factor(0.95, 1.3) == pytest.approx(np.quantile(draws, 0.95), abs=5e-3)

def test_quantile_factor_without_inefficiency():
    assert quantile_factor(0.3, 0.0) == 1.0

def test_true_quantile_scales_the_frontier():
    sample = generate(config(), 0)

    q = true_quantile(sample, 0.8)

    assert q.tau == 0.8
    assert np.allclose(q.values, sample.true_f * q.factor)

def test_quantile_factor_rejects_bad_tau():
    with pytest.raises(InvalidTau):
        quantile_factor(1.0, 0.8)

# ---------------------- RMSE ----------------------

def test_pro_rmse_examples():
    samples = [generate(config(), r) for r in range(2)]

    assert pro_rmse([s.true_f for s in samples], samples) == 0.0
    assert pro_rmse([s.true_f - 2.5 for s in samples], samples) == pytest.approx(2.5)

def test_rmse_averages_per_replication_roots():
    samples = [generate(config(n_dmu=4), r) for r in range(2)]
    estimates = [samples[0].true_f + 1.0, samples[1].true_f - 3.0]

    assert pro_rmse(estimates, samples) == pytest.approx(2.0)

def test_exp_rmse_examples():
    samples = [generate(config(), r) for r in range(2)]
    targets = [true_quantile(s, 0.5) for s in samples]

    assert exp_rmse([t.values for t in targets], targets, 0.5) == 0.0
    assert exp_rmse([t.values + 0.7 for t in targets], targets, 0.5) == pytest.approx(0.7)

def test_exp_rmse_rejects_other_quantiles():
    sample = generate(config(), 0)
    target = true_quantile(sample, 0.5)

    with pytest.raises(ReplicationMismatch):
        exp_rmse([target.values], [target], 0.8)

def test_rmse_rejects_mismatched_replications():
    samples = [generate(config(), r) for r in range(2)]

    with pytest.raises(ReplicationMismatch):
        pro_rmse([samples[0].true_f], samples)
    with pytest.raises(ReplicationMismatch):
        pro_rmse([samples[0].true_f[:3], samples[1].true_f], samples)

# ---------------------- EXPERIMENT ----------------------

def test_oracle_experiment_scores_zero():
    rep = run_experiment([config()], ALL_TECHS, [Estimator.CNLS, Estimator.CER], [0.5, 0.95], oracle=True)

    assert len(rep.cells) == 9
    assert all(cell.value == 0.0 for cell in rep.cells)
    assert all(cell.complete and cell.n_reps == 2 for cell in rep.cells)
    assert rep.get("cer", Technology.WGD, Scenario.S1, 0.8, 0.95).metric == "exp_rmse"
    assert rep.get("cnls", Technology.BP, Scenario.S1, 0.8).metric == "pro_rmse"

def test_experiment_is_deterministic():
    def offset(sample, tech, estimator, tau):
        return sample.true_f + sample.u_y

    a = run_experiment([config()], [Technology.JD], [Estimator.CNLS], [], estimate=offset)
    b = run_experiment([config()], [Technology.JD], [Estimator.CNLS], [], estimate=offset)

    assert a.model_dump() == b.model_dump()
    assert a.cells[0].value > 0.0

def test_failed_replication_leaves_cell_incomplete():
    def flaky(sample, tech, estimator, tau):
        if sample.rep == 1:
            raise NumericalFailure("solver gave up")
        return sample.true_f

    rep = run_experiment([config(n_reps=3)], [Technology.BP], [Estimator.CNLS], [], estimate=flaky)
    cell = rep.cells[0]

    assert not cell.complete
    assert cell.n_reps == 2
    assert cell.value == 0.0
    assert cell.failures == ["rep 1: NumericalFailure: solver gave up"]
    assert rep.incomplete == [cell]

def test_programming_errors_are_not_swallowed():
    def broken(sample, tech, estimator, tau):
        raise TypeError("unexpected argument")

    with pytest.raises(TypeError):
        run_experiment([config(n_reps=2)], [Technology.JD], [Estimator.CNLS], [], estimate=broken)

def test_experiment_needs_configs():
    with pytest.raises(ValueError):
        run_experiment([], ALL_TECHS, [Estimator.CNLS], [])

def test_table_has_one_column_per_sigma():
    rep = run_experiment([config(sigma=0.3), config(sigma=1.3)], [Technology.JD],
                         [Estimator.CER], [0.5], oracle=True)

    rows = to_table_rows(rep)
    tidy = to_tidy_rows(rep)

    assert len(rows) == 1
    assert rows[0]["sigma=0.3"] == 0.0
    assert rows[0]["sigma=1.3"] == 0.0
    assert rows[0]["tau"] == 0.5
    assert [row["sigma"] for row in tidy] == [0.3, 1.3]

def test_fitted_cnls_cell():
    rep = run_experiment([config(n_dmu=10, n_reps=1, sigma=0.3)], [Technology.JD], [Estimator.CNLS], [])
    cell = rep.cells[0]

    assert cell.complete
    assert cell.value is not None and np.isfinite(cell.value) and cell.value >= 0.0

# ---------------------- DESK-SCALE ORDERINGS ----------------------

@pytest.mark.slow
def test_scenario_one_expectile_beats_full_frontier_for_bp():
    cfg = DgpConfig(scenario=Scenario.S1, sigma=1.3, n_dmu=100, n_reps=10)

    rep = run_experiment([cfg], [Technology.BP], [Estimator.CNLS, Estimator.CER], [0.95])

    cer = rep.get("cer", Technology.BP, Scenario.S1, 1.3, 0.95).value
    cnls = rep.get("cnls", Technology.BP, Scenario.S1, 1.3).value
    assert cer < cnls

@pytest.mark.slow
@pytest.mark.parametrize("tau", [0.65, 0.80, 0.95])
def test_scenario_two_wgd_has_lowest_error(tau):
    cfg = DgpConfig(scenario=Scenario.S2, sigma=1.3, n_dmu=100, n_reps=10)

    rep = run_experiment([cfg], ALL_TECHS, [Estimator.CER], [tau])

    values = {tech: rep.get("cer", tech, Scenario.S2, 1.3, tau).value for tech in ALL_TECHS}
    assert values[Technology.WGD] == min(values.values())
