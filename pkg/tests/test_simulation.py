"""Tests for data generation and the replication engine"""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from pooled_corr.errors import DatasetError, DegenerateVarianceError, InvalidInputError
from pooled_corr.schemas import CiMethod, RunConfig, Scenario, SimModel
from pooled_corr.simulation import (
    aggregate_results,
    beta_moments,
    beta_params,
    default_grid,
    draw_k1_pair_sample,
    draw_study_r,
    draw_study_r_z,
    draw_true_rho,
    draw_true_rhos,
    k1_grid,
    lognormal_normal_rho,
    load_grid,
    mc_se,
    molloy_replica_scenarios,
    results_frame,
    run_scenario,
    save_grid,
    size_settings,
)
from pooled_corr.stats_core import truncnorm_mean_shift


# ---------------------------------------------------------------------------
# Study-level distributions
# ---------------------------------------------------------------------------

def test_beta_params_symmetric():
    params = beta_params(0.0, 0.04)
    assert params.a == pytest.approx(12.0, abs=1e-10)
    assert params.b == pytest.approx(12.0, abs=1e-10)


@pytest.mark.parametrize("rho, tau2", [(0.0, 0.04), (0.5, 0.0256), (0.9, 0.16), (-0.3, 0.0256)])
def test_beta_moment_identities(rho, tau2):
    mean, var = beta_moments(beta_params(rho, tau2))
    assert mean == pytest.approx(rho, abs=1e-10)
    assert var == pytest.approx(tau2, abs=1e-10)


def test_beta_params_skewed_example():
    params = beta_params(0.5, 0.0256)
    assert params.a == pytest.approx(21.22265625, abs=1e-10)
    assert params.b == pytest.approx(7.07421875, abs=1e-10)


def test_beta_params_invalid():
    with pytest.raises(DegenerateVarianceError):
        beta_params(0.0, 1.0)
    with pytest.raises(InvalidInputError):
        beta_params(0.0, 0.0)


def test_zero_heterogeneity_returns_rho_without_drawing():
    rng = np.random.default_rng(3)
    for model in (SimModel.TRUNCNORM, SimModel.BETA):
        assert draw_true_rho(model, 0.6, 0.0, rng) == 0.6
    assert rng.random() == np.random.default_rng(3).random()


def test_truncnorm_draws_match_shifted_mean():
    rng = np.random.default_rng(11)
    draws = draw_true_rhos(SimModel.TRUNCNORM, 0.9, 0.4, 10 ** 6, rng)
    assert np.all(np.abs(draws) <= 0.999)
    expected = 0.9 + truncnorm_mean_shift(0.9, 0.4, -0.999, 0.999)
    sd = stats.truncnorm((-0.999 - 0.9) / 0.4, (0.999 - 0.9) / 0.4, loc=0.9, scale=0.4).std()
    assert abs(draws.mean() - expected) < 3 * sd / 1000


def test_beta_draws_match_moments():
    rng = np.random.default_rng(12)
    draws = draw_true_rhos(SimModel.BETA, 0.5, 0.16, 10 ** 6, rng)
    n = draws.size
    assert abs(draws.mean() - 0.5) < 3 * draws.std() / math.sqrt(n)
    sq = (draws - draws.mean()) ** 2
    assert abs(draws.var() - 0.0256) < 3 * sq.std() / math.sqrt(n)


def test_rejection_budget_exhaustion():
    with pytest.raises(DegenerateVarianceError):
        draw_true_rhos(SimModel.TRUNCNORM, 50.0, 0.01, 3, np.random.default_rng(0), budget=10)


def test_k1_models_have_no_study_distribution():
    with pytest.raises(InvalidInputError):
        draw_true_rhos(SimModel.NORMAL_K1, 0.3, 0.1, 2, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Within-study generation
# ---------------------------------------------------------------------------

def test_draw_study_r_shape_and_errors():
    rng = np.random.default_rng(5)
    study = draw_study_r(0.4, 30, rng)
    assert study.n == 30
    assert -1.0 <= study.r <= 1.0
    with pytest.raises(InvalidInputError):
        draw_study_r(0.4, 3, rng)
    with pytest.raises(InvalidInputError):
        draw_study_r(1.0, 30, rng)


def test_draw_study_r_centred_at_zero():
    rng = np.random.default_rng(21)
    rs = np.array([draw_study_r(0.0, 20, rng).r for _ in range(20_000)])
    assert abs(rs.mean()) < 3 * rs.std() / math.sqrt(rs.size)


@pytest.mark.slow
def test_draw_study_r_small_sample_bias():
    rng = np.random.default_rng(22)
    rs = np.array([draw_study_r(0.3, 20, rng).r for _ in range(10 ** 5)])
    expected = 0.3 - 0.3 * (1 - 0.09) / (2 * 19)
    assert abs(rs.mean() - expected) < 3 * rs.std() / math.sqrt(rs.size)


@pytest.mark.slow
def test_draw_study_r_fisher_variance():
    rng = np.random.default_rng(23)
    zs = np.arctanh([draw_study_r(0.3, 50, rng).r for _ in range(10 ** 5)])
    assert zs.var() == pytest.approx(1 / 47, rel=0.05)


def test_draw_study_r_z_variance():
    rng = np.random.default_rng(24)
    zs = np.arctanh([draw_study_r_z(0.5, 53, rng).r for _ in range(20_000)])
    assert zs.mean() == pytest.approx(math.atanh(0.5), abs=0.005)
    assert zs.var() == pytest.approx(1 / 50, rel=0.05)


def test_lognormal_marginals_are_standardized():
    rng = np.random.default_rng(31)
    xs, _ = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.0, 10 ** 6, rng)
    n = xs.size
    assert abs(xs.mean()) < 3 * xs.std() / math.sqrt(n)
    # fourth central moment of the standardized LN(0, 1) law
    mu4 = math.exp(4) + 2 * math.exp(3) + 3 * math.exp(2) - 3
    assert abs(xs.var() - 1.0) < 3 * math.sqrt((mu4 - 1) / n)


def test_lognormal_independent_components():
    rng = np.random.default_rng(32)
    xs, ys = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.0, 10 ** 5, rng)
    assert abs(np.corrcoef(xs, ys)[0, 1]) < 0.01


def test_lognormal_mixing_correlation():
    rng = np.random.default_rng(33)
    xs, ys = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.7, 10 ** 6, rng)
    assert np.corrcoef(xs, ys)[0, 1] == pytest.approx(0.7, abs=0.015)
    assert ys.var() == pytest.approx(1.0, abs=0.05)


def test_lognormal_mixing_is_skewed_in_both_components():
    rng = np.random.default_rng(35)
    xs, ys = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.7, 10 ** 5, rng)
    # median of the standardized LN(0, 1) law sits below its zero mean
    median = (1 - math.exp(0.5)) / math.sqrt(math.e ** 2 - math.e)
    assert np.median(xs) == pytest.approx(median, abs=0.015)
    assert np.median(ys) < -0.1


def test_lognormal_copula_correlation():
    rng = np.random.default_rng(36)
    xs, ys = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.7, 10 ** 6, rng, dependence="copula")
    assert np.corrcoef(xs, ys)[0, 1] == pytest.approx(0.7, abs=0.015)


def test_lognormal_dependence_options():
    rng = np.random.default_rng(37)
    # mixing has no calibration limit
    xs, ys = draw_k1_pair_sample(SimModel.LOGNORMAL_K1, -0.9, 1000, rng)
    assert np.corrcoef(xs, ys)[0, 1] < -0.5
    with pytest.raises(DegenerateVarianceError):
        draw_k1_pair_sample(SimModel.LOGNORMAL_K1, -0.9, 1000, rng, dependence="copula")
    with pytest.raises(InvalidInputError):
        draw_k1_pair_sample(SimModel.LOGNORMAL_K1, 0.5, 1000, rng, dependence="rank")


def test_k1_grid_forwards_lognormal_dependence():
    grid = k1_grid(reps=5, lognormal_dependence="copula")
    assert {s.lognormal_dependence for s in grid} == {"copula"}
    assert {s.lognormal_dependence for s in k1_grid(reps=5)} == {"mixing"}


def test_lognormal_copula_cell_covers_more_than_mixing():
    cells = {
        dep: Scenario(model=SimModel.LOGNORMAL_K1, rho=0.7, k=1, n_vector=(100,), reps=400, seed=41,
                      lognormal_dependence=dep)
        for dep in ("mixing", "copula")
    }
    coverage = {dep: run_scenario(cell).methods["IPD"].coverage for dep, cell in cells.items()}
    assert coverage["mixing"] < 0.62
    assert coverage["copula"] > coverage["mixing"]


def test_lognormal_calibration_identity():
    rho_n = lognormal_normal_rho(0.7)
    assert (math.exp(rho_n) - 1) / (math.e - 1) == pytest.approx(0.7)
    with pytest.raises(DegenerateVarianceError):
        lognormal_normal_rho(-0.6)


def test_normal_pair_sample():
    rng = np.random.default_rng(34)
    xs, ys = draw_k1_pair_sample(SimModel.NORMAL_K1, 0.5, 10 ** 5, rng)
    assert np.corrcoef(xs, ys)[0, 1] == pytest.approx(0.5, abs=0.01)
    with pytest.raises(InvalidInputError):
        draw_k1_pair_sample(SimModel.BETA, 0.5, 10, rng)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def test_mc_se():
    assert mc_se(0.95, 10_000) == pytest.approx(0.00218, abs=1e-5)
    assert mc_se(0.0, 10) == 0.0
    assert mc_se(1.0, 10) == 0.0
    assert mc_se(0.5, 4) == 0.25
    with pytest.raises(InvalidInputError):
        mc_se(1.5, 10)
    with pytest.raises(InvalidInputError):
        mc_se(0.5, 0)


def _cell(model=SimModel.TRUNCNORM, tau=0.16, reps=40, methods=(CiMethod.HOVZ, CiMethod.HS, CiMethod.KH, CiMethod.WBS1), **kw):
    return Scenario(model=model, rho=0.3, tau=tau, k=5, n_vector=(15, 16, 19, 23, 27), reps=reps,
                    seed=77, methods=methods, **kw)


def test_run_scenario_summary_fields():
    result = run_scenario(_cell())
    assert list(result.methods) == ["HOVZ", "HS", "KH", "WBS1"]
    for summary in result.methods.values():
        assert 0.0 <= summary.coverage <= 1.0
        assert 0.0 <= summary.mean_length <= 2.0
        assert summary.failures == 0
        assert summary.reps_effective == 40
        assert summary.mc_se == pytest.approx(mc_se(summary.coverage, 40))
    assert math.isnan(result.methods["HS"].var_rmse)
    assert result.methods["KH"].var_rmse >= 0


def _frame(result, drop=()):
    return results_frame([result]).drop(columns=list(drop))


def test_run_scenario_is_deterministic():
    first = _frame(run_scenario(_cell()))
    pd.testing.assert_frame_equal(_frame(run_scenario(_cell())), first)


def test_run_scenario_independent_of_workers():
    cell = _cell(reps=24)
    pd.testing.assert_frame_equal(_frame(run_scenario(cell, threads=1)), _frame(run_scenario(cell, threads=2)))


def test_models_agree_without_heterogeneity():
    a = _frame(run_scenario(_cell(model=SimModel.TRUNCNORM, tau=0.0)), drop=["model"])
    b = _frame(run_scenario(_cell(model=SimModel.BETA, tau=0.0)), drop=["model"])
    pd.testing.assert_frame_equal(a, b)


def test_unavailable_method_counts_failures():
    cell = Scenario(model=SimModel.BETA, rho=0.2, tau=0.16, k=3, n_vector=(20, 30, 40), reps=10,
                    methods=(CiMethod.KH, CiMethod.WBS2))
    result = run_scenario(cell)
    assert result.methods["KH"].failures == 0
    wbs = result.methods["WBS2"]
    assert wbs.failures == 10
    assert wbs.reps_effective == 0
    assert math.isnan(wbs.coverage)


def test_z_draw_cell_runs():
    result = run_scenario(_cell(within_study="z"))
    assert result.methods["KH"].reps_effective == 40


def test_k1_cell_reports_ipd():
    cell = Scenario(model=SimModel.NORMAL_K1, rho=0.3, k=1, n_vector=(50,), reps=50, seed=1)
    result = run_scenario(cell)
    assert list(result.methods) == ["IPD"]
    assert 0.0 <= result.methods["IPD"].coverage <= 1.0


@pytest.mark.parametrize("threads", [0, -2])
def test_run_scenario_rejects_bad_worker_count(threads):
    cell = Scenario(model=SimModel.NORMAL_K1, rho=0.3, k=1, n_vector=(20,), reps=5, seed=1)
    with pytest.raises(InvalidInputError, match="threads"):
        run_scenario(cell, threads)


def test_run_config_rejects_zero_threads():
    with pytest.raises(ValueError, match="threads"):
        RunConfig(subcommand="simulate", threads=0)
    assert RunConfig(subcommand="simulate", threads=-1).threads == -1


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(model=SimModel.TRUNCNORM, rho=0.3, k=2, n_vector=(20,))
    with pytest.raises(ValueError):
        Scenario(model=SimModel.NORMAL_K1, rho=0.3, k=2, n_vector=(20, 20))
    with pytest.raises(ValueError):
        Scenario(model=SimModel.BETA, rho=0.9, tau=0.5, k=1, n_vector=(20,))


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

def test_default_grid_cardinality():
    grid = default_grid(reps=10)
    assert len(grid) == 480
    assert len({s.scenario_id for s in grid}) == 480
    assert {s.k for s in grid} == {5, 10, 20, 40}


def test_size_settings():
    settings = {s.pattern: s.n_vector for s in size_settings()}
    assert len(settings) == 10
    assert np.mean(settings["large-K5"]) == 80
    assert np.mean(settings["small-K40"]) == 20
    assert np.mean(settings["special-K20"]) == 300
    assert settings["special-K5"] == (23, 19, 250, 330, 29)


def test_default_grid_models_share_seed_schedule():
    grid = default_grid(base_seed=100, reps=10)
    truncnorm = [s.seed for s in grid if s.model is SimModel.TRUNCNORM]
    beta = [s.seed for s in grid if s.model is SimModel.BETA]
    assert truncnorm == beta
    assert len(set(truncnorm)) == 240


def test_k1_and_molloy_grids():
    assert len(k1_grid(reps=5)) == 12
    replica = molloy_replica_scenarios(reps=5)
    assert [s.model for s in replica] == [SimModel.TRUNCNORM, SimModel.BETA]
    assert replica[0].k == 16
    assert replica[0].tau ** 2 == pytest.approx(0.012)


def test_grid_csv_round_trip(tmp_path):
    cells = default_grid(reps=7)[:3] + k1_grid(reps=7)[:1]
    path = tmp_path / "grid.csv"
    save_grid(cells, path)
    loaded = load_grid(path)
    assert [s.scenario_id for s in loaded] == [s.scenario_id for s in cells]
    assert [s.n_vector for s in loaded] == [s.n_vector for s in cells]
    assert [s.seed for s in loaded] == [s.seed for s in cells]


def test_load_grid_errors(tmp_path):
    missing = tmp_path / "missing.csv"
    missing.write_text("model,rho\nBETA,0.3\n")
    with pytest.raises(DatasetError):
        load_grid(missing)
    bad = tmp_path / "bad.csv"
    bad.write_text("model,rho,tau,n_vector\nBETA,0.3,0.1,20;30\nBETA,0.3,0.1,20;2\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_grid(bad)
    with pytest.raises(DatasetError):
        load_grid(tmp_path / "nope.csv")


def test_aggregate_results():
    results = [
        run_scenario(_cell(reps=10, methods=(CiMethod.KH,))),
        run_scenario(Scenario(model=SimModel.TRUNCNORM, rho=0.3, tau=0.16, k=10, n_vector=(20,) * 10,
                              reps=10, seed=5, methods=(CiMethod.KH,))),
    ]
    frame = aggregate_results(results)
    assert len(frame) == 1
    row = frame.iloc[0]
    assert row["cells"] == 2
    expected = np.mean([r.methods["KH"].coverage for r in results])
    assert row["coverage"] == pytest.approx(expected)
