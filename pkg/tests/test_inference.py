import numpy as np
import pandas as pd
import pytest

from exceptions import DataValidationError, LeverageError, RankDeficiencyError
from inference import ate, best_linear_projection, format_table, stars, write_report_csv
from scores import ScoreVector, pseudo_outcomes
from simulate import MEAN_TRUE_CATE, generate, oracle_nuisances


def _hc3_by_loop(x, gamma):
    design = np.column_stack([np.ones(len(gamma)), x])
    bread = np.linalg.inv(design.T @ design)
    beta = bread @ design.T @ gamma
    meat = np.zeros((design.shape[1], design.shape[1]))
    for i in range(len(gamma)):
        row = design[i]
        leverage = row @ bread @ row
        residual = gamma[i] - row @ beta
        meat += np.outer(row, row) * residual ** 2 / (1 - leverage) ** 2
    return np.sqrt(np.diag(bread @ meat @ bread))


def test_affine_scores_are_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2))
    result = best_linear_projection(x, 1.0 - 2.0 * x[:, 0] + 0.5 * x[:, 1])
    np.testing.assert_allclose(result.coefficients, [1.0, -2.0, 0.5], atol=1e-10)
    np.testing.assert_allclose(result.hc3_se, 0.0, atol=1e-10)


def test_hc3_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 1))
    gamma = rng.normal(size=6)
    result = best_linear_projection(x, gamma)
    np.testing.assert_allclose(result.hc3_se, _hc3_by_loop(x, gamma), rtol=1e-10, atol=1e-12)


def test_intercept_only_equals_ate():
    gamma = np.random.default_rng(2).normal(size=25)
    result = best_linear_projection(np.empty((25, 0)), gamma)
    assert result.terms == ("intercept",)
    assert result.coefficients[0] == ate(gamma).estimate


def test_rank_deficiency_names_column():
    rng = np.random.default_rng(3)
    base = rng.normal(size=30)
    x = np.column_stack([base, np.ones(30)])
    with pytest.raises(RankDeficiencyError) as info:
        best_linear_projection(x, rng.normal(size=30), names=["age", "constant"])
    assert info.value.columns == ["constant"]


def test_leverage_one():
    # a dummy that is 1 for a single unit fits that unit exactly
    rng = np.random.default_rng(4)
    x = np.column_stack([rng.normal(size=10), np.eye(10)[:, 3]])
    with pytest.raises(LeverageError) as info:
        best_linear_projection(x, rng.normal(size=10))
    assert info.value.unit == 3


def test_too_few_units():
    with pytest.raises(DataValidationError):
        best_linear_projection(np.zeros((2, 1)), np.zeros(2))


def test_ate_constant():
    estimate, se = ate(np.full(8, 2.0))
    assert estimate == 2.0
    assert se == 0.0


def test_ate_standard_error():
    gamma = np.array([1.0, 2.0, 3.0, 6.0])
    estimate, se = ate(gamma)
    assert estimate == pytest.approx(3.0)
    assert se == pytest.approx(np.std(gamma, ddof=1) / 2.0)


def test_ate_catt_scores_use_treated():
    scores = ScoreVector(gamma=np.array([1.0, 0.0, 3.0]), weights=np.array([1.0, 0.0, 1.0]))
    assert ate(scores).estimate == pytest.approx(2.0)


@pytest.mark.slow
def test_ate_oracle_scores():
    data = generate(100_000, seed=21).dataset
    estimate, _ = ate(pseudo_outcomes(data, oracle_nuisances(data)))
    assert estimate == pytest.approx(MEAN_TRUE_CATE, abs=0.05)


@pytest.mark.parametrize("p, mark", [(0.0005, "***"), (0.005, "**"), (0.03, "*"), (0.2, "")])
def test_stars(p, mark):
    assert stars(p) == mark


def test_table_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 2))
    gamma = 1.0 + x[:, 0] + rng.normal(size=50)
    result = best_linear_projection(x, gamma, names=["age", "aps1"])
    summary = ate(gamma)
    table = format_table(result, summary)
    assert "intercept" in table and "age" in table and "aps1" in table
    assert "HC3" in table
    df = pd.read_csv(write_report_csv(result, summary, tmp_path / "blp.csv"))
    assert list(df.columns) == ["term", "estimate", "se", "p_normal"]
    assert df["term"].tolist() == ["intercept", "age", "aps1", "ATE"]
    assert df["estimate"].iloc[-1] == pytest.approx(summary.estimate)


@pytest.mark.parametrize("seed", range(20))
def test_hc3_matches_loop_on_random_designs(seed):
    rng = np.random.default_rng(100 + seed)
    n, d = int(rng.integers(10, 60)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d)
    gamma = x @ rng.normal(size=d) + rng.standard_t(4, size=n)
    result = best_linear_projection(x, gamma)
    np.testing.assert_allclose(result.hc3_se, _hc3_by_loop(x, gamma), rtol=1e-8, atol=1e-12)


def test_rescaled_covariates_rescale_slopes_and_errors():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(45, 2))
    gamma = 0.5 + x @ [1.0, -2.0] + rng.normal(size=45)
    scale = np.array([4.0, 0.25])
    base = best_linear_projection(x, gamma)
    rescaled = best_linear_projection(x * scale, gamma)
    factor = np.r_[1.0, 1.0 / scale]
    np.testing.assert_allclose(rescaled.coefficients, base.coefficients * factor, rtol=1e-10)
    np.testing.assert_allclose(rescaled.hc3_se, base.hc3_se * factor, rtol=1e-10)


def test_row_order_does_not_change_projection():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(35, 3))
    gamma = x[:, 0] - x[:, 2] + rng.normal(size=35)
    order = rng.permutation(35)
    base = best_linear_projection(x, gamma)
    shuffled = best_linear_projection(x[order], gamma[order])
    np.testing.assert_allclose(shuffled.coefficients, base.coefficients, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(shuffled.hc3_se, base.hc3_se, rtol=1e-10)


def test_column_order_permutes_coefficients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 3))
    gamma = rng.normal(size=30)
    columns = [2, 0, 1]
    base = best_linear_projection(x, gamma)
    swapped = best_linear_projection(x[:, columns], gamma)
    index = np.r_[0, 1 + np.array(columns)]
    np.testing.assert_allclose(swapped.coefficients, base.coefficients[index], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(swapped.hc3_se, base.hc3_se[index], rtol=1e-10)
