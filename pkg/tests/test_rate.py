import numpy as np
import pandas as pd
import pytest

from exceptions import DataValidationError
from models.config import BridgeHyper, CateConfig, Direction, PipelineConfig
from rate import (autoc, bootstrap_autoc, evaluate_plearner, read_rate_json, split_train_eval, toc_curve,
                  write_rate_json, write_toc_csv)
from simulate import generate


def test_two_unit_curve():
    curve = toc_curve([2.0, 1.0], [3.0, 1.0], Direction.benefit_desc)
    np.testing.assert_array_equal(curve.q, [0.5, 1.0])
    np.testing.assert_array_equal(curve.toc, [1.0, 0.0])
    assert autoc(curve) == 0.5


def test_two_unit_curve_reversed():
    curve = toc_curve([2.0, 1.0], [3.0, 1.0], Direction.harm_asc)
    np.testing.assert_array_equal(curve.toc, [-1.0, 0.0])


def test_constant_priorities_give_zero_curve():
    gamma = np.random.default_rng(0).normal(size=37)
    curve = toc_curve(np.full(37, 0.3), gamma)
    np.testing.assert_array_equal(curve.toc, np.zeros(37))
    assert autoc(curve) == 0.0


def test_last_point_is_zero():
    rng = np.random.default_rng(1)
    for _ in range(5):
        curve = toc_curve(rng.normal(size=50), rng.normal(size=50))
        assert curve.toc[-1] == 0.0


def test_ties_are_averaged():
    # the tied pair cannot be ordered, so the first prefix sees their mean
    curve = toc_curve([1.0, 1.0, 0.0], [4.0, 0.0, 2.0])
    np.testing.assert_allclose(curve.toc, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("transform", [lambda p: p ** 3, np.exp])
def test_monotone_transform_invariance(transform):
    rng = np.random.default_rng(2)
    priorities, gamma = rng.normal(size=200), rng.normal(size=200)
    assert autoc(toc_curve(transform(priorities), gamma)) == pytest.approx(autoc(toc_curve(priorities, gamma)),
                                                                             abs=1e-12)


def test_shift_invariance():
    rng = np.random.default_rng(3)
    priorities, gamma = rng.normal(size=100), rng.normal(size=100)
    np.testing.assert_allclose(toc_curve(priorities, gamma + 7.5).toc, toc_curve(priorities, gamma).toc, atol=1e-10)


def test_zero_curve_autoc():
    curve = toc_curve(np.arange(4.0), np.full(4, 2.0))
    assert autoc(curve) == 0.0


def test_bootstrap_constant_scores():
    priorities = np.random.default_rng(4).normal(size=30)
    assert bootstrap_autoc(priorities, np.full(30, 2.0), n_boot=50, seed=0) == pytest.approx(0.0, abs=1e-12)


def test_bootstrap_deterministic():
    rng = np.random.default_rng(5)
    priorities, gamma = rng.normal(size=80), rng.normal(size=80)
    assert bootstrap_autoc(priorities, gamma, 100, seed=9) == bootstrap_autoc(priorities, gamma, 100, seed=9)


def test_bootstrap_independent_of_workers():
    rng = np.random.default_rng(6)
    priorities, gamma = rng.normal(size=40), rng.normal(size=40)
    assert bootstrap_autoc(priorities, gamma, 20, seed=1, n_jobs=1) == bootstrap_autoc(priorities, gamma, 20, seed=1,
                                                                                       n_jobs=2)


@pytest.mark.slow
def test_null_priorities_within_three_se():
    covered = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        priorities, gamma = rng.normal(size=500), rng.normal(size=500)
        value = autoc(toc_curve(priorities, gamma))
        covered += abs(value) <= 3 * bootstrap_autoc(priorities, gamma, 1000, seed=seed)
    assert covered >= 38


def test_split_sizes():
    data = generate(400, seed=0).dataset
    train, evaluation = split_train_eval(data, 0.5, seed=1)
    assert train.n == 200 and evaluation.n == 200
    assert abs(train.n_treated - evaluation.n_treated) <= 1


def test_evaluate_small(tmp_path):
    data = generate(120, seed=1).dataset
    pipeline = PipelineConfig(n_folds=2, bridge=BridgeHyper.desk(), cate=CateConfig(lambda_grid=[0.1], n_splits=2))
    report = evaluate_plearner(data, 0.5, pipeline, seed=3, direction=Direction.harm_asc, n_boot=20)
    assert report.n_eval == 60
    assert report.toc.toc[-1] == 0.0
    assert report.autoc_se >= 0.0
    write_rate_json(report, tmp_path / "rate.json")
    doc = read_rate_json(tmp_path / "rate.json")
    assert doc.autoc == report.autoc and doc.direction == "harm_asc"
    toc = pd.read_csv(write_toc_csv(report, tmp_path / "toc.csv"))
    assert list(toc.columns) == ["q", "toc"]
    assert len(toc) == 60


@pytest.mark.parametrize("priorities, gamma", [([np.nan, 1.0, 2.0], [1.0, 2.0, 3.0]),
                                               ([0.0, np.inf, 2.0], [1.0, 2.0, 3.0]),
                                               ([0.0, 1.0, 2.0], [1.0, np.nan, 3.0])])
def test_toc_rejects_non_finite_input(priorities, gamma):
    with pytest.raises(DataValidationError, match="NaN"):
        toc_curve(priorities, gamma)


def test_toc_needs_two_units():
    with pytest.raises(DataValidationError, match="at least 2"):
        toc_curve([1.0], [1.0])


def test_toc_length_mismatch():
    with pytest.raises(DataValidationError):
        toc_curve([1.0, 2.0, 3.0], [1.0, 2.0])
