import numpy as np
import pandas as pd
import pytest

from bridge import BridgeModel
from core import Dataset
from exceptions import DataValidationError, EmptyArmError, FoldError
from models.config import BridgeHyper
from scores import (CattNuisances, NuisancePredictions, ScoreKind, ScoreVector, catt_loss, catt_pseudo,
                    crossfit_catt_nuisances, crossfit_nuisances, pseudo_outcomes, read_scores_csv, write_scores_csv)
from simulate import MEAN_TRUE_CATE, generate, oracle_nuisances


SINGLE_POINT = BridgeHyper(lambda_primal_grid=[0.01], lambda_adversary_grid=[0.1], primal_bandwidth_multipliers=[1.0],
                           adversary_bandwidth_multipliers=[1.0])


def _pair(a, y):
    return Dataset(y=y, a=a, x=np.zeros((2, 1)), z=np.zeros(2), w=np.zeros(2))


def test_score_arithmetic_treated():
    data = _pair(a=[1, 0], y=[3.0, 0.0])
    nuis = NuisancePredictions(oof_h0=np.array([0.5, 0.0]), oof_h1=np.array([1.0, 0.0]), oof_q=np.array([2.0, 1.0]))
    assert pseudo_outcomes(data, nuis).gamma[0] == pytest.approx(4.5)


def test_score_zero_residual_control():
    data = _pair(a=[0, 1], y=[0.7, 0.0])
    nuis = NuisancePredictions(oof_h0=np.array([0.7, 0.0]), oof_h1=np.array([1.9, 0.0]), oof_q=np.array([3.0, 1.0]))
    assert pseudo_outcomes(data, nuis).gamma[0] == pytest.approx(1.9 - 0.7)


def test_clipping_flags_units():
    data = _pair(a=[1, 0], y=[1.0, 1.0])
    nuis = NuisancePredictions(oof_h0=np.zeros(2), oof_h1=np.zeros(2), oof_q=np.array([80.0, -1.0]))
    scores = pseudo_outcomes(data, nuis, clip=50.0)
    assert scores.clip_applied
    np.testing.assert_array_equal(scores.clipped, [True, True])
    np.testing.assert_allclose(scores.gamma, [50.0, 0.0])


def test_no_clip_keeps_extreme_q():
    data = _pair(a=[1, 0], y=[1.0, 1.0])
    nuis = NuisancePredictions(oof_h0=np.zeros(2), oof_h1=np.zeros(2), oof_q=np.array([80.0, 1.0]))
    scores = pseudo_outcomes(data, nuis)
    assert not scores.clip_applied
    assert scores.gamma[0] == 80.0


def test_score_vector_rejects_non_finite():
    with pytest.raises(DataValidationError):
        ScoreVector(gamma=np.array([1.0, np.nan]))


@pytest.mark.slow
def test_oracle_scores_mean_is_mean_cate():
    data = generate(100_000, seed=5).dataset
    scores = pseudo_outcomes(data, oracle_nuisances(data))
    assert scores.gamma.mean() == pytest.approx(MEAN_TRUE_CATE, abs=0.05)


def test_crossfit_predictions_come_from_other_fold():
    data = generate(40, seed=1).dataset
    nuis = crossfit_nuisances(data, n_folds=2, grids=SINGLE_POINT, seed=0)
    assert len(nuis.fold_bridges) == 2
    for fb in nuis.fold_bridges:
        test_index = nuis.folds.test_index(fb.fold)
        assert set(fb.train_index).isdisjoint(test_index)
        assert len(fb.train_index) == 20
        held_out = data.subset(test_index)
        np.testing.assert_array_equal(nuis.oof_h1[test_index], fb.h1.predict(held_out))


def test_crossfit_deterministic():
    data = generate(40, seed=2).dataset
    first = crossfit_nuisances(data, 2, SINGLE_POINT, seed=4)
    second = crossfit_nuisances(data, 2, SINGLE_POINT, seed=4)
    np.testing.assert_array_equal(first.oof_q, second.oof_q)
    np.testing.assert_array_equal(first.oof_h0, second.oof_h0)


def test_crossfit_fold_without_arm_units():
    a = np.zeros(12, dtype=int)
    a[:2] = 1
    rng = np.random.default_rng(0)
    data = Dataset(y=rng.normal(size=12), a=a, x=rng.normal(size=(12, 1)), z=rng.normal(size=12),
                   w=rng.normal(size=12))
    with pytest.raises((FoldError, EmptyArmError)):
        crossfit_nuisances(data, 3, SINGLE_POINT, seed=0)


def test_catt_pseudo_weights_treated():
    data = _pair(a=[1, 0], y=[2.0, 5.0])
    nuis = CattNuisances(oof_h=np.array([0.5, 1.0]), oof_q=np.array([1.0, 1.0]))
    scores = catt_pseudo(data, nuis)
    assert scores.kind is ScoreKind.CATT
    np.testing.assert_array_equal(scores.weights, [1.0, 0.0])
    assert scores.gamma[0] == pytest.approx(1.5)


def test_catt_pseudo_needs_treated():
    data = _pair(a=[0, 0], y=[1.0, 2.0])
    with pytest.raises(EmptyArmError):
        catt_pseudo(data, CattNuisances(oof_h=np.zeros(2), oof_q=np.ones(2)))


def test_catt_loss_treated_term_vanishes_at_interpolation():
    data = _pair(a=[1, 0], y=[2.0, 5.0])
    nuis = CattNuisances(oof_h=np.array([0.5, 5.0]), oof_q=np.array([1.0, 3.0]))
    # control residual is 0 and mu interpolates the treated unit
    assert catt_loss(np.array([1.5, 0.0]), data, nuis) == pytest.approx(0.0)


def test_crossfit_catt_runs():
    data = generate(40, seed=3).dataset
    nuis = crossfit_catt_nuisances(data, 2, SINGLE_POINT, seed=1)
    assert np.all(np.isfinite(nuis.oof_h)) and np.all(np.isfinite(nuis.oof_q))
    assert len(nuis.bridges()) == 4


def test_scores_csv(tmp_path):
    scores = ScoreVector(gamma=np.array([1.0, -2.5, 0.25]), clipped=np.array([False, True, False]),
                         fold_of=np.array([0, 1, 0]), clip_applied=True)
    path = write_scores_csv(scores, tmp_path / "scores.csv")
    df = pd.read_csv(path)
    assert list(df.columns) == ["unit_id", "gamma", "fold", "clipped"]
    restored = read_scores_csv(path)
    np.testing.assert_array_equal(restored.gamma, scores.gamma)
    np.testing.assert_array_equal(restored.fold_of, scores.fold_of)


def test_perturbing_one_outcome_leaves_its_fold_model_unchanged():
    data = generate(60, seed=6).dataset
    nuis = crossfit_nuisances(data, 3, SINGLE_POINT, seed=2)
    j = 7
    y = data.y.copy()
    y[j] += 5.0
    perturbed = Dataset(y=y, a=data.a, x=data.x, z=data.z, w=data.w)
    refit = crossfit_nuisances(perturbed, 3, SINGLE_POINT, seed=2)
    np.testing.assert_array_equal(refit.folds.fold_of, nuis.folds.fold_of)
    own_fold = nuis.folds.fold_of[j]
    own = nuis.folds.test_index(own_fold)
    assert j in own
    for name in ("oof_h0", "oof_h1", "oof_q"):
        np.testing.assert_array_equal(getattr(refit, name)[own], getattr(nuis, name)[own])
    np.testing.assert_array_equal(refit.fold_bridges[own_fold].h1.alpha, nuis.fold_bridges[own_fold].h1.alpha)
    others = np.setdiff1d(np.arange(data.n), own)
    changed = (refit.oof_h0[others] != nuis.oof_h0[others]) | (refit.oof_h1[others] != nuis.oof_h1[others])
    assert np.any(changed)


def _random_nuisances(n, seed):
    rng = np.random.default_rng(seed)
    data = Dataset(y=rng.normal(size=n), a=np.arange(n) % 2, x=rng.normal(size=(n, 2)), z=rng.normal(size=n),
                   w=rng.normal(size=n))
    nuis = NuisancePredictions(oof_h0=rng.normal(size=n), oof_h1=rng.normal(size=n), oof_q=rng.uniform(1, 3, size=n))
    return data, nuis


def test_scores_affine_in_outcome():
    data, nuis = _random_nuisances(30, 0)
    base = pseudo_outcomes(data, nuis).gamma
    slope = pseudo_outcomes(Dataset(y=data.y + 1.0, a=data.a, x=data.x, z=data.z, w=data.w), nuis).gamma - base
    for shift in (-2.0, 0.5, 3.0):
        shifted = Dataset(y=data.y + shift, a=data.a, x=data.x, z=data.z, w=data.w)
        np.testing.assert_allclose(pseudo_outcomes(shifted, nuis).gamma, base + shift * slope, atol=1e-10)


def test_doubling_residuals_doubles_residual_term():
    data, nuis = _random_nuisances(30, 1)
    h_observed = np.where(data.a == 1, nuis.oof_h1, nuis.oof_h0)
    contrast = nuis.oof_h1 - nuis.oof_h0
    doubled = Dataset(y=h_observed + 2 * (data.y - h_observed), a=data.a, x=data.x, z=data.z, w=data.w)
    np.testing.assert_allclose(pseudo_outcomes(doubled, nuis).gamma - contrast,
                               2 * (pseudo_outcomes(data, nuis).gamma - contrast), atol=1e-12)


def test_zero_q_leaves_bridge_contrast():
    data, nuis = _random_nuisances(20, 2)
    zero_q = NuisancePredictions(oof_h0=nuis.oof_h0, oof_h1=nuis.oof_h1, oof_q=np.zeros(20))
    np.testing.assert_array_equal(pseudo_outcomes(data, zero_q).gamma, nuis.oof_h1 - nuis.oof_h0)


@pytest.mark.parametrize("seed", range(10))
def test_catt_loss_splits_into_treated_regression_and_constant(seed):
    rng = np.random.default_rng(seed)
    n = 25
    a = rng.integers(0, 2, n)
    a[:2] = [0, 1]
    data = Dataset(y=rng.normal(size=n), a=a, x=rng.normal(size=(n, 1)), z=rng.normal(size=n), w=rng.normal(size=n))
    nuis = CattNuisances(oof_h=rng.normal(size=n), oof_q=rng.uniform(0, 4, size=n))
    mu = rng.normal(size=n)
    treated, control = a == 1, a == 0
    residual = data.y - nuis.oof_h
    expected = (np.sum((residual[treated] - mu[treated]) ** 2) + np.sum((nuis.oof_q * residual)[control] ** 2)) / n
    assert catt_loss(mu, data, nuis) == pytest.approx(expected, abs=1e-10)
    scores = catt_pseudo(data, nuis)
    assert np.sum(scores.weights * (scores.gamma - mu) ** 2) == pytest.approx(
        np.sum((residual[treated] - mu[treated]) ** 2), abs=1e-10)


def test_crossfit_catt_rejects_non_finite_predictions(monkeypatch):
    data = generate(40, seed=3).dataset
    monkeypatch.setattr(BridgeModel, "predict", lambda self, held_out: np.full(held_out.n, np.nan))
    with pytest.raises(DataValidationError, match="out-of-fold"):
        crossfit_catt_nuisances(data, 2, SINGLE_POINT, seed=1)
