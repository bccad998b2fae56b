from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple
import enum
import logging
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from bridge import BridgeKind, BridgeModel, fit_bridge, select_hyper
from core import Dataset, FoldAssignment, assign_folds
from exceptions import DataValidationError, EmptyArmError, FoldError
from models.config import BridgeHyper


logger = logging.getLogger(__name__)


class ScoreKind(str, enum.Enum):
    ATE = "ate"
    CATT = "catt"


@dataclass(frozen=True)
class ScoreVector:
    gamma: np.ndarray
    kind: ScoreKind = ScoreKind.ATE
    clip_applied: bool = False
    clipped: Optional[np.ndarray] = None
    fold_of: Optional[np.ndarray] = None
    # CATT scores carry unit weights: only treated units enter the final-stage loss
    weights: Optional[np.ndarray] = None
    q_max: Optional[float] = None

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).ravel()
        if not np.all(np.isfinite(gamma)):
            raise DataValidationError("pseudo-outcomes must be finite")
        object.__setattr__(self, "gamma", gamma)

    def __len__(self) -> int:
        return self.gamma.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def active_index(self) -> np.ndarray:
        if self.weights is None:
            return np.arange(self.n)
        return np.flatnonzero(self.weights > 0)


def gamma_values(gamma) -> np.ndarray:
    if isinstance(gamma, ScoreVector):
        return gamma.gamma
    return np.asarray(gamma, dtype=float).ravel()


@dataclass(frozen=True)
class NuisancePredictions:
    """out-of-fold bridge values per unit: h(W_i, 0, X_i), h(W_i, 1, X_i) and q(Z_i, A_i, X_i)"""
    oof_h0: np.ndarray
    oof_h1: np.ndarray
    oof_q: np.ndarray


@dataclass(frozen=True)
class FoldBridges:
    fold: int
    train_index: np.ndarray
    h0: BridgeModel
    h1: BridgeModel
    q0: BridgeModel
    q1: BridgeModel

    def models(self) -> Tuple[BridgeModel, ...]:
        return self.h0, self.h1, self.q0, self.q1


@dataclass(frozen=True)
class CrossfitNuisances(NuisancePredictions):
    folds: FoldAssignment
    fold_bridges: Tuple[FoldBridges, ...]

    def bridges(self):
        return [m for fb in self.fold_bridges for m in fb.models()]


def _fold_seeds(seed: int, n_folds: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_folds)]


def _require_complete(**predictions: np.ndarray):
    for name, values in predictions.items():
        if not np.all(np.isfinite(values)):
            raise DataValidationError(f"out-of-fold {name} predictions are incomplete or non-finite")


def _require_arm_counts(train: Dataset, fold: int, minimum_control: int, minimum_treated: int):
    if train.n_control < minimum_control or train.n_treated < minimum_treated:
        raise FoldError(fold, f"training complement has {train.n_control} control and {train.n_treated} treated "
                              f"units, needs at least {minimum_control} and {minimum_treated}")


def _fit_fold(data: Dataset, folds: FoldAssignment, fold: int, grids: BridgeHyper, seed: int) -> FoldBridges:
    t = time.time()
    train_index = folds.train_index(fold)
    train = data.subset(train_index)
    _require_arm_counts(train, fold, 2, 2)
    models = {}
    for kind, arm in ((BridgeKind.H, 0), (BridgeKind.H, 1), (BridgeKind.Q, 0), (BridgeKind.Q, 1)):
        params = select_hyper(train, kind, arm, grids, seed=seed)
        models[f"{kind.value}{arm}"] = fit_bridge(train, kind, arm, params, fold=fold, train_index=train_index)
    logger.info(f"Fold {fold + 1}/{folds.n_folds}: fitted h and q bridges on {train.n} units, {time.time() - t:.2f} s")
    return FoldBridges(fold=fold, train_index=train_index, **models)


def crossfit_nuisances(data: Dataset, n_folds: int, grids: BridgeHyper, seed: int, n_jobs: int = 1) -> CrossfitNuisances:
    """
    Fits h (both arms) and q (both arms) on every fold complement, tuning each bridge on the complement, and
    predicts on the held-out fold only.
    """
    data.require_both_arms("cross-fitting")
    folds = assign_folds(data.n, n_folds, seed)
    fold_bridges = Parallel(n_jobs=n_jobs)(
        delayed(_fit_fold)(data, folds, c, grids, s) for c, s in enumerate(_fold_seeds(seed, n_folds))
    )
    oof_h0, oof_h1, oof_q = np.full(data.n, np.nan), np.full(data.n, np.nan), np.full(data.n, np.nan)
    for fb in fold_bridges:
        test_index = folds.test_index(fb.fold)
        held_out = data.subset(test_index)
        oof_h0[test_index] = fb.h0.predict(held_out)
        oof_h1[test_index] = fb.h1.predict(held_out)
        oof_q[test_index] = np.where(held_out.a == 1, fb.q1.predict(held_out), fb.q0.predict(held_out))
    _require_complete(h0=oof_h0, h1=oof_h1, q=oof_q)
    return CrossfitNuisances(oof_h0=oof_h0, oof_h1=oof_h1, oof_q=oof_q, folds=folds, fold_bridges=tuple(fold_bridges))


def pseudo_outcomes(data: Dataset, nuis: NuisancePredictions, clip: Optional[float] = None) -> ScoreVector:
    """
    Doubly robust scores
        gamma_i = (-1)^(1 - A_i) q(Z_i, A_i, X_i) (Y_i - h(W_i, A_i, X_i)) + h(W_i, 1, X_i) - h(W_i, 0, X_i)
    with q optionally clipped to [0, clip] first.
    """
    q = np.asarray(nuis.oof_q, dtype=float)
    clipped = np.zeros(data.n, dtype=bool)
    if clip is not None:
        clipped = (q < 0) | (q > clip)
        q = np.clip(q, 0.0, clip)
        if clipped.any():
            logger.warning(f"Clipped {int(clipped.sum())} q values to [0, {clip}]")
    treated = data.a == 1
    sign = np.where(treated, 1.0, -1.0)
    h_observed = np.where(treated, nuis.oof_h1, nuis.oof_h0)
    gamma = sign * q * (data.y - h_observed) + nuis.oof_h1 - nuis.oof_h0
    fold_of = nuis.folds.fold_of if isinstance(nuis, CrossfitNuisances) else None
    return ScoreVector(gamma=gamma, kind=ScoreKind.ATE, clip_applied=bool(clipped.any()), clipped=clipped,
                       fold_of=fold_of, q_max=clip)


@dataclass(frozen=True)
class FoldCattBridges:
    fold: int
    train_index: np.ndarray
    h: BridgeModel
    q: BridgeModel


@dataclass(frozen=True)
class CattNuisances:
    """out-of-fold h(W_i, X_i) and q(Z_i, X_i) of the treated-effect bridges"""
    oof_h: np.ndarray
    oof_q: np.ndarray
    folds: Optional[FoldAssignment] = None
    fold_bridges: Tuple[FoldCattBridges, ...] = ()

    def bridges(self):
        return [m for fb in self.fold_bridges for m in (fb.h, fb.q)]


def _fit_catt_fold(data: Dataset, folds: FoldAssignment, fold: int, grids: BridgeHyper, seed: int) -> FoldCattBridges:
    t = time.time()
    train_index = folds.train_index(fold)
    train = data.subset(train_index)
    _require_arm_counts(train, fold, 2, 1)
    models = {}
    for name, kind in (("h", BridgeKind.H_CATT), ("q", BridgeKind.Q_CATT)):
        params = select_hyper(train, kind, 0, grids, seed=seed)
        models[name] = fit_bridge(train, kind, 0, params, fold=fold, train_index=train_index)
    logger.info(f"Fold {fold + 1}/{folds.n_folds}: fitted CATT bridges on {train.n} units, {time.time() - t:.2f} s")
    return FoldCattBridges(fold=fold, train_index=train_index, **models)


def crossfit_catt_nuisances(data: Dataset, n_folds: int, grids: BridgeHyper, seed: int, n_jobs: int = 1) -> CattNuisances:
    data.require_both_arms("cross-fitting")
    folds = assign_folds(data.n, n_folds, seed)
    fold_bridges = Parallel(n_jobs=n_jobs)(
        delayed(_fit_catt_fold)(data, folds, c, grids, s) for c, s in enumerate(_fold_seeds(seed, n_folds))
    )
    oof_h, oof_q = np.full(data.n, np.nan), np.full(data.n, np.nan)
    for fb in fold_bridges:
        test_index = folds.test_index(fb.fold)
        held_out = data.subset(test_index)
        oof_h[test_index] = fb.h.predict(held_out)
        oof_q[test_index] = fb.q.predict(held_out)
    _require_complete(h=oof_h, q=oof_q)
    return CattNuisances(oof_h=oof_h, oof_q=oof_q, folds=folds, fold_bridges=tuple(fold_bridges))


def catt_pseudo(data: Dataset, catt_nuis: CattNuisances) -> ScoreVector:
    """
    Treated units carry Y_i - h(W_i, X_i) with weight 1, control units weight 0. Control terms of the CATT loss do
    not depend on mu, so minimizing that loss is a squared-error regression of Y - h on X over treated units.
    """
    if data.n_treated == 0:
        raise EmptyArmError("CATT scores need treated units, none found")
    treated = data.a == 1
    gamma = np.where(treated, data.y - catt_nuis.oof_h, 0.0)
    fold_of = None if catt_nuis.folds is None else catt_nuis.folds.fold_of
    return ScoreVector(gamma=gamma, kind=ScoreKind.CATT, clipped=np.zeros(data.n, dtype=bool), fold_of=fold_of,
                       weights=treated.astype(float))


def catt_loss(mu_values, data: Dataset, catt_nuis: CattNuisances) -> float:
    """the CATT loss evaluated as written, (1/n) sum [A Y - (1 - A) q (Y - h) - A (h + mu)]^2"""
    mu_values = np.asarray(mu_values, dtype=float)
    a = data.a.astype(float)
    residual = data.y - catt_nuis.oof_h
    terms = a * data.y - (1 - a) * catt_nuis.oof_q * residual - a * (catt_nuis.oof_h + mu_values)
    return float(np.mean(terms ** 2))


def write_scores_csv(scores: ScoreVector, path) -> Path:
    path = Path(path)
    fold = scores.fold_of if scores.fold_of is not None else np.full(scores.n, -1)
    clipped = scores.clipped if scores.clipped is not None else np.zeros(scores.n, dtype=bool)
    df = pd.DataFrame({"unit_id": np.arange(scores.n), "gamma": scores.gamma, "fold": fold,
                       "clipped": clipped.astype(int)})
    if scores.weights is not None:
        df["weight"] = scores.weights
    df.to_csv(path, index=False)
    return path


def read_scores_csv(path) -> ScoreVector:
    df = pd.read_csv(path)
    weights = df["weight"].to_numpy(dtype=float) if "weight" in df.columns else None
    fold = df["fold"].to_numpy(dtype=int)
    return ScoreVector(gamma=df["gamma"].to_numpy(dtype=float),
                       kind=ScoreKind.ATE if weights is None else ScoreKind.CATT,
                       clip_applied=bool(df["clipped"].any()), clipped=df["clipped"].to_numpy(dtype=bool),
                       fold_of=None if np.all(fold < 0) else fold, weights=weights)
