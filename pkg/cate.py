"""
Second stage: regress the pseudo-outcomes on the covariates. Kernel ridge is the default family, a linear fit the
alternative. fit_plearner chains cross-fitting, scores and this stage.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union
import logging
import time

import numpy as np
from joblib import Parallel, delayed
from sklearn.kernel_ridge import KernelRidge

from core import Dataset, Standardizer, assign_folds
from exceptions import ConfigError, DataValidationError
from inference import ols_fit
from kernels import KernelSpec, gram, median_heuristic
from models.artifacts import CateDocument, KernelDocument, StandardizerDocument
from models.config import CateConfig, Estimand, FinalStage, PipelineConfig
from scores import (CattNuisances, CrossfitNuisances, ScoreVector, catt_pseudo, crossfit_catt_nuisances,
                    crossfit_nuisances, gamma_values, pseudo_outcomes)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CateModel:
    family: FinalStage
    intercept: float
    feature_names: tuple = ()
    standardizer: Optional[Standardizer] = None
    kernel_spec: Optional[KernelSpec] = None
    anchors: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    ridge: Optional[float] = None
    cap: Optional[float] = None
    cap_enabled: bool = False
    cv_scores: Dict[float, float] = field(default_factory=dict)
    coefficients: Optional[np.ndarray] = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict(self, x_new) -> np.ndarray:
        return predict_cate(self, x_new)

    def to_document(self) -> CateDocument:
        kernel = None
        if self.kernel_spec is not None:
            kernel = KernelDocument(bandwidth=self.kernel_spec.bandwidth,
                                    feature_columns=list(self.kernel_spec.feature_columns), multiplier=None)
        return CateDocument(
            family=self.family.value,
            intercept=self.intercept,
            anchors=None if self.anchors is None else self.anchors.tolist(),
            weights=None if self.weights is None else self.weights.tolist(),
            kernel=kernel,
            ridge=self.ridge,
            cap=self.cap,
            cap_enabled=self.cap_enabled,
            standardizer=None if self.standardizer is None else StandardizerDocument(**self.standardizer.to_dict()),
            cv_scores={repr(k): v for k, v in self.cv_scores.items()},
            coefficients=None if self.coefficients is None else self.coefficients.tolist(),
            feature_names=list(self.feature_names),
        )

    @classmethod
    def from_document(cls, doc: CateDocument) -> "CateModel":
        return cls(
            family=FinalStage(doc.family),
            intercept=doc.intercept,
            feature_names=tuple(doc.feature_names),
            standardizer=None if doc.standardizer is None else Standardizer.from_dict(doc.standardizer.dict()),
            kernel_spec=None if doc.kernel is None else KernelSpec(doc.kernel.bandwidth, tuple(doc.kernel.feature_columns)),
            anchors=None if doc.anchors is None else np.asarray(doc.anchors, dtype=float),
            weights=None if doc.weights is None else np.asarray(doc.weights, dtype=float),
            ridge=doc.ridge,
            cap=doc.cap,
            cap_enabled=doc.cap_enabled,
            cv_scores={float(k): v for k, v in (doc.cv_scores or {}).items()},
            coefficients=None if doc.coefficients is None else np.asarray(doc.coefficients, dtype=float),
        )


def save_cate_model(model: CateModel, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(model.to_document().json(indent=2))
    return path


def load_cate_model(path) -> CateModel:
    return CateModel.from_document(CateDocument.parse_file(path))


def _regression_data(x, gamma):
    """covariate rows and targets entering the final-stage loss (treated units only for CATT scores)"""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    g = gamma_values(gamma)
    if x.shape[0] != g.shape[0]:
        raise DataValidationError(f"covariates have {x.shape[0]} rows, scores have {g.shape[0]}")
    if isinstance(gamma, ScoreVector) and gamma.weights is not None:
        index = gamma.active_index()
        return x[index], g[index]
    return x, g


def _ridge_fit(k_train: np.ndarray, targets: np.ndarray, lam: float):
    """returns (intercept, dual weights) minimising (1/n)|g - c - K w|^2 + lam w'K w with c the target mean"""
    intercept = float(np.mean(targets))
    ridge = KernelRidge(alpha=k_train.shape[0] * lam, kernel="precomputed")
    ridge.fit(k_train, targets - intercept)
    return intercept, np.asarray(ridge.dual_coef_, dtype=float).ravel()


def _cv_error(k: np.ndarray, g: np.ndarray, splits, lam: float) -> float:
    squared = 0.0
    for train, validation in splits:
        intercept, w = _ridge_fit(k[np.ix_(train, train)], g[train], lam)
        predictions = intercept + k[np.ix_(validation, train)] @ w
        squared += float(np.sum((g[validation] - predictions) ** 2))
    return squared / g.shape[0]


def fit_kernel_ridge(x, gamma, lambda_grid: Sequence[float], n_splits: int = 5, seed: int = 0, cap: bool = False,
                     feature_names: Sequence[str] = (), n_jobs: int = 1) -> CateModel:
    """
    Kernel ridge regression of the scores on standardized covariates, Gaussian kernel with the median-heuristic
    bandwidth, penalty chosen by K-fold cross-validated squared error (ties to the larger penalty).
    :param x: n x d covariates on the raw scale
    :param gamma: pseudo-outcomes, a ScoreVector or an array
    :param lambda_grid: candidate penalties
    :param n_splits: cross-validation folds
    :param seed: fold seed
    :param cap: clip predictions to +-2 max|gamma|
    :return: fitted CateModel
    """
    x, g = _regression_data(x, gamma)
    lambda_grid = [float(v) for v in lambda_grid]
    if not lambda_grid:
        raise ConfigError("empty kernel ridge penalty grid")
    if any(v <= 0 for v in lambda_grid):
        raise ConfigError(f"kernel ridge penalties must be positive, got {lambda_grid}")
    n = g.shape[0]
    if n < max(n_splits, 2):
        raise DataValidationError(f"{n} units cannot be split into {n_splits} folds")
    t = time.time()
    standardizer = Standardizer.fit(x)
    points = standardizer.transform(x)
    spec = KernelSpec.over(points.shape[1], median_heuristic(points))
    k = gram(points, points, spec)

    cv_scores = {}
    if len(lambda_grid) == 1:
        chosen = lambda_grid[0]
    else:
        folds = assign_folds(n, n_splits, seed)
        splits = [(folds.train_index(c), folds.test_index(c)) for c in range(n_splits)]
        errors = Parallel(n_jobs=n_jobs)(delayed(_cv_error)(k, g, splits, lam) for lam in lambda_grid)
        cv_scores = dict(zip(lambda_grid, errors))
        chosen = min(lambda_grid, key=lambda lam: (cv_scores[lam], -lam))
    intercept, weights = _ridge_fit(k, g, chosen)
    logger.info(f"Kernel ridge final stage on {n} units: lambda={chosen:g}, bandwidth={spec.bandwidth:.4g}, "
                f"{time.time() - t:.2f} s")
    return CateModel(
        family=FinalStage.kernel_ridge,
        intercept=intercept,
        feature_names=tuple(feature_names) or tuple(f"x{j + 1}" for j in range(x.shape[1])),
        standardizer=standardizer,
        kernel_spec=spec,
        anchors=points,
        weights=weights,
        ridge=chosen,
        cap=2.0 * float(np.max(np.abs(g))),
        cap_enabled=cap,
        cv_scores=cv_scores,
    )


def fit_linear(x, gamma, feature_names: Sequence[str] = ()) -> CateModel:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    names = tuple(feature_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
    results, _, _ = ols_fit(x, gamma, names)
    params = np.asarray(results.params, dtype=float)
    return CateModel(family=FinalStage.linear, intercept=float(params[0]), feature_names=names,
                     coefficients=params[1:])


def fit_final(x, gamma, config: CateConfig, seed: int = 0, feature_names: Sequence[str] = (),
              n_jobs: int = 1) -> CateModel:
    if config.family == FinalStage.linear:
        return fit_linear(x, gamma, feature_names)
    return fit_kernel_ridge(x, gamma, config.lambda_grid, config.n_splits, seed, config.cap, feature_names, n_jobs)


def predict_cate(model: CateModel, x_new) -> np.ndarray:
    x_new = np.asarray(x_new, dtype=float)
    if x_new.ndim == 1:
        x_new = x_new.reshape(1, -1)
    if x_new.shape[1] != model.n_features:
        raise DataValidationError(f"dimension mismatch: model has {model.n_features} covariates, "
                                  f"input has {x_new.shape[1]}")
    if model.family == FinalStage.linear:
        return model.intercept + x_new @ model.coefficients
    points = model.standardizer.transform(x_new)
    tau = model.intercept + gram(points, model.anchors, model.kernel_spec) @ model.weights
    if model.cap_enabled:
        tau = np.clip(tau, -model.cap, model.cap)
    return tau


def empirical_loss(gamma, tau_hat) -> float:
    """mean squared distance between scores and CATE predictions over the units in the loss"""
    g = gamma_values(gamma)
    tau_hat = np.asarray(tau_hat, dtype=float).ravel()
    if g.shape != tau_hat.shape:
        raise DataValidationError(f"{g.shape[0]} scores but {tau_hat.shape[0]} predictions")
    if isinstance(gamma, ScoreVector) and gamma.weights is not None:
        index = gamma.active_index()
        return float(np.mean((g[index] - tau_hat[index]) ** 2))
    return float(np.mean((g - tau_hat) ** 2))


@dataclass(frozen=True)
class PLearnerFit:
    nuisances: Union[CrossfitNuisances, CattNuisances]
    scores: ScoreVector
    model: CateModel

    def predict(self, x_new) -> np.ndarray:
        return predict_cate(self.model, x_new)


def fit_plearner(data: Dataset, pipeline: PipelineConfig, seed: int = 0, n_jobs: int = 1) -> PLearnerFit:
    """cross-fit bridges, form the scores and fit the final stage on the whole sample"""
    t = time.time()
    if pipeline.estimand == Estimand.catt:
        nuisances = crossfit_catt_nuisances(data, pipeline.n_folds, pipeline.bridge, seed, n_jobs)
        scores = catt_pseudo(data, nuisances)
    else:
        nuisances = crossfit_nuisances(data, pipeline.n_folds, pipeline.bridge, seed, n_jobs)
        scores = pseudo_outcomes(data, nuisances, pipeline.clip_threshold)
    model = fit_final(data.x, scores, pipeline.cate, seed, data.x_names, n_jobs)
    logger.info(f"P-learner ({pipeline.estimand.value}) fitted on {data.n} units, done, {time.time() - t:.2f} s")
    return PLearnerFit(nuisances=nuisances, scores=scores, model=model)
