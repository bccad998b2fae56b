"""
Kernel min-max estimation of the outcome bridge h and the treatment bridge q (and their CATT variants).

Every bridge solves a conditional moment restriction E[m | critic features] = 0 with a residual of the form
m = t - S f, where f is the bridge evaluated at the primal features, S a diagonal unit selector and t a target:

    kind     primal   critic   selector S      target t
    h        (W, X)   (Z, X)   1{A = arm}      1{A = arm} Y
    q        (Z, X)   (W, X)   1{A = arm}      1
    h_catt   (W, X)   (Z, X)   1{A = 0}        1{A = 0} Y
    q_catt   (Z, X)   (W, X)   1{A = 0}        1{A = 1}

With f = K alpha over all n training rows and a Gaussian RKHS critic, the inner maximisation has value m' Omega m
with Omega = K_c ((1/n) K_c + lambda_c I)^-1 / (4 n^2), and the outer problem reduces to the linear system
(K S Omega S K + lambda K + eps I) alpha = K S Omega t.
"""
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import enum
import logging
import time

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from core import Dataset, Standardizer, assign_folds
from exceptions import EmptyArmError, SingularSystemError
from kernels import JITTER, KernelSpec, gram, median_heuristic
from models.artifacts import BridgeCollection, BridgeDocument, KernelDocument, StandardizerDocument
from models.config import BridgeHyper


logger = logging.getLogger(__name__)


class BridgeKind(str, enum.Enum):
    H = "h"
    Q = "q"
    H_CATT = "h_catt"
    Q_CATT = "q_catt"

    @property
    def primal_blocks(self) -> Tuple[str, ...]:
        return ("w", "x") if self in (BridgeKind.H, BridgeKind.H_CATT) else ("z", "x")

    @property
    def adversary_blocks(self) -> Tuple[str, ...]:
        return ("z", "x") if self in (BridgeKind.H, BridgeKind.H_CATT) else ("w", "x")

    @property
    def is_catt(self) -> bool:
        return self in (BridgeKind.H_CATT, BridgeKind.Q_CATT)


@dataclass(frozen=True)
class BridgeParams:
    """one point of the hyperparameter grid"""
    lambda_primal: float
    lambda_adversary: float
    primal_multiplier: float = 1.0
    adversary_multiplier: float = 1.0


def moment_target(kind: BridgeKind, arm: int, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """returns (target t, selector S) such that the moment residual is t - S f"""
    if kind is BridgeKind.H:
        selector = data.arm_mask(arm).astype(float)
        return selector * data.y, selector
    if kind is BridgeKind.Q:
        selector = data.arm_mask(arm).astype(float)
        return np.ones(data.n), selector
    selector = data.arm_mask(0).astype(float)
    if kind is BridgeKind.H_CATT:
        return selector * data.y, selector
    return data.arm_mask(1).astype(float), selector


def moment_residual(kind: BridgeKind, arm: int, data: Dataset, predictions) -> np.ndarray:
    target, selector = moment_target(kind, arm, data)
    return target - selector * np.asarray(predictions, dtype=float)


def _check_arm(kind: BridgeKind, arm: int, data: Dataset):
    _, selector = moment_target(kind, arm, data)
    selected_arm = 0 if kind.is_catt else arm
    if selector.sum() < 2:
        raise EmptyArmError(f"empty arm: {kind.value} bridge needs at least 2 units with A={selected_arm}, "
                            f"found {int(selector.sum())}")
    if kind is BridgeKind.Q_CATT and data.n_treated == 0:
        raise EmptyArmError("empty arm: q_catt bridge needs treated units")


def adversary_weight(k_adversary: np.ndarray, lambda_adversary: float) -> np.ndarray:
    """Omega = K ((1/n) K + lambda I)^-1 / (4 n^2), symmetric PSD"""
    n = k_adversary.shape[0]
    system = k_adversary / n + lambda_adversary * np.eye(n)
    omega = linalg.solve(system, k_adversary, assume_a="pos") / (4.0 * n ** 2)
    return (omega + omega.T) / 2.0


def _solve_spd(system: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    system = (system + system.T) / 2.0
    try:
        solution = linalg.cho_solve(linalg.cho_factor(system), rhs)
    except linalg.LinAlgError:
        logger.warning("Cholesky factorization failed, falling back to least squares")
        solution = linalg.lstsq(system, rhs)[0]
    if not np.all(np.isfinite(solution)):
        raise SingularSystemError("kernel system is singular after jitter")
    return solution


def representer_system(k_primal: np.ndarray, selector: np.ndarray, omega: np.ndarray, target: np.ndarray):
    """returns (K S Omega S K, K S Omega t); the penalty lambda K + eps I is added per grid point"""
    sk = selector[:, None] * k_primal
    sk_omega = sk.T @ omega
    return sk_omega @ sk, sk_omega @ target


def solve_representer(quadratic: np.ndarray, linear: np.ndarray, k_primal: np.ndarray, lambda_primal: float) -> np.ndarray:
    n = k_primal.shape[0]
    return _solve_spd(quadratic + lambda_primal * k_primal + JITTER * np.eye(n), linear)


def reduced_objective(alpha, k_primal, selector, omega, target, lambda_primal) -> float:
    """value of the min-max objective after the inner maximisation, m' Omega m + lambda alpha' K alpha"""
    residual = target - selector * (k_primal @ alpha)
    return float(residual @ omega @ residual + lambda_primal * alpha @ k_primal @ alpha)


@dataclass(frozen=True)
class BridgeModel:
    kind: BridgeKind
    arm: int
    alpha: np.ndarray
    anchors: np.ndarray
    primal_spec: KernelSpec
    adversary_spec: KernelSpec
    lambda_primal: float
    lambda_adversary: float
    primal_standardizer: Standardizer
    adversary_standardizer: Standardizer
    params: Optional[BridgeParams] = None
    fold: Optional[int] = None
    train_index: Optional[np.ndarray] = None

    def primal_features(self, data: Dataset) -> np.ndarray:
        return self.primal_standardizer.transform(data.features(*self.kind.primal_blocks))

    def adversary_features(self, data: Dataset) -> np.ndarray:
        return self.adversary_standardizer.transform(data.features(*self.kind.adversary_blocks))

    def predict_features(self, raw_features) -> np.ndarray:
        points = self.primal_standardizer.transform(raw_features)
        return gram(points, self.anchors, self.primal_spec) @ self.alpha

    def predict(self, data: Dataset) -> np.ndarray:
        return gram(self.primal_features(data), self.anchors, self.primal_spec) @ self.alpha

    def to_document(self) -> BridgeDocument:
        def kernel_doc(spec: KernelSpec, multiplier):
            return KernelDocument(bandwidth=spec.bandwidth, feature_columns=list(spec.feature_columns),
                                  multiplier=multiplier)
        params = self.params or BridgeParams(self.lambda_primal, self.lambda_adversary, None, None)
        return BridgeDocument(
            kind=self.kind.value,
            arm=self.arm,
            fold=self.fold,
            alpha=self.alpha.tolist(),
            anchors=self.anchors.tolist(),
            primal=kernel_doc(self.primal_spec, params.primal_multiplier),
            adversary=kernel_doc(self.adversary_spec, params.adversary_multiplier),
            lambda_primal=self.lambda_primal,
            lambda_adversary=self.lambda_adversary,
            primal_standardizer=StandardizerDocument(**self.primal_standardizer.to_dict()),
            adversary_standardizer=StandardizerDocument(**self.adversary_standardizer.to_dict()),
            train_index=None if self.train_index is None else self.train_index.tolist(),
        )

    @classmethod
    def from_document(cls, doc: BridgeDocument) -> "BridgeModel":
        params = None
        if doc.primal.multiplier is not None and doc.adversary.multiplier is not None:
            params = BridgeParams(doc.lambda_primal, doc.lambda_adversary, doc.primal.multiplier, doc.adversary.multiplier)
        return cls(
            kind=BridgeKind(doc.kind),
            arm=doc.arm,
            alpha=np.asarray(doc.alpha, dtype=float),
            anchors=np.asarray(doc.anchors, dtype=float),
            primal_spec=KernelSpec(doc.primal.bandwidth, tuple(doc.primal.feature_columns)),
            adversary_spec=KernelSpec(doc.adversary.bandwidth, tuple(doc.adversary.feature_columns)),
            lambda_primal=doc.lambda_primal,
            lambda_adversary=doc.lambda_adversary,
            primal_standardizer=Standardizer.from_dict(doc.primal_standardizer.dict()),
            adversary_standardizer=Standardizer.from_dict(doc.adversary_standardizer.dict()),
            params=params,
            fold=doc.fold,
            train_index=None if doc.train_index is None else np.asarray(doc.train_index, dtype=int),
        )


class BridgeProblem:
    """
    Training data of one bridge, standardized once, with Gram matrices cached per bandwidth multiplier so a
    hyperparameter grid reuses them.
    """

    def __init__(self, train: Dataset, kind: BridgeKind, arm: int, bandwidth_seed: int = 0):
        kind = BridgeKind(kind)
        _check_arm(kind, arm, train)
        self.kind = kind
        self.arm = 0 if kind.is_catt else int(arm)
        self.primal_standardizer = Standardizer.fit(train.features(*kind.primal_blocks))
        self.adversary_standardizer = Standardizer.fit(train.features(*kind.adversary_blocks))
        self.primal_points = self.primal_standardizer.transform(train.features(*kind.primal_blocks))
        self.adversary_points = self.adversary_standardizer.transform(train.features(*kind.adversary_blocks))
        self.primal_median = median_heuristic(self.primal_points, seed=bandwidth_seed)
        self.adversary_median = median_heuristic(self.adversary_points, seed=bandwidth_seed)
        self.target, self.selector = moment_target(kind, arm, train)
        self._primal_grams: Dict[float, np.ndarray] = {}
        self._adversary_grams: Dict[float, np.ndarray] = {}

    @property
    def n(self) -> int:
        return self.primal_points.shape[0]

    def primal_spec(self, multiplier: float) -> KernelSpec:
        return KernelSpec.over(self.primal_points.shape[1], self.primal_median * multiplier)

    def adversary_spec(self, multiplier: float) -> KernelSpec:
        return KernelSpec.over(self.adversary_points.shape[1], self.adversary_median * multiplier)

    def primal_gram(self, multiplier: float) -> np.ndarray:
        if multiplier not in self._primal_grams:
            spec = self.primal_spec(multiplier)
            self._primal_grams[multiplier] = gram(self.primal_points, self.primal_points, spec)
        return self._primal_grams[multiplier]

    def adversary_gram(self, multiplier: float) -> np.ndarray:
        if multiplier not in self._adversary_grams:
            spec = self.adversary_spec(multiplier)
            self._adversary_grams[multiplier] = gram(self.adversary_points, self.adversary_points, spec)
        return self._adversary_grams[multiplier]

    def model(self, alpha: np.ndarray, params: BridgeParams, **kwargs) -> BridgeModel:
        return BridgeModel(
            kind=self.kind,
            arm=self.arm,
            alpha=alpha,
            anchors=self.primal_points,
            primal_spec=self.primal_spec(params.primal_multiplier),
            adversary_spec=self.adversary_spec(params.adversary_multiplier),
            lambda_primal=params.lambda_primal,
            lambda_adversary=params.lambda_adversary,
            primal_standardizer=self.primal_standardizer,
            adversary_standardizer=self.adversary_standardizer,
            params=params,
            **kwargs,
        )

    def solve(self, params: BridgeParams, **kwargs) -> BridgeModel:
        k_primal = self.primal_gram(params.primal_multiplier)
        omega = adversary_weight(self.adversary_gram(params.adversary_multiplier), params.lambda_adversary)
        quadratic, linear = representer_system(k_primal, self.selector, omega, self.target)
        alpha = solve_representer(quadratic, linear, k_primal, params.lambda_primal)
        return self.model(alpha, params, **kwargs)

    def grid_models(self, grids: BridgeHyper):
        """yields a fitted model per grid point, ordered so each Omega is formed once"""
        for adversary_multiplier, lambda_adversary in product(grids.adversary_bandwidth_multipliers,
                                                              grids.lambda_adversary_grid):
            omega = adversary_weight(self.adversary_gram(adversary_multiplier), lambda_adversary)
            for primal_multiplier in grids.primal_bandwidth_multipliers:
                k_primal = self.primal_gram(primal_multiplier)
                quadratic, linear = representer_system(k_primal, self.selector, omega, self.target)
                for lambda_primal in grids.lambda_primal_grid:
                    params = BridgeParams(lambda_primal, lambda_adversary, primal_multiplier, adversary_multiplier)
                    alpha = solve_representer(quadratic, linear, k_primal, lambda_primal)
                    yield params, self.model(alpha, params)


def fit_bridge(train: Dataset, kind: BridgeKind, arm: int, params: BridgeParams, **kwargs) -> BridgeModel:
    return BridgeProblem(train, kind, arm).solve(params, **kwargs)


def fit_h(train: Dataset, arm: int, params: BridgeParams, **kwargs) -> BridgeModel:
    return fit_bridge(train, BridgeKind.H, arm, params, **kwargs)


def fit_q(train: Dataset, arm: int, params: BridgeParams, **kwargs) -> BridgeModel:
    return fit_bridge(train, BridgeKind.Q, arm, params, **kwargs)


def fit_h_catt(train: Dataset, params: BridgeParams, **kwargs) -> BridgeModel:
    return fit_bridge(train, BridgeKind.H_CATT, 0, params, **kwargs)


def fit_q_catt(train: Dataset, params: BridgeParams, **kwargs) -> BridgeModel:
    return fit_bridge(train, BridgeKind.Q_CATT, 0, params, **kwargs)


def moment_violation(model: BridgeModel, data: Dataset, predictions=None,
                     critic: Optional[Tuple[KernelSpec, float]] = None) -> float:
    """
    Adversarial value m' Omega m of the model's moment residual on the given data, using the model's critic class
    unless another (spec, lambda) critic is supplied.
    :param model: fitted bridge, provides kind, arm, standardizers and critic
    :param data: evaluation units
    :param predictions: bridge values to score instead of model.predict(data), e.g. an analytic bridge
    :param critic: optional (KernelSpec, lambda) replacing the model's own critic
    :return: nonnegative violation, 0 iff the residual is orthogonal to the critic class
    """
    if predictions is None:
        predictions = model.predict(data)
    residual = moment_residual(model.kind, model.arm, data, predictions)
    if not np.any(residual):
        return 0.0
    spec, lambda_adversary = critic if critic is not None else (model.adversary_spec, model.lambda_adversary)
    points = model.adversary_features(data)
    omega = adversary_weight(gram(points, points, spec), lambda_adversary)
    return max(0.0, float(residual @ omega @ residual))


def _score_split(train: Dataset, validation: Dataset, kind: BridgeKind, arm: int, grids: BridgeHyper) -> Dict[BridgeParams, float]:
    problem = BridgeProblem(train, kind, arm)
    critic = (problem.adversary_spec(1.0), grids.scoring_lambda)
    scores = {}
    for params, model in problem.grid_models(grids):
        scores[params] = moment_violation(model, validation, critic=critic)
    return scores


def grid_candidates(grids: BridgeHyper) -> List[BridgeParams]:
    return [BridgeParams(lp, la, pm, am) for am, la, pm, lp in product(
        grids.adversary_bandwidth_multipliers, grids.lambda_adversary_grid,
        grids.primal_bandwidth_multipliers, grids.lambda_primal_grid)]


def select_hyper(train: Dataset, kind: BridgeKind, arm: int, grids: BridgeHyper, n_splits: int = None,
                 seed: int = 0, n_jobs: int = 1) -> BridgeParams:
    """
    Cross-validated grid search: every candidate is fit on split-train units and scored by its moment violation on
    the held-out split against a common reference critic; ties go to the larger primal penalty.
    """
    kind = BridgeKind(kind)
    candidates = grid_candidates(grids)
    if len(candidates) == 1:
        return candidates[0]
    n_splits = n_splits or grids.n_splits
    folds = assign_folds(train.n, n_splits, seed)
    t = time.time()
    split_scores = Parallel(n_jobs=n_jobs)(
        delayed(_score_split)(train.subset(folds.train_index(c)), train.subset(folds.test_index(c)), kind, arm, grids)
        for c in range(n_splits)
    )
    mean_scores = {p: float(np.mean([s[p] for s in split_scores])) for p in candidates}
    for p in candidates:
        logger.debug(f"{kind.value} arm={arm} {p}: validation violation {mean_scores[p]:.6g}")
    chosen = min(candidates, key=lambda p: (mean_scores[p], -p.lambda_primal))
    logger.info(f"Selected {kind.value} arm={arm} hyperparameters {chosen} "
                f"from {len(candidates)} candidates, {time.time() - t:.2f} s")
    return chosen


def save_bridges(models: Sequence[BridgeModel], path, n_folds: int = None, seed: int = None) -> Path:
    path = Path(path)
    collection = BridgeCollection(n_folds=n_folds, seed=seed, bridges=[m.to_document() for m in models])
    with open(path, "w") as f:
        f.write(collection.json())
    return path


def load_bridges(path) -> List[BridgeModel]:
    collection = BridgeCollection.parse_file(path)
    return [BridgeModel.from_document(doc) for doc in collection.bridges]
