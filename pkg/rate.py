from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict
import logging
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.model_selection import train_test_split

from cate import fit_plearner, predict_cate
from core import Dataset
from exceptions import DataValidationError, EmptyArmError
from models.artifacts import RateDocument, TocPoint
from models.config import Direction, Estimand, PipelineConfig
from scores import crossfit_nuisances, gamma_values, pseudo_outcomes


logger = logging.getLogger(__name__)

MAX_REDRAWS = 100


@dataclass(frozen=True)
class TocCurve:
    q: np.ndarray
    toc: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"q": self.q, "toc": self.toc})


@dataclass(frozen=True)
class RateReport:
    toc: TocCurve
    autoc: float
    autoc_se: float
    direction: Direction
    n_eval: int
    n_boot: int
    seed: int
    metadata: Dict[str, str] = field(default_factory=dict)

    def to_document(self) -> RateDocument:
        return RateDocument(autoc=self.autoc, autoc_se=self.autoc_se, direction=self.direction.value,
                            n_eval=self.n_eval, n_boot=self.n_boot, seed=self.seed,
                            toc=[TocPoint(q=q, toc=v) for q, v in zip(self.toc.q.tolist(), self.toc.toc.tolist())],
                            metadata=self.metadata)


def _order(priorities: np.ndarray, direction: Direction) -> np.ndarray:
    keys = -priorities if Direction(direction) == Direction.benefit_desc else priorities
    return np.argsort(keys, kind="stable")


def toc_curve(priorities, gamma_eval, direction: Direction = Direction.benefit_desc) -> TocCurve:
    """
    TOC(k/m) = mean score of the k highest-priority units minus the overall mean score, k = 1..m.
    Units with tied priorities cannot be ranked against each other, so inside a tie block every unit contributes
    the block's mean score; TOC(1) is exactly 0.
    """
    priorities = np.asarray(priorities, dtype=float).ravel()
    g = gamma_values(gamma_eval)
    m = g.shape[0]
    if priorities.shape[0] != m:
        raise DataValidationError(f"{priorities.shape[0]} priorities but {m} scores")
    if m < 2:
        raise DataValidationError(f"TOC needs at least 2 evaluation units, got {m}")
    if not np.all(np.isfinite(priorities)):
        raise DataValidationError("priorities contain NaN or infinite values")
    if not np.all(np.isfinite(g)):
        raise DataValidationError("scores contain NaN or infinite values")
    order = _order(priorities, direction)
    sorted_priorities, sorted_g = priorities[order], g[order]
    csum = np.concatenate([[0.0], np.cumsum(sorted_g)])
    # tie blocks [s, e) over the sorted order
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_priorities) != 0) + 1])
    ends = np.concatenate([starts[1:], [m]])
    block_of = np.repeat(np.arange(starts.shape[0]), ends - starts)
    block_mean = ((csum[ends] - csum[starts]) / (ends - starts))[block_of]
    s = starts[block_of]
    k = np.arange(1, m + 1)
    means = np.where(s == 0, block_mean, (csum[s] + (k - s) * block_mean) / k)
    means[ends - 1] = csum[ends] / ends
    toc = means - csum[m] / m
    return TocCurve(q=np.arange(1, m + 1) / m, toc=toc)


def autoc(toc: TocCurve) -> float:
    if toc.toc.shape[0] == 0:
        raise DataValidationError("empty TOC curve")
    return float(np.mean(toc.toc))


def _replicate(priorities: np.ndarray, g: np.ndarray, direction: Direction, seed_seq: np.random.SeedSequence) -> float:
    rng = np.random.default_rng(seed_seq)
    m = g.shape[0]
    for _ in range(MAX_REDRAWS):
        draw = rng.integers(0, m, size=m)
        if np.unique(draw).shape[0] >= 2:
            return autoc(toc_curve(priorities[draw], g[draw], direction))
    raise DataValidationError(f"bootstrap resample had fewer than 2 distinct units after {MAX_REDRAWS} redraws")


def bootstrap_autoc(priorities, gamma_eval, n_boot: int, seed: int, direction: Direction = Direction.benefit_desc,
                    n_jobs: int = 1) -> float:
    """
    Sample standard deviation of AUTOC over n_boot resamples of evaluation units, each drawing (priority, score)
    pairs jointly with replacement. Replicate seeds are spawned from seed, so the result does not depend on n_jobs.
    """
    priorities = np.asarray(priorities, dtype=float).ravel()
    g = gamma_values(gamma_eval)
    if n_boot < 2:
        raise DataValidationError(f"need at least 2 bootstrap replicates, got {n_boot}")
    if g.shape[0] < 2:
        raise DataValidationError("bootstrap needs at least 2 evaluation units")
    children = np.random.SeedSequence(seed).spawn(n_boot)
    replicates = Parallel(n_jobs=n_jobs)(delayed(_replicate)(priorities, g, direction, s) for s in children)
    return float(np.std(replicates, ddof=1))


def split_train_eval(data: Dataset, split_fraction: float, seed: int):
    """treatment-stratified split into a training part and an evaluation part"""
    data.require_both_arms("RATE split")
    index = np.arange(data.n)
    try:
        train_index, eval_index = train_test_split(index, train_size=split_fraction, stratify=data.a,
                                                   random_state=seed % (2 ** 32))
    except ValueError as e:
        raise EmptyArmError(f"cannot split {data.n} units with fraction {split_fraction}: {e}") from e
    train, evaluation = data.subset(np.sort(train_index)), data.subset(np.sort(eval_index))
    train.require_both_arms("RATE training split")
    evaluation.require_both_arms("RATE evaluation split")
    return train, evaluation


def evaluate_plearner(data: Dataset, split_fraction: float, pipeline: PipelineConfig, seed: int,
                      direction: Direction = Direction.benefit_desc, n_boot: int = 200, n_jobs: int = 1) -> RateReport:
    """
    Fits the learner on one part of the data, cross-fits fresh scores on the other part and ranks its units by the
    fitted CATE. Bootstrap SEs hold the evaluation scores fixed.
    """
    if pipeline.estimand != Estimand.ate:
        raise DataValidationError("RATE evaluation uses ATE scores; set estimand to ate")
    t = time.time()
    train_seed, eval_seed, boot_seed = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]
    train, evaluation = split_train_eval(data, split_fraction, seed)
    fitted = fit_plearner(train, pipeline, train_seed, n_jobs)
    nuisances = crossfit_nuisances(evaluation, pipeline.n_folds, pipeline.bridge, eval_seed, n_jobs)
    scores = pseudo_outcomes(evaluation, nuisances, pipeline.clip_threshold)
    priorities = predict_cate(fitted.model, evaluation.x)
    curve = toc_curve(priorities, scores, direction)
    value = autoc(curve)
    se = bootstrap_autoc(priorities, scores, n_boot, boot_seed, direction, n_jobs)
    logger.info(f"AUTOC {value:.4f} (SE {se:.4f}) on {evaluation.n} evaluation units, {time.time() - t:.2f} s")
    return RateReport(toc=curve, autoc=value, autoc_se=se, direction=Direction(direction), n_eval=evaluation.n,
                      n_boot=n_boot, seed=seed,
                      metadata={"bootstrap": "evaluation units resampled with (priority, score) pairs; nuisances fixed",
                                "split_fraction": str(split_fraction), "n_train": str(train.n)})


def write_toc_csv(report: RateReport, path) -> Path:
    path = Path(path)
    report.toc.to_frame().to_csv(path, index=False)
    return path


def write_rate_json(report: RateReport, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(report.to_document().json(indent=2))
    return path


def read_rate_json(path) -> RateDocument:
    return RateDocument.parse_file(path)
