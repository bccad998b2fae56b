from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.stats import norm

from exceptions import DataValidationError, LeverageError, RankDeficiencyError
from scores import ScoreVector, gamma_values


logger = logging.getLogger(__name__)

LEVERAGE_TOL = 1e-10
STARS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


class AteResult(NamedTuple):
    estimate: float
    se: float


@dataclass(frozen=True)
class BlpResult:
    terms: Tuple[str, ...]
    coefficients: np.ndarray
    hc3_se: np.ndarray
    n_used: int
    covariates_standardized: bool = False

    @property
    def z_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.hc3_se > 0, self.coefficients / np.where(self.hc3_se > 0, self.hc3_se, 1.0), np.nan)

    @property
    def p_values(self) -> np.ndarray:
        """two-sided normal-approximation p-values; 0 when the SE is 0 and the coefficient is not"""
        z = self.z_values
        p = 2 * norm.sf(np.abs(z))
        exact = self.hc3_se == 0
        return np.where(exact, np.where(self.coefficients == 0, 1.0, 0.0), p)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"term": list(self.terms), "estimate": self.coefficients, "se": self.hc3_se,
                             "p_normal": self.p_values})


def _active(x, gamma) -> Tuple[np.ndarray, np.ndarray]:
    g = gamma_values(gamma)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] != g.shape[0]:
        raise DataValidationError(f"covariates have {x.shape[0]} rows, scores have {g.shape[0]}")
    if isinstance(gamma, ScoreVector) and gamma.weights is not None:
        index = gamma.active_index()
        return x[index], g[index]
    return x, g


def design_matrix(x) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def check_rank(design: np.ndarray, names: Sequence[str]):
    """raises RankDeficiencyError naming every column that adds nothing to the span of the columns before it"""
    if np.linalg.matrix_rank(design) == design.shape[1]:
        return
    offending, rank = [], 0
    for j in range(design.shape[1]):
        r = np.linalg.matrix_rank(design[:, :j + 1])
        if r == rank:
            offending.append(names[j])
        rank = r
    raise RankDeficiencyError(offending)


def ols_fit(x, gamma, names: Sequence[str] = None):
    """
    OLS of the scores on [1, x] with rank checking.
    :return: (statsmodels results with HC3 covariance, term names, design matrix)
    """
    x, g = _active(x, gamma)
    n, d = x.shape
    terms = ["intercept"] + (list(names) if names else [f"x{j + 1}" for j in range(d)])
    if len(terms) != d + 1:
        raise DataValidationError(f"{d} covariate columns but {len(terms) - 1} names")
    if n <= d + 1:
        raise DataValidationError(f"need more than {d + 1} units for {d} covariates, got {n}")
    design = design_matrix(x)
    check_rank(design, terms)
    results = sm.OLS(g, design).fit(cov_type="HC3")
    return results, terms, design


def leverages(design: np.ndarray, results) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", design, results.normalized_cov_params, design)


def best_linear_projection(x, gamma, names: Sequence[str] = None) -> BlpResult:
    """
    Least-squares projection of the pseudo-outcomes onto an intercept and the covariates, with HC3 standard errors.
    Covariates enter on their raw scale.
    """
    results, terms, design = ols_fit(x, gamma, names)
    h = leverages(design, results)
    if np.any(h >= 1 - LEVERAGE_TOL):
        raise LeverageError(int(np.argmax(h)))
    coefficients = np.asarray(results.params, dtype=float)
    if design.shape[1] == 1:
        # intercept-only projection is the sample mean
        coefficients = np.array([float(np.mean(results.model.endog))])
    se = np.asarray(results.bse, dtype=float)
    se = np.where(np.isfinite(se), se, 0.0)
    logger.info(f"BLP on {design.shape[0]} units and {design.shape[1] - 1} covariates")
    return BlpResult(terms=tuple(terms), coefficients=coefficients, hc3_se=se, n_used=design.shape[0])


def ate(gamma) -> AteResult:
    """sample mean of the scores with the plain standard error sd / sqrt(n)"""
    if isinstance(gamma, ScoreVector) and gamma.weights is not None:
        g = gamma.gamma[gamma.active_index()]
    else:
        g = gamma_values(gamma)
    if g.shape[0] < 2:
        raise DataValidationError("ATE standard error needs at least 2 scores")
    return AteResult(float(np.mean(g)), float(np.std(g, ddof=1) / np.sqrt(g.shape[0])))


def stars(p: float) -> str:
    for threshold, mark in STARS:
        if p < threshold:
            return mark
    return ""


def _cell(estimate: float, se: float, p: float) -> str:
    return f"{estimate:.3f} ({se:.3f}){stars(p)}"


def format_table(blp: BlpResult, ate_result: Optional[AteResult] = None) -> str:
    """
    Two-column summary in the usual regression-table layout: BLP coefficients with HC3 standard errors, and the
    ATE with its plain standard error on the intercept row.
    """
    p = blp.p_values
    rows = []
    for j, term in enumerate(blp.terms):
        ate_cell = ""
        if ate_result is not None and j == 0:
            ate_p = 2 * norm.sf(abs(ate_result.estimate / ate_result.se)) if ate_result.se > 0 else 0.0
            ate_cell = _cell(ate_result.estimate, ate_result.se, ate_p)
        rows.append({"term": term, "BLP": _cell(blp.coefficients[j], blp.hc3_se[j], p[j]), "ATE": ate_cell})
    df = pd.DataFrame(rows).set_index("term")
    df.index.name = None
    scale = "standardized" if blp.covariates_standardized else "raw"
    footer = [
        f"n = {blp.n_used}",
        f"covariates on the {scale} scale",
        "BLP standard errors: HC3; ATE standard error: sd / sqrt(n)",
        "*** p < 0.001, ** p < 0.01, * p < 0.05 (two-sided, normal approximation)",
    ]
    return df.to_string() + "\n\n" + "\n".join(footer) + "\n"


def write_report_csv(blp: BlpResult, ate_result: Optional[AteResult], path) -> Path:
    path = Path(path)
    df = blp.to_frame()
    if ate_result is not None:
        ate_p = 2 * norm.sf(abs(ate_result.estimate / ate_result.se)) if ate_result.se > 0 else 0.0
        df = pd.concat([df, pd.DataFrame([{"term": "ATE", "estimate": ate_result.estimate, "se": ate_result.se,
                                           "p_normal": ate_p}])], ignore_index=True)
    df.to_csv(path, index=False)
    return path
