"""
Synthetic proximal data with a known CATE, analytic bridge functions and the MSE benchmark.

Data-generating process (b = (0.25, 0.25, 0, 0, 0), c = (0.125, 0.125, 0, 0, 0)):

    X ~ N(0, 0.25 I_5)
    A | X ~ Bernoulli(1 / (1 + exp(c'X)))
    (Z, W, U) | A, X ~ N((0.25 + 0.25A + b'X, 0.25 + 0.125A + b'X, 0.25 + 0.25A + b'X), Sigma)
        Sigma = [[1, 0.25, 0.5], [0.25, 1, 0.5], [0.5, 0.5, 1]]
    Y = 2 + tau(X) A + b'X + 2 (0.25 + b'X + 0.5 (U - 0.25 - b'X)) + 2W + 0.25 eps
    tau(x) = exp(x1) - 3 x2

Outcome bridge. Given (A, X) the latent block is Gaussian with E[U | Z] = mu_U + 0.5 (Z - mu_Z) and
E[W | Z] = mu_W + 0.25 (Z - mu_Z), and mu_U = 2 mu_W - 0.25 - b'X, hence E[U | Z, A, X] = 2 E[W | Z, A, X] - 0.25 - b'X.
Substituting into E[Y | Z, A, X] leaves 2 + tau(X) A + b'X + 4 E[W | Z, A, X], so h(w, a, x) = 2 + tau(x) a + b'x + 4w.

Treatment bridge. Marginally W | A, X ~ N(0.25 + 0.125A + b'X, 1), so by Bayes
1 / P(A = a | W, X) = 1 + exp((-1)^a L(W, X)) with L = 0.125 w - 0.15625 (x1 + x2) - 0.0390625.
With Z | W, A = a, X ~ N(0.1875 + 0.21875a + 0.1875 (x1 + x2) + 0.25W, 0.9375), the lognormal moment of
exp((-1)^a theta_z Z) reproduces L when theta_z = 0.5. The variance term enters with the same sign for both
arms, so the intercept differs by arm:

    q(z, a, x) = 1 + exp((-1)^a (-0.25 + 0.125a + 0.5z - 0.25 (x1 + x2)))
"""
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Sequence
import logging
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from cate import fit_final, fit_kernel_ridge, predict_cate
from core import Dataset
from exceptions import BenchmarkError, OracleCertificationError, PLearnerError
from models.config import BenchmarkConfig
from scores import NuisancePredictions, crossfit_nuisances, pseudo_outcomes


logger = logging.getLogger(__name__)

N_COVARIATES = 5
COVARIATE_SD = 0.5
TREATMENT_COEF = np.array([0.125, 0.125, 0.0, 0.0, 0.0])
PROXY_COEF = np.array([0.25, 0.25, 0.0, 0.0, 0.0])
LATENT_BASE = 0.25
# arm shifts of the (Z, W, U) means
LATENT_ARM_SHIFT = np.array([0.25, 0.125, 0.25])
LATENT_COV = np.array([[1.0, 0.25, 0.5],
                       [0.25, 1.0, 0.5],
                       [0.5, 0.5, 1.0]])
OUTCOME_SD = 0.25

Q_INTERCEPT = -0.25
Q_ARM = 0.125
Q_Z = 0.5
Q_X = np.array([-0.25, -0.25, 0.0, 0.0, 0.0])

MEAN_TRUE_CATE = float(np.exp(0.125))

METHODS = ("plearner", "oracle", "naive")


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(1, -1) if x.ndim == 1 else x


def true_cate(x):
    """tau(x) = exp(x1) - 3 x2; a float for one point, a vector for a matrix"""
    rows = _rows(x)
    values = np.exp(rows[:, 0]) - 3.0 * rows[:, 1]
    return float(values[0]) if np.asarray(x).ndim == 1 else values


def _constant(x, value: float):
    rows = _rows(x)
    values = np.full(rows.shape[0], float(value))
    return float(values[0]) if np.asarray(x).ndim == 1 else values


def constant_cate(value: float) -> Callable:
    """CATE override with no heterogeneity, for null simulations"""
    return partial(_constant, value=value)


def oracle_h(w, a, x, cate_fn: Callable = true_cate):
    """outcome bridge 2 + tau(x) a + b'x + 4w"""
    rows = _rows(x)
    w = np.asarray(w, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    values = 2.0 + np.asarray(cate_fn(rows), dtype=float) * a + rows @ PROXY_COEF + 4.0 * w
    return float(values[0]) if np.asarray(x).ndim == 1 else values


def oracle_q(z, a, x):
    """treatment bridge 1 + exp((-1)^a (theta0 + theta_a a + theta_z z + theta_x'x)), always > 1"""
    rows = _rows(x)
    z = np.asarray(z, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    sign = np.where(a == 1, -1.0, 1.0)
    values = 1.0 + np.exp(sign * (Q_INTERCEPT + Q_ARM * a + Q_Z * z + rows @ Q_X))
    return float(values[0]) if np.asarray(x).ndim == 1 else values


@dataclass(frozen=True)
class DgpDraw:
    """Simulated sample. u and tau_true are for diagnostics; estimators receive only `dataset`."""
    dataset: Dataset
    u: np.ndarray
    tau_true: np.ndarray
    seed: int


def generate(n: int, seed: int, cate_fn: Callable = true_cate) -> DgpDraw:
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, COVARIATE_SD, size=(n, N_COVARIATES))
    propensity = 1.0 / (1.0 + np.exp(x @ TREATMENT_COEF))
    a = (rng.random(n) < propensity).astype(int)
    proxy_term = x @ PROXY_COEF
    means = LATENT_BASE + proxy_term[:, None] + a[:, None] * LATENT_ARM_SHIFT
    latent = means + rng.multivariate_normal(np.zeros(3), LATENT_COV, size=n)
    z, w, u = latent[:, 0], latent[:, 1], latent[:, 2]
    w_given_u = LATENT_BASE + proxy_term + 0.5 * (u - LATENT_BASE - proxy_term)
    tau = np.asarray(cate_fn(x), dtype=float)
    y = 2.0 + tau * a + proxy_term + 2.0 * w_given_u + 2.0 * w + OUTCOME_SD * rng.normal(size=n)
    dataset = Dataset(y=y, a=a, x=x, z=z, w=w,
                      x_names=tuple(f"x{j + 1}" for j in range(N_COVARIATES)), z_names=("z1",), w_names=("w1",))
    return DgpDraw(dataset=dataset, u=u, tau_true=tau, seed=seed)


def oracle_nuisances(dataset: Dataset, cate_fn: Callable = true_cate) -> NuisancePredictions:
    """analytic bridges evaluated at every unit, in place of cross-fitted estimates"""
    w = dataset.w[:, 0]
    return NuisancePredictions(
        oof_h0=oracle_h(w, np.zeros(dataset.n), dataset.x, cate_fn),
        oof_h1=oracle_h(w, np.ones(dataset.n), dataset.x, cate_fn),
        oof_q=oracle_q(dataset.z[:, 0], dataset.a, dataset.x),
    )


@dataclass(frozen=True)
class OracleCertification:
    outcome_coefficients: Dict[str, float]
    treatment_gaps: Dict[str, float]
    tolerance: float
    n: int

    @property
    def worst(self) -> float:
        return max(max(map(abs, self.outcome_coefficients.values())), max(map(abs, self.treatment_gaps.values())))

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def certify_oracle_bridges(n: int = 500_000, seed: int = 20_000, tol: float = 0.02) -> OracleCertification:
    """
    Monte Carlo check of both bridge equations: the regression of Y - h(W, A, X) on (1, Z, A, X) must have every
    coefficient within tol of 0, and mean(1{A=a} q(Z, a, X) g(W, X)) - mean(g) within tol for g in {1, W, X1}.
    """
    t = time.time()
    draw = generate(n, seed)
    data = draw.dataset
    w, z = data.w[:, 0], data.z[:, 0]
    residual = data.y - oracle_h(w, data.a, data.x)
    design = np.column_stack([np.ones(n), z, data.a, data.x])
    coefficients, *_ = np.linalg.lstsq(design, residual, rcond=None)
    names = ["intercept", "z1", "a"] + list(data.x_names)
    outcome = dict(zip(names, coefficients.tolist()))
    gaps = {}
    for arm in (0, 1):
        weight = (data.a == arm) * oracle_q(z, np.full(n, arm), data.x)
        for name, g in (("1", np.ones(n)), ("w1", w), ("x1", data.x[:, 0])):
            gaps[f"a={arm},g={name}"] = float(np.mean(weight * g) - np.mean(g))
    certification = OracleCertification(outcome_coefficients=outcome, treatment_gaps=gaps, tolerance=tol, n=n)
    logger.info(f"Oracle bridge certification on {n} draws: worst deviation {certification.worst:.4f} "
                f"(tolerance {tol}), {time.time() - t:.2f} s")
    return certification


def require_certified(certification: OracleCertification):
    if not certification.passed:
        failing = {k: v for k, v in {**certification.outcome_coefficients, **certification.treatment_gaps}.items()
                   if abs(v) > certification.tolerance}
        raise OracleCertificationError(f"oracle bridges fail Monte Carlo certification at n={certification.n}: "
                                       f"{failing}")


def naive_t_learner(train: Dataset, x_test, lambda_grid: Sequence[float], seed: int) -> np.ndarray:
    """kernel ridge outcome regressions per arm, ignoring the proxies"""
    fits = {}
    for arm in (0, 1):
        mask = train.arm_mask(arm)
        fits[arm] = fit_kernel_ridge(train.x[mask], train.y[mask], lambda_grid, seed=seed)
    return predict_cate(fits[1], x_test) - predict_cate(fits[0], x_test)


def _benchmark_seed(seed: int, n_train: int, n_test: int, config: BenchmarkConfig):
    t = time.time()
    train_seed, test_seed, fit_seed = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]
    train = generate(n_train, train_seed)
    test = generate(n_test, test_seed)
    data, pipeline = train.dataset, config.pipeline
    rows, scatter = [], []

    def record(method: str, tau_hat: np.ndarray, started: float):
        error = tau_hat - test.tau_true
        rows.append({"seed": seed, "method": method, "mse": float(np.mean(error ** 2)), "bias": float(np.mean(error)),
                     "wall_time_sec": time.time() - started})
        scatter.append(pd.DataFrame({"seed": seed, "method": method, "tau_hat": tau_hat, "tau_true": test.tau_true}))

    try:
        started = time.time()
        nuisances = crossfit_nuisances(data, pipeline.n_folds, pipeline.bridge, fit_seed)
        scores = pseudo_outcomes(data, nuisances, pipeline.clip_threshold)
        model = fit_final(data.x, scores, pipeline.cate, fit_seed, data.x_names)
        record("plearner", predict_cate(model, test.dataset.x), started)

        started = time.time()
        oracle_scores = pseudo_outcomes(data, oracle_nuisances(data), pipeline.clip_threshold)
        oracle_model = fit_final(data.x, oracle_scores, pipeline.cate, fit_seed, data.x_names)
        record("oracle", predict_cate(oracle_model, test.dataset.x), started)

        started = time.time()
        record("naive", naive_t_learner(data, test.dataset.x, config.naive_lambda_grid, fit_seed), started)
    except (PLearnerError, ValueError, np.linalg.LinAlgError) as e:
        raise BenchmarkError(seed, e) from e
    logger.info(f"Benchmark seed {seed}: n_train={n_train}, n_test={n_test}, done, {time.time() - t:.2f} s")
    return rows, pd.concat(scatter, ignore_index=True)


@dataclass(frozen=True)
class BenchmarkResult:
    table: pd.DataFrame
    scatter: pd.DataFrame
    certification: OracleCertification = field(default=None)

    def summary(self) -> pd.DataFrame:
        return self.table.groupby("method")[["mse", "bias", "wall_time_sec"]].mean()


def benchmark_mse(n_train: int, n_test: int, seeds: List[int], config: BenchmarkConfig = None,
                  n_jobs: int = 1) -> BenchmarkResult:
    """
    Test-set MSE of the P-learner with estimated bridges, the same learner with the analytic bridges, and a naive
    T-learner, one row per (seed, method). The analytic bridges are certified first.
    """
    if not seeds:
        raise BenchmarkError(-1, ValueError("no seeds given"))
    config = config or BenchmarkConfig()
    certification = certify_oracle_bridges(config.certification_n, config.certification_seed,
                                           config.certification_tol)
    require_certified(certification)
    results = Parallel(n_jobs=n_jobs)(delayed(_benchmark_seed)(s, n_train, n_test, config) for s in seeds)
    table = pd.DataFrame([row for rows, _ in results for row in rows], columns=["seed", "method", "mse", "bias",
                                                                                   "wall_time_sec"])
    scatter = pd.concat([frame for _, frame in results], ignore_index=True)
    return BenchmarkResult(table=table, scatter=scatter, certification=certification)
