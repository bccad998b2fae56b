from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union
import logging

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold

from exceptions import DataValidationError, EmptyArmError
from models.config import DatasetSchema


logger = logging.getLogger(__name__)

BLOCKS = ("x", "z", "w")


def _as_matrix(values, name: str) -> np.ndarray:
    out = np.asarray(values, dtype=float)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2:
        raise DataValidationError(f"{name} must be a 2-d matrix, got shape {out.shape}")
    return out


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class Dataset:
    """
    Observation table: outcome y, binary treatment a, covariates x, treatment proxies z and outcome proxies w.
    Arrays are copied and made read-only on construction.
    """
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_names: Tuple[str, ...] = ()
    z_names: Tuple[str, ...] = ()
    w_names: Tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).ravel()
        n = y.shape[0]
        if n < 2:
            raise DataValidationError(f"need at least 2 units, got {n}")
        if a.shape[0] != n:
            raise DataValidationError(f"treatment has {a.shape[0]} rows, outcome has {n}")
        if not np.all((a == 0) | (a == 1)):
            bad = np.flatnonzero((a != 0) & (a != 1))[0]
            raise DataValidationError(f"non-binary treatment value {a[bad]!r} at row {bad}")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a.astype(int)))
        for block in BLOCKS:
            matrix = _as_matrix(getattr(self, block), block)
            if matrix.shape[0] != n:
                raise DataValidationError(f"{block} has {matrix.shape[0]} rows, outcome has {n}")
            object.__setattr__(self, block, _frozen(matrix))
            names = getattr(self, f"{block}_names")
            if not names:
                names = tuple(f"{block}{j + 1}" for j in range(matrix.shape[1]))
            elif len(names) != matrix.shape[1]:
                raise DataValidationError(f"{block} has {matrix.shape[1]} columns but {len(names)} names")
            object.__setattr__(self, f"{block}_names", tuple(names))
        for name in ("y",) + BLOCKS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataValidationError(f"{name} contains missing or non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_treated(self) -> int:
        return int(self.a.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.a == arm

    def require_both_arms(self, context: str = "dataset"):
        if self.n_treated == 0 or self.n_control == 0:
            raise EmptyArmError(f"{context}: both treatment arms must be non-empty "
                                f"(treated={self.n_treated}, control={self.n_control})")

    def features(self, *blocks: str) -> np.ndarray:
        """horizontally stacks the named column groups, e.g. features("w", "x")"""
        return np.hstack([getattr(self, b) for b in blocks])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(y=self.y[index], a=self.a[index], x=self.x[index], z=self.z[index], w=self.w[index],
                       x_names=self.x_names, z_names=self.z_names, w_names=self.w_names)

    def to_frame(self, schema: DatasetSchema = None) -> pd.DataFrame:
        if schema is None:
            schema = self.default_schema()
        df = pd.DataFrame({schema.outcome: self.y, schema.treatment: self.a})
        for block, names in (("x", schema.covariates), ("z", schema.z_proxies), ("w", schema.w_proxies)):
            for j, name in enumerate(names):
                df[name] = getattr(self, block)[:, j]
        return df

    def default_schema(self) -> DatasetSchema:
        return DatasetSchema(outcome="y", treatment="a", covariates=list(self.x_names),
                             z_proxies=list(self.z_names), w_proxies=list(self.w_names))


def load_dataset(path: Union[str, Path], schema: DatasetSchema) -> Dataset:
    """
    Reads a header-row CSV and assigns column roles from the schema. Row order is preserved.
    :param path: CSV file path
    :param schema: column-role mapping
    :return: the validated Dataset
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"input file not found: {path}")
    df = pd.read_csv(path)
    wanted = [schema.outcome, schema.treatment] + schema.covariates + schema.z_proxies + schema.w_proxies
    unknown = [c for c in wanted if c not in df.columns]
    if unknown:
        raise DataValidationError(f"unknown column(s) in schema: {unknown}")
    df = df[wanted]
    missing_rows = np.flatnonzero(df.isna().any(axis=1).to_numpy())
    if len(missing_rows) > 0:
        raise DataValidationError(f"missing cell(s) in {len(missing_rows)} row(s), first at row {missing_rows[0]}")
    try:
        numeric = df.apply(pd.to_numeric)
    except ValueError as e:
        raise DataValidationError(f"non-numeric entry: {e}") from e
    a = numeric[schema.treatment].to_numpy(dtype=float)
    if not np.all((a == 0) | (a == 1)):
        bad = np.flatnonzero((a != 0) & (a != 1))[0]
        raise DataValidationError(f"non-binary treatment value {a[bad]!r} at row {bad}")
    dataset = Dataset(
        y=numeric[schema.outcome].to_numpy(),
        a=a,
        x=numeric[schema.covariates].to_numpy(),
        z=numeric[schema.z_proxies].to_numpy(),
        w=numeric[schema.w_proxies].to_numpy(),
        x_names=tuple(schema.covariates),
        z_names=tuple(schema.z_proxies),
        w_names=tuple(schema.w_proxies),
    )
    logger.info(f"Loaded {dataset.n} units from {path} (treated={dataset.n_treated}, control={dataset.n_control})")
    return dataset


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    n_folds: int
    seed: int

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.n_folds)


def assign_folds(n: int, n_folds: int, seed: int) -> FoldAssignment:
    """Seeded random permutation split into evenly sized folds (sizes differ by at most one). Folds are 0-based."""
    if n_folds < 2 or n_folds > n:
        raise DataValidationError(f"fold count must satisfy 2 <= C <= n, got C={n_folds}, n={n}")
    fold_of = np.empty(n, dtype=int)
    splitter = KFold(n_splits=n_folds, shuffle=True, random_state=seed)
    for fold, (_, test) in enumerate(splitter.split(np.zeros((n, 1)))):
        fold_of[test] = fold
    return FoldAssignment(fold_of=_frozen(fold_of), n_folds=n_folds, seed=seed)


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    scales: np.ndarray
    degenerate: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, matrix) -> "Standardizer":
        matrix = _as_matrix(matrix, "matrix")
        if matrix.shape[0] < 2:
            raise DataValidationError("standardization needs at least 2 rows")
        means = matrix.mean(axis=0)
        sd = matrix.std(axis=0, ddof=1)
        # constant columns are centered and keep scale 1
        degenerate = sd == 0
        scales = np.where(degenerate, 1.0, sd)
        return cls(means=_frozen(means), scales=_frozen(scales), degenerate=_frozen(degenerate))

    def transform(self, matrix) -> np.ndarray:
        matrix = _as_matrix(matrix, "matrix")
        if matrix.shape[1] != self.means.shape[0]:
            raise DataValidationError(f"expected {self.means.shape[0]} columns, got {matrix.shape[1]}")
        return (matrix - self.means) / self.scales

    def inverse_transform(self, matrix) -> np.ndarray:
        matrix = _as_matrix(matrix, "matrix")
        return matrix * self.scales + self.means

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "scales": self.scales.tolist(), "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(means=_frozen(np.asarray(d["means"], dtype=float)),
                   scales=_frozen(np.asarray(d["scales"], dtype=float)),
                   degenerate=_frozen(np.asarray(d["degenerate"], dtype=bool)))


def standardize(matrix) -> Tuple[np.ndarray, Standardizer]:
    standardizer = Standardizer.fit(matrix)
    return standardizer.transform(matrix), standardizer
