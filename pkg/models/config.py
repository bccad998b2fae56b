from pydantic import BaseModel, Field, validator, root_validator
from typing import List, Optional
from pathlib import Path
import enum
import json

import numpy as np
import toml

from exceptions import ConfigError


class FinalStage(str, enum.Enum):
    kernel_ridge = "kernel_ridge"
    linear = "linear"


class Estimand(str, enum.Enum):
    ate = "ate"
    catt = "catt"


class Direction(str, enum.Enum):
    benefit_desc = "benefit_desc"
    harm_asc = "harm_asc"


def read_config_file(path) -> dict:
    """
    Reads a JSON or TOML key/value file, chosen by suffix (.toml -> TOML, anything else -> JSON).
    :param path: file path
    :return: the parsed mapping
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            if path.suffix.lower() == ".toml":
                return toml.load(f)
            return json.load(f)
    except (toml.TomlDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"unable to parse {path}: {e}") from e


def _positive_list(values: List[float], field_name: str) -> List[float]:
    if len(values) == 0:
        raise ValueError(f"{field_name} must not be empty")
    if any(v <= 0 for v in values):
        raise ValueError(f"{field_name} values must be > 0")
    return [float(v) for v in values]


class DatasetSchema(BaseModel):
    outcome: str
    treatment: str
    covariates: List[str]
    z_proxies: List[str]
    w_proxies: List[str]

    @validator("covariates", "z_proxies", "w_proxies")
    def non_empty(cls, v, field):
        if len(v) == 0:
            raise ValueError(f"{field.name} must name at least one column")
        return v

    @root_validator(skip_on_failure=True)
    def single_role(cls, values):
        columns = [values["outcome"], values["treatment"]] + values["covariates"] + values["z_proxies"] + values["w_proxies"]
        duplicated = sorted({c for c in columns if columns.count(c) > 1})
        if duplicated:
            raise ValueError(f"columns assigned to more than one role: {duplicated}")
        return values

    @classmethod
    def from_file(cls, path) -> "DatasetSchema":
        return cls.parse_obj(read_config_file(path))


class BridgeHyper(BaseModel):
    # the moment term carries Omega's 1/(4n^2) scale, so useful primal penalties sit well below 1e-3
    lambda_primal_grid: List[float] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
    lambda_adversary_grid: List[float] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    primal_bandwidth_multipliers: List[float] = [0.5, 1.0, 2.0]
    adversary_bandwidth_multipliers: List[float] = [0.5, 1.0, 2.0]
    n_splits: int = 2
    # critic used to score every candidate on validation splits
    scoring_lambda: float = 0.1

    _grids = validator(
        "lambda_primal_grid", "lambda_adversary_grid", "primal_bandwidth_multipliers",
        "adversary_bandwidth_multipliers", allow_reuse=True
    )(lambda v, field: _positive_list(v, field.name))

    @validator("n_splits")
    def enough_splits(cls, v):
        if v < 2:
            raise ValueError("n_splits must be >= 2")
        return v

    @validator("scoring_lambda")
    def positive_scoring_lambda(cls, v):
        if v <= 0:
            raise ValueError("scoring_lambda must be > 0")
        return v

    @classmethod
    def desk(cls) -> "BridgeHyper":
        """compact grid for benchmark runs, where the kernel solves dominate wall time"""
        return cls(
            lambda_primal_grid=[1e-6, 1e-5, 1e-4],
            lambda_adversary_grid=[1e-2],
            primal_bandwidth_multipliers=[1.0],
            adversary_bandwidth_multipliers=[1.0],
        )

    @property
    def n_candidates(self) -> int:
        return (len(self.lambda_primal_grid) * len(self.lambda_adversary_grid)
                * len(self.primal_bandwidth_multipliers) * len(self.adversary_bandwidth_multipliers))


class CateConfig(BaseModel):
    family: FinalStage = FinalStage.kernel_ridge
    lambda_grid: List[float] = Field(default_factory=lambda: [float(v) for v in np.logspace(-4, 1, 10)])
    n_splits: int = 5
    cap: bool = False

    _grid = validator("lambda_grid", allow_reuse=True)(lambda v, field: _positive_list(v, field.name))

    @validator("n_splits")
    def enough_splits(cls, v):
        if v < 2:
            raise ValueError("n_splits must be >= 2")
        return v


class PipelineConfig(BaseModel):
    n_folds: int = 5
    bridge: BridgeHyper = Field(default_factory=BridgeHyper)
    cate: CateConfig = Field(default_factory=CateConfig)
    clip: bool = True
    q_max: float = 50.0
    faithful: bool = False
    estimand: Estimand = Estimand.ate

    @validator("n_folds")
    def enough_folds(cls, v):
        if v < 2:
            raise ValueError("n_folds must be >= 2")
        return v

    @validator("q_max")
    def positive_q_max(cls, v):
        if v <= 0:
            raise ValueError("q_max must be > 0")
        return v

    @property
    def clip_threshold(self) -> Optional[float]:
        if self.faithful or not self.clip:
            return None
        return self.q_max

    @classmethod
    def desk(cls) -> "PipelineConfig":
        return cls(bridge=BridgeHyper.desk())


class BenchmarkConfig(BaseModel):
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig.desk)
    naive_lambda_grid: List[float] = Field(default_factory=lambda: [float(v) for v in np.logspace(-4, 1, 10)])
    certification_n: int = 500_000
    certification_tol: float = 0.02
    certification_seed: int = 20_000


class RunConfig(BaseModel):
    command: str
    out: str
    input: Optional[str] = None
    schema_path: Optional[str] = None
    dataset_schema: Optional[DatasetSchema] = None
    seed: int = 0
    seeds: List[int] = []
    threads: int = 1
    n: Optional[int] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    boot: int = 200
    direction: Direction = Direction.benefit_desc
    split_fraction: float = 0.5
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    benchmark: Optional[BenchmarkConfig] = None

    @validator("threads")
    def positive_threads(cls, v):
        if v < 1:
            raise ValueError("threads must be >= 1")
        return v

    @validator("boot")
    def enough_replicates(cls, v):
        if v < 2:
            raise ValueError("boot must be >= 2")
        return v

    @validator("split_fraction")
    def proper_fraction(cls, v):
        if not 0 < v < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        return v

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.json"
        with open(path, "w") as f:
            f.write(self.json(indent=2))
        return path
