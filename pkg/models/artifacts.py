from pydantic import BaseModel
from typing import Dict, List, Optional


class StandardizerDocument(BaseModel):
    means: List[float]
    scales: List[float]
    degenerate: List[bool]


class KernelDocument(BaseModel):
    bandwidth: float
    feature_columns: List[int]
    multiplier: Optional[float]


class BridgeDocument(BaseModel):
    kind: str
    arm: int
    fold: Optional[int]
    alpha: List[float]
    anchors: List[List[float]]
    primal: KernelDocument
    adversary: KernelDocument
    lambda_primal: float
    lambda_adversary: float
    primal_standardizer: StandardizerDocument
    adversary_standardizer: StandardizerDocument
    train_index: Optional[List[int]]


class BridgeCollection(BaseModel):
    n_folds: Optional[int]
    seed: Optional[int]
    bridges: List[BridgeDocument]


class CateDocument(BaseModel):
    family: str
    intercept: float
    # kernel ridge
    anchors: Optional[List[List[float]]]
    weights: Optional[List[float]]
    kernel: Optional[KernelDocument]
    ridge: Optional[float]
    cap: Optional[float]
    cap_enabled: bool = False
    standardizer: Optional[StandardizerDocument]
    cv_scores: Optional[Dict[str, float]]
    # linear
    coefficients: Optional[List[float]]
    feature_names: List[str] = []


class TocPoint(BaseModel):
    q: float
    toc: float


class RateDocument(BaseModel):
    autoc: float
    autoc_se: float
    direction: str
    n_eval: int
    n_boot: int
    seed: int
    toc: List[TocPoint]
    metadata: Dict[str, str] = {}
