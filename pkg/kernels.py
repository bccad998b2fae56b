from dataclasses import dataclass
from typing import Tuple
import logging

import numpy as np
from scipy.spatial.distance import cdist, pdist

from exceptions import KernelError


logger = logging.getLogger(__name__)

JITTER = 1e-8
MAX_BANDWIDTH_POINTS = 1000


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel k(u, v) = exp(-|u - v|^2 / (2 bandwidth^2)) acting on the given standardized columns."""
    bandwidth: float
    feature_columns: Tuple[int, ...]

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise KernelError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "feature_columns", tuple(int(c) for c in self.feature_columns))

    @classmethod
    def over(cls, n_features: int, bandwidth: float) -> "KernelSpec":
        return cls(bandwidth=float(bandwidth), feature_columns=tuple(range(n_features)))

    def select(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise KernelError(f"kernel inputs must be 2-d, got shape {points.shape}")
        if len(self.feature_columns) == 0 or max(self.feature_columns) >= points.shape[1]:
            raise KernelError(f"kernel acts on columns {self.feature_columns}, points have {points.shape[1]} columns")
        return points[:, list(self.feature_columns)]


def gram(points_a, points_b, spec: KernelSpec) -> np.ndarray:
    a = spec.select(points_a)
    b = spec.select(points_b)
    if a.shape[1] != b.shape[1]:
        raise KernelError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]} columns")
    # cdist evaluates every pair directly, so gram(A, B) is exactly gram(B, A).T
    sq_dist = cdist(a, b, metric="sqeuclidean")
    return np.exp(-sq_dist / (2.0 * spec.bandwidth ** 2))


def median_heuristic(points, max_points: int = MAX_BANDWIDTH_POINTS, seed: int = 0) -> float:
    """
    Median of pairwise Euclidean distances over distinct pairs, 1.0 when that median is 0.
    :param points: m x d matrix (standardized features)
    :param max_points: subsample size cap for the O(m^2) distance computation
    :param seed: seed for the subsample
    :return: the bandwidth
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.shape[0] < 2:
        raise KernelError("median heuristic needs at least 2 points")
    if points.shape[0] > max_points:
        # subsample from lexicographic row order so the bandwidth ignores input row order
        points = points[np.lexsort(points.T[::-1])]
        rng = np.random.default_rng(seed)
        points = points[np.sort(rng.choice(points.shape[0], size=max_points, replace=False))]
    median = float(np.median(pdist(points, metric="euclidean")))
    if median == 0:
        logger.debug("all points identical, falling back to bandwidth 1.0")
        return 1.0
    return median
