from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from transformers.utils import logging

from scenetree.errors import ShapeMismatchError
from scenetree.metrics.point_cloud import PointCloud

logger = logging.get_logger(__name__)

DEFAULT_EMD_EXACT_THRESHOLD = 256
DEFAULT_EMD_EPSILON = 1e-3


def _nearest_squared(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    _, index = cKDTree(target).query(query, k=1)
    # recomputed from the coordinates so the value matches a brute-force evaluation
    return np.sum((query - target[index]) ** 2, axis=1)


def chamfer(x: PointCloud, y: PointCloud) -> float:
    """Symmetric Chamfer distance on squared nearest-neighbour distances:
    mean_x min_y |x - y|^2 + mean_y min_x |x - y|^2"""
    return float(np.mean(_nearest_squared(x.points, y.points)) + np.mean(_nearest_squared(y.points, x.points)))


def emd_is_exact(num_points: int, exact_threshold: int = DEFAULT_EMD_EXACT_THRESHOLD) -> bool:
    return num_points <= exact_threshold


def _auction_assignment(x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Forward auction with epsilon scaling for the min-cost perfect matching of x onto y.

    Total cost is within n * epsilon of the optimum, so the mean is within epsilon.
    Cost rows are recomputed for the bidders of each round instead of storing an n x n matrix.
    """
    n = len(x)
    prices = np.zeros(n)
    extent = float(np.linalg.norm(np.ptp(np.concatenate([x, y]), axis=0))) or 1.0
    eps = max(extent / 4.0, epsilon)
    while True:
        owner = np.full(n, -1, dtype=np.int64)
        assigned = np.full(n, -1, dtype=np.int64)
        unassigned = np.arange(n)
        while len(unassigned):
            values = -cdist(x[unassigned], y) - prices[None, :]
            best = np.argmax(values, axis=1)
            rows = np.arange(len(unassigned))
            best_value = values[rows, best]
            values[rows, best] = -np.inf
            second_value = values.max(axis=1) if n > 1 else best_value
            bids = prices[best] + (best_value - second_value) + eps

            # highest bid per object wins; ties go to the lower person index
            order = np.lexsort((unassigned, -bids, best))
            objects, first = np.unique(best[order], return_index=True)
            winners = unassigned[order[first]]
            previous = owner[objects]
            assigned[previous[previous >= 0]] = -1
            owner[objects] = winners
            assigned[winners] = objects
            prices[objects] = bids[order[first]]
            unassigned = np.flatnonzero(assigned < 0)
        if eps <= epsilon:
            return assigned
        eps = max(eps / 4.0, epsilon)


def emd(
    x: PointCloud,
    y: PointCloud,
    exact_threshold: int = DEFAULT_EMD_EXACT_THRESHOLD,
    epsilon: float = DEFAULT_EMD_EPSILON,
) -> float:
    """Mean Euclidean cost of the minimum-cost perfect matching between equal-size clouds.

    Optimal assignment up to `exact_threshold` points, epsilon-scaling auction above it
    (mean within `epsilon` of the optimum).
    """
    if len(x) != len(y):
        raise ShapeMismatchError(f"EMD needs equal-size point clouds, got {len(x)} and {len(y)}")
    if emd_is_exact(len(x), exact_threshold):
        cost = cdist(x.points, y.points)
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    assignment = _auction_assignment(x.points, y.points, epsilon)
    return float(np.linalg.norm(x.points - y.points[assignment], axis=1).mean())


def pairwise_distances(
    rows: Sequence[PointCloud],
    cols: Sequence[PointCloud],
    distance: Callable[[PointCloud, PointCloud], float],
    num_workers: int = 4,
    symmetric: bool = False,
) -> np.ndarray:
    """Distance matrix computed on a thread pool; every entry lands at its own (i, j)"""
    if symmetric:
        pairs = [(i, j) for i in range(len(rows)) for j in range(i + 1, len(cols))]
    else:
        pairs = [(i, j) for i in range(len(rows)) for j in range(len(cols))]
    matrix = np.zeros((len(rows), len(cols)), dtype=np.float64)
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        values = list(pool.map(lambda ij: distance(rows[ij[0]], cols[ij[1]]), pairs))
    for (i, j), value in zip(pairs, values):
        matrix[i, j] = value
        if symmetric:
            matrix[j, i] = value
    return matrix
