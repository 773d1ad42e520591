import hashlib
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from scenetree.errors import GeometryError
from scenetree.metrics.distances import (
    DEFAULT_EMD_EPSILON,
    DEFAULT_EMD_EXACT_THRESHOLD,
    chamfer,
    emd,
    emd_is_exact,
    pairwise_distances,
)
from scenetree.metrics.point_cloud import PointCloud, augment_points

DISTANCES = ("cd", "emd")


class MetricReport(BaseModel):
    mmd_cd: Optional[float] = Field(default=None, ge=0)
    mmd_emd: Optional[float] = Field(default=None, ge=0)
    cov_cd: Optional[float] = Field(default=None, ge=0, le=1)
    cov_emd: Optional[float] = Field(default=None, ge=0, le=1)
    nna_cd: Optional[float] = Field(default=None, ge=0, le=1)
    nna_emd: Optional[float] = Field(default=None, ge=0, le=1)
    num_generated: int
    num_reference: int
    num_points: Optional[int] = None
    seeds: Dict[str, int] = Field(default_factory=dict)
    chamfer_convention: str = "mean squared nearest-neighbour distance, both directions summed"
    emd_solver: Optional[str] = None
    emd_epsilon: Optional[float] = None
    distance_checksum: str = ""
    fid: Optional[float] = Field(default=None, description="merged from an external renderer, never computed here")


def metrics_from_matrices(d_gr: np.ndarray, d_gg: np.ndarray, d_rr: np.ndarray) -> Tuple[float, float, float]:
    """(MMD, COV, 1-NNA) from generated x reference, generated x generated and
    reference x reference distance matrices.

    COV ties pick the lowest reference index. In 1-NNA a cloud is never its own neighbour
    and a distance tie between the two sets resolves to the reference set.
    """
    n_g, n_r = d_gr.shape
    mmd = float(np.mean(d_gr.min(axis=0)))
    cov = len(set(np.argmin(d_gr, axis=1).tolist())) / n_r

    d_gg = d_gg.astype(np.float64, copy=True)
    d_rr = d_rr.astype(np.float64, copy=True)
    np.fill_diagonal(d_gg, np.inf)
    np.fill_diagonal(d_rr, np.inf)
    generated_hits = np.sum(d_gg.min(axis=1) < d_gr.min(axis=1))
    reference_hits = np.sum(d_rr.min(axis=1) <= d_gr.min(axis=0))
    nna = float(generated_hits + reference_hits) / (n_g + n_r)
    return mmd, cov, nna


def _checksum(matrices: Sequence[np.ndarray]) -> str:
    digest = hashlib.sha256()
    for matrix in matrices:
        digest.update(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


def set_metrics(
    generated: Sequence[PointCloud],
    reference: Sequence[PointCloud],
    distances: Sequence[str] = DISTANCES,
    emd_exact_threshold: int = DEFAULT_EMD_EXACT_THRESHOLD,
    emd_epsilon: float = DEFAULT_EMD_EPSILON,
    num_workers: int = 4,
) -> MetricReport:
    if not generated or not reference:
        raise GeometryError("set metrics need nonempty generated and reference sets")
    unknown = set(distances) - set(DISTANCES)
    if unknown:
        raise ValueError(f"unknown distances {sorted(unknown)}, expected a subset of {DISTANCES}")

    fields, matrices = {}, []
    for name in distances:
        if name == "cd":
            distance = chamfer
        else:
            distance = partial(emd, exact_threshold=emd_exact_threshold, epsilon=emd_epsilon)
        d_gr = pairwise_distances(generated, reference, distance, num_workers)
        d_gg = pairwise_distances(generated, generated, distance, num_workers, symmetric=True)
        d_rr = pairwise_distances(reference, reference, distance, num_workers, symmetric=True)
        fields[f"mmd_{name}"], fields[f"cov_{name}"], fields[f"nna_{name}"] = metrics_from_matrices(d_gr, d_gg, d_rr)
        matrices += [d_gr, d_gg, d_rr]

    sizes = {len(cloud) for cloud in list(generated) + list(reference)}
    if "emd" in distances:
        exact = all(emd_is_exact(n, emd_exact_threshold) for n in sizes)
        fields["emd_solver"] = "exact" if exact else "auction"
        fields["emd_epsilon"] = None if exact else emd_epsilon
    return MetricReport(
        num_generated=len(generated),
        num_reference=len(reference),
        num_points=sizes.pop() if len(sizes) == 1 else None,
        distance_checksum=_checksum(matrices),
        **fields,
    )


AUGMENTATIONS = [((), k) for k in range(4)] + [(("x",), k) for k in range(4)]


def retrieve_nearest(
    query: PointCloud, training: Sequence[PointCloud], top_k: int = 3
) -> List[Tuple[int, float, Tuple[str, ...], int]]:
    """Top-k training clouds closest to `query` by Chamfer distance, minimized over the
    flip / quarter-turn augmentations of each training cloud.

    Returns (training index, distance, flip axes, quarter turns) sorted by distance.
    """
    results = []
    for index, cloud in enumerate(training):
        best = None
        for flips, turns in AUGMENTATIONS:
            augmented = PointCloud(augment_points(cloud.points, flips, turns), source=cloud.source)
            d = chamfer(query, augmented)
            if best is None or d < best[1]:
                best = (index, d, tuple(flips), turns)
        results.append(best)
    results.sort(key=lambda r: (r[1], r[0]))
    return results[:top_k]
