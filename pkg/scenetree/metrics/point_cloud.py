from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from scenetree.errors import GeometryError
from scenetree.geometry.mesh import TriangleMesh, load_mesh

DEFAULT_NUM_POINTS = 8192
SOURCES = ("generated", "reference")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    source: str = "generated"

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if len(points) == 0:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(points)):
            raise GeometryError("point cloud has non-finite coordinates")
        if self.source not in SOURCES:
            raise GeometryError(f"point cloud source must be one of {SOURCES}, got {self.source!r}")

    def __len__(self) -> int:
        return len(self.points)


def sample_points(mesh: TriangleMesh, n: int = DEFAULT_NUM_POINTS, seed: int = 0, source: str = "generated") -> PointCloud:
    """Area-weighted uniform surface samples: a face drawn with probability proportional
    to its area, then a uniform barycentric point inside it."""
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = float(areas.sum())
    if total <= 0.0:
        raise GeometryError("cannot sample points from a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[faces]]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return PointCloud(points, source=source)


def load_point_cloud(path: str, n: int = DEFAULT_NUM_POINTS, seed: int = 0, source: str = "generated") -> PointCloud:
    return sample_points(load_mesh(path), n=n, seed=seed, source=source)


def augment_points(
    points: np.ndarray,
    flip_axes: Sequence[str] = (),
    rotation_quarter_turns: int = 0,
    center: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Flip across vertical planes, then quarter-turn counter-clockwise about z, through `center`"""
    center = points.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    local = points - center
    for axis in flip_axes:
        if axis not in ("x", "y"):
            raise GeometryError(f"flip axis must be 'x' or 'y', got {axis!r}")
        local[:, "xy".index(axis)] *= -1.0
    for _ in range(rotation_quarter_turns % 4):
        local = np.stack([-local[:, 1], local[:, 0], local[:, 2]], axis=1)
    return local + center
