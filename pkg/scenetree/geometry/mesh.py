import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import trimesh
from skimage.measure import marching_cubes
from transformers.utils import logging

from scenetree.errors import GeometryError

logger = logging.get_logger(__name__)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup in world coordinates (meters). Meshes are allowed to be open
    (non-watertight); no orientation or manifoldness is assumed."""

    vertices: np.ndarray
    faces: np.ndarray
    bounds: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

        if not np.all(np.isfinite(vertices)):
            raise GeometryError("mesh vertices contain NaN or inf coordinates")
        if len(faces) > 0 and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise GeometryError(
                f"face indices out of range [0, {len(vertices)}): min={faces.min()}, max={faces.max()}"
            )
        if self.bounds is not None:
            bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
            object.__setattr__(self, "bounds", bounds)
            if len(vertices) > 0 and (
                np.any(vertices < bounds[0] - 1e-9) or np.any(vertices > bounds[1] + 1e-9)
            ):
                raise GeometryError("mesh bounding box does not contain all vertices")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def vertex_bounds(self) -> np.ndarray:
        if len(self.vertices) == 0:
            raise GeometryError("empty mesh has no bounds")
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "TriangleMesh":
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))

    @classmethod
    def concatenate(cls, meshes: Iterable["TriangleMesh"]) -> "TriangleMesh":
        vertices, faces, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            faces.append(mesh.faces + offset)
            offset += len(mesh.vertices)
        if not vertices:
            return cls.empty()
        return cls(np.concatenate(vertices), np.concatenate(faces))


def load_mesh(path: str) -> TriangleMesh:
    """Load an OBJ or PLY file. Scenes with several geometries are concatenated into one soup"""
    loaded = trimesh.load(path, force="mesh", process=False)
    if isinstance(loaded, trimesh.Scene):
        meshes = [g for g in loaded.geometry.values() if isinstance(g, trimesh.Trimesh)]
        if not meshes:
            raise GeometryError(f"no triangle geometry found in {path}")
        loaded = trimesh.util.concatenate(meshes)
    if not isinstance(loaded, trimesh.Trimesh):
        raise GeometryError(f"unsupported mesh type {type(loaded).__name__} in {path}")
    return TriangleMesh.from_trimesh(loaded)


def save_mesh(mesh: TriangleMesh, path: str):
    file_type = os.path.splitext(path)[1].lstrip(".").lower()
    if file_type not in ("obj", "ply"):
        raise GeometryError(f"unsupported mesh format: .{file_type} (use .obj or .ply)")
    if mesh.is_empty and file_type == "obj":
        with open(path, "w") as f:
            f.write("# empty mesh\n")
        return
    if file_type == "ply":
        data = mesh.to_trimesh().export(file_type="ply", encoding="ascii")
    else:
        data = mesh.to_trimesh().export(file_type="obj", include_normals=False)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as f:
        f.write(data)


def augment_mesh(
    mesh: TriangleMesh,
    flip_axes: Sequence[str] = (),
    rotation_quarter_turns: int = 0,
    center: Optional[Sequence[float]] = None,
) -> TriangleMesh:
    """Mirror of `augment` for meshes: flips across vertical planes through `center`,
    then counter-clockwise quarter turns about the vertical axis through `center`."""
    center = np.asarray(
        center if center is not None else mesh.vertex_bounds().mean(axis=0), dtype=np.float64
    )
    local = mesh.vertices - center
    for axis in flip_axes:
        if axis not in ("x", "y"):
            raise GeometryError(f"flip axis must be 'x' or 'y', got {axis!r}")
        local[:, "xy".index(axis)] *= -1.0
    for _ in range(rotation_quarter_turns % 4):
        local = np.stack([-local[:, 1], local[:, 0], local[:, 2]], axis=1)
    faces = mesh.faces
    if len(flip_axes) % 2 == 1:
        # mirroring inverts the winding
        faces = faces[:, ::-1]
    return TriangleMesh(local + center, faces)


def extract_mesh(grid, iso_level: Optional[float] = None) -> TriangleMesh:
    """Contour the unsigned field at `iso_level` (defaults to one voxel edge).

    On an unsigned field the level set is a thin double shell around every surface.
    Vertices are returned in world coordinates, values being sampled at voxel centers.
    """
    iso = grid.voxel_size if iso_level is None else float(iso_level)
    if not 0.0 < iso < grid.truncation:
        raise GeometryError(f"iso_level must lie in (0, {grid.truncation}), got {iso}")

    values = grid.values
    if not (values.min() < iso < values.max()):
        return TriangleMesh.empty()

    verts, faces, _, _ = marching_cubes(
        volume=values,
        level=iso,
        spacing=(grid.voxel_size,) * 3,
        allow_degenerate=False,
    )
    verts = verts + np.asarray(grid.origin) + 0.5 * grid.voxel_size
    logger.info(f"extracted {len(verts)} vertices / {len(faces)} faces at iso level {iso:.4f}")
    return TriangleMesh(verts, faces.astype(np.int64))
