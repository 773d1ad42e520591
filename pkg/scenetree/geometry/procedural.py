import math
from typing import List, Optional, Tuple

import numpy as np
import trimesh
from pydantic import BaseModel, ConfigDict, model_validator

from scenetree.errors import GeometryError
from scenetree.geometry.mesh import TriangleMesh


class SceneSpec(BaseModel):
    """Descriptor of a procedural house: axis-aligned rooms on a grid sharing walls,
    furniture boxes standing on the floors. Lengths in meters, ranges inclusive."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    room_count: Tuple[int, int] = (1, 4)
    room_extent: Tuple[float, float] = (3.0, 5.0)
    room_height: float = 2.6
    wall_thickness: float = 0.1
    ceiling: bool = True
    furniture_count: Tuple[int, int] = (2, 5)
    furniture_extent: Tuple[float, float] = (0.3, 1.2)
    max_placement_retries: int = 64

    @model_validator(mode="after")
    def check_ranges(self):
        problems = []
        for name in ("room_count", "room_extent", "furniture_count", "furniture_extent"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"{name}: empty range [{lo}, {hi}]")
        if self.room_count[0] < 1:
            problems.append(f"room_count: need at least one room, got {self.room_count}")
        if self.furniture_count[0] < 0:
            problems.append(f"furniture_count: must be nonnegative, got {self.furniture_count}")
        for name in ("room_extent", "furniture_extent"):
            if getattr(self, name)[0] <= 0:
                problems.append(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("room_height", "wall_thickness"):
            if getattr(self, name) <= 0:
                problems.append(f"{name}: must be positive, got {getattr(self, name)}")
        if self.room_extent[0] <= self.wall_thickness:
            problems.append("room_extent: rooms must be wider than the wall thickness")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class Box(BaseModel):
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def overlaps(self, other: "Box") -> bool:
        return all(a_lo < b_hi and b_lo < a_hi for a_lo, a_hi, b_lo, b_hi in zip(self.lo, self.hi, other.lo, other.hi))

    def contains(self, other: "Box") -> bool:
        return all(s_lo <= o_lo and o_hi <= s_hi for s_lo, s_hi, o_lo, o_hi in zip(self.lo, self.hi, other.lo, other.hi))

    def to_mesh(self) -> TriangleMesh:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        box = trimesh.creation.box(
            extents=hi - lo, transform=trimesh.transformations.translation_matrix((lo + hi) / 2)
        )
        return TriangleMesh.from_trimesh(box)


class SceneLayout(BaseModel):
    rooms: List[Box]
    walls: List[Box]
    floors: List[Box]
    ceilings: List[Box]
    furniture: List[List[Box]]

    def boxes(self) -> List[Box]:
        return self.walls + self.floors + self.ceilings + [b for room in self.furniture for b in room]


def _room_grid(rng: np.random.Generator, spec: SceneSpec) -> Tuple[List[Tuple[int, int]], np.ndarray, np.ndarray]:
    count = int(rng.integers(spec.room_count[0], spec.room_count[1] + 1))
    columns = int(math.ceil(math.sqrt(count)))
    rows = int(math.ceil(count / columns))
    widths = rng.uniform(*spec.room_extent, size=columns)
    depths = rng.uniform(*spec.room_extent, size=rows)
    x_edges = np.concatenate([[0.0], np.cumsum(widths)])
    y_edges = np.concatenate([[0.0], np.cumsum(depths)])
    cells = [(index % columns, index // columns) for index in range(count)]
    return cells, x_edges, y_edges


def _place_furniture(
    rng: np.random.Generator, spec: SceneSpec, room_index: int, interior: Box
) -> List[Box]:
    count = int(rng.integers(spec.furniture_count[0], spec.furniture_count[1] + 1))
    placed: List[Box] = []
    for box_index in range(count):
        for _ in range(spec.max_placement_retries):
            extent = rng.uniform(*spec.furniture_extent, size=3)
            extent[2] = min(extent[2], spec.room_height)
            free = np.asarray(interior.hi[:2]) - np.asarray(interior.lo[:2]) - extent[:2]
            if np.any(free < 0):
                continue
            corner = np.asarray(interior.lo[:2]) + rng.uniform(0.0, 1.0, size=2) * free
            candidate = Box(
                lo=(corner[0], corner[1], 0.0),
                hi=(corner[0] + extent[0], corner[1] + extent[1], extent[2]),
            )
            if not any(candidate.overlaps(other) for other in placed):
                placed.append(candidate)
                break
        else:
            raise GeometryError(
                f"could not place furniture box {box_index} in room {room_index}: "
                f"boxes with extents in {spec.furniture_extent} m must fit inside the room interior "
                f"{interior.lo[:2]}..{interior.hi[:2]} without overlapping each other "
                f"({spec.max_placement_retries} retries exhausted)"
            )
    return placed


def generate_layout(spec: SceneSpec) -> SceneLayout:
    rng = np.random.default_rng(spec.seed)
    cells, x_edges, y_edges = _room_grid(rng, spec)
    half = spec.wall_thickness / 2
    height = spec.room_height

    rooms, floors, ceilings, furniture = [], [], [], []
    walls = {}
    for room_index, (cx, cy) in enumerate(cells):
        x0, x1 = x_edges[cx], x_edges[cx + 1]
        y0, y1 = y_edges[cy], y_edges[cy + 1]
        rooms.append(Box(lo=(x0, y0, 0.0), hi=(x1, y1, height)))
        floors.append(Box(lo=(x0 - half, y0 - half, -spec.wall_thickness), hi=(x1 + half, y1 + half, 0.0)))
        if spec.ceiling:
            ceilings.append(Box(lo=(x0 - half, y0 - half, height), hi=(x1 + half, y1 + half, height + spec.wall_thickness)))

        # walls are keyed by the grid line they sit on, so neighbours share one slab
        walls[("x", cx, cy)] = Box(lo=(x0 - half, y0 - half, 0.0), hi=(x0 + half, y1 + half, height))
        walls[("x", cx + 1, cy)] = Box(lo=(x1 - half, y0 - half, 0.0), hi=(x1 + half, y1 + half, height))
        walls[("y", cx, cy)] = Box(lo=(x0 - half, y0 - half, 0.0), hi=(x1 + half, y0 + half, height))
        walls[("y", cx, cy + 1)] = Box(lo=(x0 - half, y1 - half, 0.0), hi=(x1 + half, y1 + half, height))

        interior = Box(lo=(x0 + half, y0 + half, 0.0), hi=(x1 - half, y1 - half, height))
        furniture.append(_place_furniture(rng, spec, room_index, interior))

    return SceneLayout(
        rooms=rooms,
        walls=list(walls.values()),
        floors=floors,
        ceilings=ceilings,
        furniture=furniture,
    )


def generate_scene(spec: SceneSpec, layout: Optional[SceneLayout] = None) -> TriangleMesh:
    """Deterministic toy house mesh for the given spec (same seed, same mesh)"""
    layout = layout or generate_layout(spec)
    mesh = TriangleMesh.concatenate(box.to_mesh() for box in layout.boxes())
    return TriangleMesh(mesh.vertices, mesh.faces, bounds=mesh.vertex_bounds())
