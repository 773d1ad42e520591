import math
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from transformers.utils import logging

from scenetree.errors import GeometryError, SerializationError
from scenetree.geometry.mesh import TriangleMesh

logger = logging.get_logger(__name__)

DEFAULT_VOXEL_SIZE = 0.022  # meters
DEFAULT_TRUNCATION = 0.1  # meters

# magic, version, reserved, dims, voxel_size, origin, truncation
_GRID_HEADER = struct.Struct("<4sHH3I5d")
_MASK_HEADER = struct.Struct("<4sHH3I")
_POINT_CHUNK = 1 << 18


@dataclass(frozen=True)
class TUDFGrid:
    """Dense truncated unsigned distance field, axes ordered (x, y, z) with z up.

    values[i, j, k] is sampled at the voxel center origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size.
    """

    values: np.ndarray
    voxel_size: float
    origin: Tuple[float, float, float]
    truncation: float

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if values.ndim != 3:
            raise GeometryError(f"TUDF values must be 3D, got shape {values.shape}")
        if self.voxel_size <= 0:
            raise GeometryError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.truncation <= 0:
            raise GeometryError(f"truncation must be positive, got {self.truncation}")
        if values.size and (values.min() < 0 or values.max() > np.float32(self.truncation)):
            raise GeometryError(
                f"TUDF values must lie in [0, {self.truncation}], "
                f"got [{values.min()}, {values.max()}]"
            )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def with_values(self, values: np.ndarray, voxel_size: Optional[float] = None) -> "TUDFGrid":
        return replace(
            self,
            values=values,
            voxel_size=self.voxel_size if voxel_size is None else voxel_size,
        )


def clamp_to_truncation(values: np.ndarray, truncation: float) -> np.ndarray:
    return np.clip(values, 0.0, np.float32(truncation)).astype(np.float32)


def _triangle_distance_sq(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact squared distance from every point to triangle (a, b, c).

    Voronoi-region walk for the closest point on a triangle, vectorized over points.
    The triangle must have nonzero area.
    """
    ab, ac = b - a, c - a
    ap = points - a
    d1, d2 = ap @ ab, ap @ ac
    bp = points - b
    d3, d4 = bp @ ab, bp @ ac
    cp = points - c
    d5, d6 = cp @ ab, cp @ ac

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_in, w_in = vb * denom, vc * denom

    conditions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    closest = np.empty_like(points)
    remaining = np.ones(len(points), dtype=bool)
    candidates = [
        lambda: a,
        lambda: b,
        lambda: a + t_ab[:, None] * ab,
        lambda: c,
        lambda: a + t_ac[:, None] * ac,
        lambda: b + t_bc[:, None] * (c - b),
    ]
    for condition, candidate in zip(conditions, candidates):
        selected = condition & remaining
        if selected.any():
            closest[selected] = np.broadcast_to(candidate(), points.shape)[selected]
            remaining &= ~condition
    if remaining.any():
        interior = a + v_in[:, None] * ab + w_in[:, None] * ac
        closest[remaining] = interior[remaining]
    diff = points - closest
    return np.einsum("ij,ij->i", diff, diff)


def grid_dims(bounds: np.ndarray, voxel_size: float) -> Tuple[int, int, int]:
    extent = bounds[1] - bounds[0]
    if np.any(extent <= 0):
        raise GeometryError(f"bounds must have positive extent, got {extent}")
    return tuple(max(1, int(math.ceil(e / voxel_size - 1e-9))) for e in extent)


def voxelize_tudf(
    mesh: TriangleMesh,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    truncation: float = DEFAULT_TRUNCATION,
    bounds: Optional[np.ndarray] = None,
) -> TUDFGrid:
    """Truncated unsigned distance from voxel centers to the nearest triangle.

    Every triangle only touches voxels inside its bounding box grown by the truncation,
    and within that window only those closer than truncation to its plane. Everything
    else is clipped to truncation anyway, so the result is exact.
    """
    if mesh.is_empty:
        raise GeometryError("cannot voxelize an empty mesh")
    if voxel_size <= 0 or truncation <= 0:
        raise GeometryError(f"voxel_size and truncation must be positive, got {voxel_size}, {truncation}")
    if bounds is None:
        bounds = mesh.bounds if mesh.bounds is not None else mesh.vertex_bounds()
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    dims = grid_dims(bounds, voxel_size)
    lo = bounds[0]

    dist_sq = np.full(dims, truncation * truncation, dtype=np.float64)
    areas = mesh.face_areas()
    degenerate = areas <= 1e-14
    if degenerate.any():
        logger.warning(f"skipping {int(degenerate.sum())} degenerate (zero-area) faces")

    triangles = mesh.vertices[mesh.faces[~degenerate]]
    for a, b, c in triangles:
        normal = np.cross(b - a, c - a)
        normal /= np.linalg.norm(normal)
        tri_lo = np.minimum(np.minimum(a, b), c) - truncation
        tri_hi = np.maximum(np.maximum(a, b), c) + truncation
        start = np.maximum(np.ceil((tri_lo - lo) / voxel_size - 0.5), 0).astype(int)
        stop = np.minimum(np.floor((tri_hi - lo) / voxel_size - 0.5), np.array(dims) - 1).astype(int) + 1
        if np.any(stop <= start):
            continue

        ys = lo[1] + (np.arange(start[1], stop[1]) + 0.5) * voxel_size
        zs = lo[2] + (np.arange(start[2], stop[2]) + 0.5) * voxel_size
        slab = len(ys) * len(zs)
        step = max(1, _POINT_CHUNK // slab)
        for x0 in range(start[0], stop[0], step):
            x1 = min(x0 + step, stop[0])
            xs = lo[0] + (np.arange(x0, x1) + 0.5) * voxel_size
            gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
            points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
            # only points inside the plane band can be closer than truncation
            near = np.abs((points - a) @ normal) < truncation
            if not near.any():
                continue
            d = np.full(len(points), truncation * truncation)
            d[near] = _triangle_distance_sq(points[near], a, b, c)
            window = (slice(x0, x1), slice(start[1], stop[1]), slice(start[2], stop[2]))
            np.minimum(dist_sq[window], d.reshape(gx.shape), out=dist_sq[window])


    values = clamp_to_truncation(np.sqrt(dist_sq), truncation)
    return TUDFGrid(values=values, voxel_size=voxel_size, origin=tuple(lo), truncation=truncation)


def augment(
    grid: TUDFGrid, flip_axes: Sequence[str] = (), rotation_quarter_turns: int = 0
) -> TUDFGrid:
    """Flip across x/y, then rotate counter-clockwise about z in quarter turns"""
    if not 0 <= rotation_quarter_turns <= 3:
        raise GeometryError(f"rotation_quarter_turns must be in [0, 3], got {rotation_quarter_turns}")
    values = grid.values
    for axis in flip_axes:
        if axis not in ("x", "y"):
            raise GeometryError(f"flip axis must be 'x' or 'y', got {axis!r}")
        values = np.flip(values, axis="xy".index(axis))
    values = np.rot90(values, k=rotation_quarter_turns, axes=(0, 1))
    return grid.with_values(np.ascontiguousarray(values))


def pad_to_multiple(grid: TUDFGrid, multiple: int, min_dims: Sequence[int] = (0, 0, 0)) -> Tuple[TUDFGrid, Tuple[int, int, int]]:
    """Pad the high end of every axis with truncation so dims divide `multiple`.
    Returns the padded grid and the original dims."""
    original = grid.dims
    target = [
        max(int(math.ceil(d / multiple)) * multiple, int(math.ceil(m / multiple)) * multiple)
        for d, m in zip(original, min_dims)
    ]
    pad = [(0, t - d) for t, d in zip(target, original)]
    if all(p == (0, 0) for p in pad):
        return grid, original
    values = np.pad(grid.values, pad, mode="constant", constant_values=np.float32(grid.truncation))
    return grid.with_values(values), original


def downsample_grid(grid: TUDFGrid, factor: int) -> TUDFGrid:
    """Average pooling with window `factor` on every axis (dims must divide)"""
    if factor == 1:
        return grid
    if any(d % factor for d in grid.dims):
        raise GeometryError(f"grid dims {grid.dims} not divisible by pooling factor {factor}")
    with torch.no_grad():
        pooled = F.avg_pool3d(torch.from_numpy(grid.values).double()[None, None], kernel_size=factor)
    values = clamp_to_truncation(pooled[0, 0].float().numpy(), grid.truncation)
    return grid.with_values(values, voxel_size=grid.voxel_size * factor)


def save_grid(grid: TUDFGrid, path: str):
    header = _GRID_HEADER.pack(
        b"TUDF", 1, 0, *grid.dims, grid.voxel_size, *grid.origin, grid.truncation
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.values.astype("<f4", copy=False).tobytes(order="C"))


def load_grid(path: str) -> TUDFGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _GRID_HEADER.size:
        raise SerializationError(f"{path}: truncated TUDF header")
    magic, version, _, dx, dy, dz, voxel_size, ox, oy, oz, truncation = _GRID_HEADER.unpack_from(raw)
    if magic != b"TUDF" or version != 1:
        raise SerializationError(f"{path}: not a TUDF v1 container (magic={magic!r}, version={version})")
    expected = dx * dy * dz * 4
    payload = raw[_GRID_HEADER.size:]
    if len(payload) != expected:
        raise SerializationError(f"{path}: expected {expected} value bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dx, dy, dz).astype(np.float32)
    return TUDFGrid(values=values, voxel_size=voxel_size, origin=(ox, oy, oz), truncation=truncation)


def save_mask(mask: np.ndarray, path: str):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise SerializationError(f"mask must be 3D, got shape {mask.shape}")
    with open(path, "wb") as f:
        f.write(_MASK_HEADER.pack(b"TMSK", 1, 0, *mask.shape))
        f.write(mask.astype(np.uint8).tobytes(order="C"))


def load_mask(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _MASK_HEADER.size:
        raise SerializationError(f"{path}: truncated mask header")
    magic, version, _, dx, dy, dz = _MASK_HEADER.unpack_from(raw)
    if magic != b"TMSK" or version != 1:
        raise SerializationError(f"{path}: not a mask v1 container (magic={magic!r})")
    payload = raw[_MASK_HEADER.size:]
    if len(payload) != dx * dy * dz:
        raise SerializationError(f"{path}: expected {dx * dy * dz} mask bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dx, dy, dz).astype(bool)
