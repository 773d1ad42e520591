import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from transformers.utils import logging

from scenetree.errors import SerializationError, ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid, clamp_to_truncation, pad_to_multiple
from scenetree.latent_tree.codec import LatentGrid, LevelCodec, decode_level

logger = logging.get_logger(__name__)

_TREE_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, N, C
_TREE_GEOMETRY = struct.Struct("<3I3I5d")  # root dims, original dims, voxel_size, origin, truncation


@dataclass(frozen=True)
class TreeLevel:
    geometry: TUDFGrid
    latent: LatentGrid


@dataclass(frozen=True)
class LatentTree:
    """Levels 1..N-1 ordered coarse to fine; levels[0] holds (L_1, H_1).

    factors[i - 1] is the upsampling factor from level i to i + 1.
    """

    levels: List[Optional[TreeLevel]]
    factors: Tuple[int, ...]
    root_dims: Tuple[int, int, int]
    original_dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float]
    truncation: float

    def __post_init__(self):
        if self.num_levels < 2:
            raise ShapeMismatchError(f"a latent tree needs N >= 2 levels, got {self.num_levels}")
        for index, level in enumerate(self.levels):
            if level is None:
                continue
            if level.geometry.dims != level.latent.dims:
                raise ShapeMismatchError(f"level {index + 1}: geometry and latent grids are not co-registered")
            expected = self.level_dims(index + 1)
            if level.geometry.dims != expected:
                raise ShapeMismatchError(f"level {index + 1}: dims {level.geometry.dims}, expected {expected}")

    @property
    def num_levels(self) -> int:
        return len(self.factors) + 1

    @property
    def latent_channels(self) -> int:
        return next(level.latent.channels for level in self.levels if level is not None)

    def level_dims(self, level: int) -> Tuple[int, int, int]:
        scale = int(np.prod(self.factors[level - 1:]))
        return tuple(d // scale for d in self.root_dims)

    def nbytes(self) -> int:
        return sum(level.geometry.values.nbytes + level.latent.values.nbytes for level in self.levels if level)


def cumulative_factor(factors: Sequence[int]) -> int:
    return int(np.prod(factors))


@torch.no_grad()
def encode_scene(codec: LevelCodec, scene: TUDFGrid) -> Tuple[TUDFGrid, LatentGrid]:
    """encode_level over a whole scene with non-overlapping output tiles.

    Each tile is encoded with `receptive_halo` coarse voxels of context that are cropped
    away afterwards, so the result does not depend on tiling or on visit order.
    """
    f, tile, halo = codec.config.factor, codec.config.tile_size, codec.receptive_halo
    if any(d % f for d in scene.dims):
        raise ShapeMismatchError(f"scene dims {scene.dims} are not divisible by factor {f}")
    coarse_dims = [d // f for d in scene.dims]
    values = torch.from_numpy(scene.values).to(device=codec.device, dtype=codec.dtype)[None, None]

    latent = np.zeros((codec.config.code_channels, *coarse_dims), dtype=np.float32)
    geometry = np.zeros(coarse_dims, dtype=np.float32)
    starts = [range(0, d, tile) for d in coarse_dims]
    for ox in starts[0]:
        for oy in starts[1]:
            for oz in starts[2]:
                out_lo = np.array([ox, oy, oz])
                out_hi = np.minimum(out_lo + tile, coarse_dims)
                in_lo = np.maximum(out_lo - halo, 0)
                in_hi = np.minimum(out_hi + halo, coarse_dims)
                crop = values[
                    :, :,
                    in_lo[0] * f:in_hi[0] * f,
                    in_lo[1] * f:in_hi[1] * f,
                    in_lo[2] * f:in_hi[2] * f,
                ]
                pooled, code = codec.encode(crop)
                keep = tuple(slice(a, b) for a, b in zip(out_lo - in_lo, out_hi - in_lo))
                target = tuple(slice(a, b) for a, b in zip(out_lo, out_hi))
                latent[(slice(None),) + target] = code[0][(slice(None),) + keep].float().cpu().numpy()
                geometry[target] = pooled[0, 0][keep].float().cpu().numpy()

    coarse = scene.with_values(clamp_to_truncation(geometry, scene.truncation), voxel_size=scene.voxel_size * f)
    return coarse, LatentGrid(latent, level=codec.config.level)


def _check_codecs(codecs: Sequence[LevelCodec]):
    for index, codec in enumerate(codecs):
        if codec.config.level != index + 1:
            raise ShapeMismatchError(
                f"codec at position {index} is for level {codec.config.level}, expected level {index + 1}"
            )


def build_tree(codecs: Sequence[LevelCodec], scene: TUDFGrid) -> LatentTree:
    """Decompose a root-level scene into {L_1, H_1, ..., L_{N-1}, H_{N-1}}.
    Dims that do not divide the cumulative factor are padded with truncation."""
    _check_codecs(codecs)
    factors = tuple(codec.config.factor for codec in codecs)
    padded, original = pad_to_multiple(scene, cumulative_factor(factors))
    if padded.dims != original:
        logger.info(f"padded scene {original} -> {padded.dims} to divide the cumulative factor")

    levels: List[Optional[TreeLevel]] = [None] * len(codecs)
    current = padded
    for level in range(len(codecs), 0, -1):
        geometry, latent = encode_scene(codecs[level - 1], current)
        levels[level - 1] = TreeLevel(geometry=geometry, latent=latent)
        current = geometry
    return LatentTree(
        levels=levels,
        factors=factors,
        root_dims=padded.dims,
        original_dims=original,
        voxel_size=scene.voxel_size,
        origin=scene.origin,
        truncation=scene.truncation,
    )


def reconstruct(codecs: Sequence[LevelCodec], tree: LatentTree, crop: bool = True) -> TUDFGrid:
    """Decode from level 1 up to the root; the latent of each level comes from the tree,
    the geometry is the previous decode output. Cropped to the pre-padding dims by default."""
    _check_codecs(codecs)
    if len(codecs) != tree.num_levels - 1:
        raise ShapeMismatchError(f"tree has {tree.num_levels} levels but {len(codecs)} codecs were given")
    missing = [index + 1 for index, level in enumerate(tree.levels) if level is None]
    if missing:
        raise ShapeMismatchError(f"latent tree is missing levels {missing}")

    current = tree.levels[0].geometry
    for level in range(1, tree.num_levels):
        current = decode_level(codecs[level - 1], current, tree.levels[level - 1].latent)
    if crop and current.dims != tree.original_dims:
        x, y, z = tree.original_dims
        current = current.with_values(current.values[:x, :y, :z])
    return current


@torch.no_grad()
def evaluate_reconstruction(codec: LevelCodec, scenes: Sequence[TUDFGrid]) -> float:
    """Mean squared l2 error of decode(encode(L_{i+1})) over whole scenes at level i+1"""
    errors = []
    for scene in scenes:
        padded, original = pad_to_multiple(scene, codec.config.factor)
        coarse, latent = encode_scene(codec, padded)
        recon = decode_level(codec, coarse, latent)
        x, y, z = original
        diff = recon.values[:x, :y, :z].astype(np.float64) - scene.values.astype(np.float64)
        errors.append(np.mean(diff ** 2))
    return float(np.mean(errors))


def save_tree(tree: LatentTree, path: str):
    missing = [index + 1 for index, level in enumerate(tree.levels) if level is None]
    if missing:
        raise SerializationError(f"cannot save a tree with missing levels {missing}")
    with open(path, "wb") as f:
        f.write(_TREE_HEADER.pack(b"LTRE", 1, 0, tree.num_levels, tree.latent_channels))
        f.write(struct.pack(f"<{len(tree.factors)}I", *tree.factors))
        f.write(
            _TREE_GEOMETRY.pack(
                *tree.root_dims, *tree.original_dims, tree.voxel_size, *tree.origin, tree.truncation
            )
        )
        for level in tree.levels:
            f.write(level.geometry.values.astype("<f4", copy=False).tobytes(order="C"))
            f.write(level.latent.values.astype("<f4", copy=False).tobytes(order="C"))


def load_tree(path: str) -> LatentTree:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic, version, _, num_levels, channels = _TREE_HEADER.unpack_from(raw)
    except struct.error as e:
        raise SerializationError(f"{path}: truncated tree header") from e
    if magic != b"LTRE" or version != 1:
        raise SerializationError(f"{path}: not a v1 latent tree (magic={magic!r})")
    offset = _TREE_HEADER.size
    factors = struct.unpack_from(f"<{num_levels - 1}I", raw, offset)
    offset += 4 * (num_levels - 1)
    fields = _TREE_GEOMETRY.unpack_from(raw, offset)
    offset += _TREE_GEOMETRY.size
    root_dims, original_dims = tuple(fields[0:3]), tuple(fields[3:6])
    voxel_size, origin, truncation = fields[6], tuple(fields[7:10]), fields[10]

    levels = []
    for level in range(1, num_levels):
        scale = cumulative_factor(factors[level - 1:])
        dims = tuple(d // scale for d in root_dims)
        arrays = []
        for shape in (dims, (channels, *dims)):
            size = int(np.prod(shape))
            chunk = raw[offset:offset + 4 * size]
            if len(chunk) != 4 * size:
                raise SerializationError(f"{path}: truncated payload at level {level}")
            arrays.append(np.frombuffer(chunk, dtype="<f4").reshape(shape))
            offset += 4 * size
        geometry = TUDFGrid(arrays[0], voxel_size * scale, origin, truncation)
        levels.append(TreeLevel(geometry=geometry, latent=LatentGrid(arrays[1], level=level)))
    return LatentTree(
        levels=levels,
        factors=tuple(factors),
        root_dims=root_dims,
        original_dims=original_dims,
        voxel_size=voxel_size,
        origin=origin,
        truncation=truncation,
    )
