from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from scenetree.errors import ScheduleError

DEFAULT_OVERLAP = 0.5


class PatchPlacement(BaseModel):
    index: int
    offset: Tuple[int, int, int]
    size: Tuple[int, int, int]
    wave: int
    cell: Tuple[int, int]

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.offset, self.size))


@dataclass
class PatchSchedule:
    """Placements in generation order. masks[j] marks the voxels of placement j already
    covered by placements 0..j-1 (1 = known)."""

    extent: Tuple[int, int, int]
    patch_size: Tuple[int, int, int]
    overlap: float
    placements: List[PatchPlacement]
    masks: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.placements)

    @property
    def num_waves(self) -> int:
        return max(p.wave for p in self.placements) + 1

    def coverage_count(self) -> np.ndarray:
        count = np.zeros(self.extent, dtype=np.int32)
        for placement in self.placements:
            count[placement.slices()] += 1
        return count


def overlap_stride(patch: int, overlap: float) -> int:
    """Placement stride for a patch edge; adjacent patches must share at least one voxel"""
    stride = max(1, int(round(patch * (1.0 - overlap))))
    if stride >= patch:
        raise ScheduleError(
            f"overlap {overlap} leaves no shared voxels between {patch}-voxel patches (stride {stride})"
        )
    return stride


def axis_offsets(extent: int, patch: int, overlap: float) -> List[int]:
    """Start offsets along one axis; the last patch is shifted inward to end on the border"""
    if extent < patch:
        raise ScheduleError(f"extent {extent} is smaller than the patch size {patch}")
    stride = overlap_stride(patch, overlap)
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] + patch < extent:
        offsets.append(extent - patch)
    return offsets


def _breadth_first_cells(shape: Tuple[int, int], start: Tuple[int, int]) -> List[Tuple[Tuple[int, int], int]]:
    nx, ny = shape
    if not (0 <= start[0] < nx and 0 <= start[1] < ny):
        raise ScheduleError(f"start cell {start} outside the {nx}x{ny} placement lattice")
    order = [(start, 0)]
    seen = {start}
    frontier = [start]
    wave = 0
    while frontier:
        wave += 1
        grown = []

        def visit(cell):
            if 0 <= cell[0] < nx and 0 <= cell[1] < ny and cell not in seen:
                seen.add(cell)
                grown.append(cell)

        for ix, iy in frontier:
            visit((ix - 1, iy))
            visit((ix + 1, iy))
        for ix, iy in frontier + list(grown):
            visit((ix, iy - 1))
            visit((ix, iy + 1))
        order.extend((cell, wave) for cell in grown)
        frontier = grown
    return order


def plan_patches(
    extent: Sequence[int],
    patch_size: Union[int, Sequence[int]],
    overlap: float = DEFAULT_OVERLAP,
    start: Tuple[int, int] = (0, 0),
) -> PatchSchedule:
    """Tile the ground plane of `extent` (voxels at one level) with overlapping patches.

    Breadth-first waves: from the cells of wave k, the x-neighbours are placed first,
    then the y-neighbours, and the new cells form wave k + 1. The scene is one patch tall.
    """
    extent = tuple(int(e) for e in extent)
    if isinstance(patch_size, int):
        patch = (patch_size,) * 3
    else:
        patch = tuple(int(p) for p in patch_size)
    if not 0.0 < overlap < 1.0:
        raise ScheduleError(f"overlap fraction must lie in (0, 1), got {overlap}")
    if any(e < p for e, p in zip(extent, patch)):
        raise ScheduleError(f"extent {extent} is smaller than one patch {patch}")
    if extent[2] != patch[2]:
        raise ScheduleError(
            f"scenes are synthesized one patch tall: extent z={extent[2]} must equal patch z={patch[2]}"
        )

    xs = axis_offsets(extent[0], patch[0], overlap)
    ys = axis_offsets(extent[1], patch[1], overlap)
    covered = np.zeros(extent, dtype=bool)
    placements, masks = [], []
    for index, ((ix, iy), wave) in enumerate(_breadth_first_cells((len(xs), len(ys)), start)):
        placement = PatchPlacement(index=index, offset=(xs[ix], ys[iy], 0), size=patch, wave=wave, cell=(ix, iy))
        masks.append(covered[placement.slices()].copy())
        covered[placement.slices()] = True
        placements.append(placement)
    return PatchSchedule(extent=extent, patch_size=patch, overlap=overlap, placements=placements, masks=masks)


def waves(schedule: PatchSchedule) -> Dict[int, List[PatchPlacement]]:
    grouped: Dict[int, List[PatchPlacement]] = {}
    for placement in schedule.placements:
        grouped.setdefault(placement.wave, []).append(placement)
    return grouped
