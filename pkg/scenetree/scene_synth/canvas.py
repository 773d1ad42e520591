from typing import Optional, Sequence, Tuple

import torch

from scenetree.errors import ScheduleError, ShapeMismatchError
from scenetree.scene_synth.planning import PatchPlacement


def feather_weights(size: Sequence[int], device=None) -> torch.Tensor:
    """Ground-plane tent weights, 1 on the border voxels and growing towards the centre"""
    ramps = []
    for n in size[:2]:
        index = torch.arange(n, dtype=torch.float64, device=device)
        ramps.append(torch.minimum(index + 1, n - index))
    weights = ramps[0][:, None] * ramps[1][None, :]
    return weights[:, :, None].expand(*size[:2], size[2]).contiguous()


class SceneCanvas:
    """Growing [C, X, Y, Z] model-space grid of one level.

    `known` marks voxels that hold final values. Fusion accumulates weighted patch
    predictions in float64 and divides by the per-voxel weight sum, so the result does
    not depend on the order patches are added in.
    """

    def __init__(
        self,
        channels: int,
        extent: Sequence[int],
        device=None,
        dtype: torch.dtype = torch.float32,
        feathered: bool = False,
    ):
        self.extent = tuple(int(e) for e in extent)
        self.channels = channels
        self.dtype = dtype
        self.feathered = feathered
        self.values = torch.zeros((channels, *self.extent), device=device, dtype=dtype)
        self.known = torch.zeros(self.extent, device=device, dtype=torch.bool)
        self._sum = None
        self._weight = None

    @property
    def device(self):
        return self.values.device

    def _check(self, placement: PatchPlacement):
        if any(o < 0 or o + s > e for o, s, e in zip(placement.offset, placement.size, self.extent)):
            raise ScheduleError(f"placement {placement.index} {placement.offset}+{placement.size} leaves the canvas {self.extent}")

    def crop(self, placement: PatchPlacement) -> torch.Tensor:
        self._check(placement)
        return self.values[(slice(None),) + placement.slices()]

    def known_crop(self, placement: PatchPlacement) -> torch.Tensor:
        self._check(placement)
        return self.known[placement.slices()]

    def write(self, placement: PatchPlacement, patch: torch.Tensor):
        self._check(placement)
        if patch.shape != (self.channels, *placement.size):
            raise ShapeMismatchError(f"patch {tuple(patch.shape)} does not fit placement {placement.size}")
        self.values[(slice(None),) + placement.slices()] = patch.to(self.dtype)
        self.known[placement.slices()] = True

    def seed(self, values: torch.Tensor, known: torch.Tensor, offset: Tuple[int, int, int] = (0, 0, 0)):
        """Copy known content (e.g. an encoded partial scene) onto the canvas"""
        window = tuple(slice(o, o + s) for o, s in zip(offset, known.shape))
        if any(w.stop > e for w, e in zip(window, self.extent)):
            raise ScheduleError(f"seed of dims {tuple(known.shape)} at {offset} leaves the canvas {self.extent}")
        region = self.values[(slice(None),) + window]
        region[:, known] = values[:, known].to(self.dtype)
        self.known[window] |= known

    def begin_fusion(self):
        self._sum = torch.zeros((self.channels, *self.extent), device=self.device, dtype=torch.float64)
        self._weight = torch.zeros(self.extent, device=self.device, dtype=torch.float64)

    def accumulate(self, placement: PatchPlacement, prediction: torch.Tensor):
        if self._sum is None:
            raise ScheduleError("accumulate called before begin_fusion")
        self._check(placement)
        window = placement.slices()
        if self.feathered:
            weights = feather_weights(placement.size, device=self.device)
        else:
            weights = torch.ones(placement.size, device=self.device, dtype=torch.float64)
        self._sum[(slice(None),) + window] += prediction.to(torch.float64) * weights
        self._weight[window] += weights

    def fuse(self, out: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-voxel weighted mean of the accumulated predictions"""
        if self._weight is None:
            raise ScheduleError("fuse called before begin_fusion")
        if bool((self._weight <= 0).any()):
            raise ScheduleError("some canvas voxels received no patch prediction")
        fused = (self._sum / self._weight).to(self.dtype)
        self._sum = self._weight = None
        if out is not None:
            out.copy_(fused)
            return out
        return fused
