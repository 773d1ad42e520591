import glob
import os
from typing import Dict, List, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset
from transformers.utils import logging

from scenetree.diffusion.sampling import to_model_space
from scenetree.diffusion.schedule import NoiseSchedule, q_sample
from scenetree.errors import MissingPrerequisiteError, ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid, augment, downsample_grid, load_grid
from scenetree.latent_tree.codec import LevelCodec
from scenetree.latent_tree.tree import cumulative_factor, encode_scene

logger = logging.get_logger(__name__)


def read_scene_grids(grids_dir: str) -> List[TUDFGrid]:
    """All root-level .tudf grids of a directory, in file name order"""
    paths = sorted(glob.glob(os.path.join(grids_dir, "*.tudf")))
    if not paths:
        raise MissingPrerequisiteError(f"TUDF grids in {grids_dir}", "voxelize")
    logger.info(f"loaded {len(paths)} scene grids from {grids_dir}")
    return [load_grid(path) for path in paths]


def split_holdout(grids: Sequence[TUDFGrid], fraction: float = 0.1):
    """(train, test); the last grids are held out, at least one when there are two or more"""
    if len(grids) < 2:
        return list(grids), []
    count = max(1, int(round(len(grids) * fraction)))
    return list(grids[:-count]), list(grids[-count:])


def level_grids(scenes: Sequence[TUDFGrid], factors: Sequence[int], level: int) -> List[TUDFGrid]:
    """Root scenes average-pooled down to tree level `level` (the root is level len(factors) + 1)"""
    scale = cumulative_factor(factors[level - 1:])
    result = []
    for scene in scenes:
        if any(d % scale for d in scene.dims):
            raise ShapeMismatchError(f"scene dims {scene.dims} are not divisible by the cumulative factor {scale}")
        result.append(downsample_grid(scene, scale) if scale > 1 else scene)
    return result


class PatchCropDataset(Dataset):
    """Random cubic crops of level grids with random flips and quarter turns.

    Item i is drawn from a generator seeded with (seed, i), so a resumed run sees the
    same crops as an uninterrupted one.
    """

    def __init__(self, grids: Sequence[TUDFGrid], patch_size: int, length: int = 1024, seed: int = 0, augment_patches: bool = True):
        super().__init__()
        if not grids:
            raise ShapeMismatchError("patch dataset needs at least one grid")
        for grid in grids:
            if any(d < patch_size for d in grid.dims):
                raise ShapeMismatchError(f"grid dims {grid.dims} are smaller than the patch size {patch_size}")
        self.grids = list(grids)
        self.patch_size = patch_size
        self.length = length
        self.seed = seed
        self.augment_patches = augment_patches

    def __len__(self):
        return self.length

    def crop(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        grid = self.grids[int(rng.integers(len(self.grids)))]
        p = self.patch_size
        lo = [int(rng.integers(d - p + 1)) for d in grid.dims]
        values = grid.values[lo[0]:lo[0] + p, lo[1]:lo[1] + p, lo[2]:lo[2] + p]
        if self.augment_patches:
            flips = [axis for axis in ("x", "y") if rng.random() < 0.5]
            values = augment(grid.with_values(values), flips, int(rng.integers(4))).values
        return values

    def __getitem__(self, i) -> Dict[str, torch.Tensor]:
        return {
            "patch": torch.from_numpy(np.ascontiguousarray(self.crop(int(i))))[None],
            "index": torch.tensor(int(i)),
        }


def collate_patches(features: List[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    return {"patch": torch.stack([f["patch"] for f in features])}


def batch_generator(seed: int, features: List[Dict[str, torch.Tensor]]) -> torch.Generator:
    """Generator keyed on the item indices of a batch"""
    indices = [int(f["index"]) for f in features if "index" in f]
    state = np.random.SeedSequence([seed, *indices]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


class DiffusionCollator:
    """Turns level i+1 crops into denoiser training inputs.

    Crops are encoded on the fly by the frozen level-i codec, standardized, and noised at
    uniformly drawn timesteps t in [1, T].
    """

    def __init__(self, codec: LevelCodec, schedule: NoiseSchedule, level: int, seed: int = 0):
        self.codec = codec.eval()
        self.schedule = schedule
        self.level = level
        self.seed = seed

    @torch.no_grad()
    def __call__(self, features: List[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
        patch = collate_patches(features)["patch"].to(device=self.codec.device, dtype=self.codec.dtype)
        geometry, latent = self.codec.encode(patch)
        z0, condition = to_model_space(self.codec, geometry, latent, self.level)
        z0 = z0.cpu()
        generator = batch_generator(self.seed, features)
        timestep = torch.randint(1, self.schedule.num_timesteps + 1, (z0.shape[0],), generator=generator)
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        inputs = {
            "noisy_latent": q_sample(self.schedule, z0, timestep, noise),
            "timestep": timestep,
            "noise": noise,
        }
        if condition is not None:
            inputs["condition"] = condition.cpu()
        return inputs


@torch.no_grad()
def compute_standardization(codec: LevelCodec, scenes: Sequence[TUDFGrid]):
    """Per-channel mean / std of H_i and mean / std of L_i over whole encoded scenes,
    stored in the codec buffers"""
    latents, geometries = [], []
    for scene in scenes:
        geometry, latent = encode_scene(codec, scene)
        latents.append(latent.values.reshape(latent.channels, -1).astype(np.float64))
        geometries.append(geometry.values.reshape(-1).astype(np.float64))
    latent_values = np.concatenate(latents, axis=1)
    geometry_values = np.concatenate(geometries)
    codec.set_standardization(
        latent_values.mean(axis=1).astype(np.float32),
        latent_values.std(axis=1).astype(np.float32),
        float(geometry_values.mean()),
        float(geometry_values.std()),
    )
    logger.info(
        f"level {codec.config.level} standardization: latent mean {latent_values.mean(axis=1).round(4).tolist()}, "
        f"std {latent_values.std(axis=1).round(4).tolist()}"
    )
