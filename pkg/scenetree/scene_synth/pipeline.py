import glob
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm
from transformers.utils import logging

from scenetree.diffusion.sampling import (
    from_model_space,
    model_device_dtype,
    needs_noise,
    predict_noise,
    randn,
    reverse_update,
    default_num_steps,
    denoise_step,
    to_model_space,
)
from scenetree.diffusion.schedule import NoiseSchedule, q_sample
from scenetree.diffusion.unet import Denoiser
from scenetree.errors import ScheduleError, ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid, clamp_to_truncation
from scenetree.latent_tree.codec import LatentGrid, LevelCodec, decode_level
from scenetree.latent_tree.tree import build_tree, cumulative_factor, reconstruct
from scenetree.scene_synth.canvas import SceneCanvas
from scenetree.scene_synth.journal import LevelRecord, PlacementRecord, Stopwatch, SynthesisJournal
from scenetree.scene_synth.planning import PatchPlacement, PatchSchedule, plan_patches

logger = logging.get_logger(__name__)


@dataclass
class SynthesisOptions:
    sampler: str = "ddim"
    num_steps: Optional[int] = None
    overlap: float = 0.5
    refine_mode: str = "parallel"
    max_batch: int = 16
    feathered: bool = False
    pin_known_levels: bool = False
    progress: bool = False


@dataclass(frozen=True)
class GridFrame:
    """World placement of the root grid; coarser levels share origin and truncation"""

    voxel_size: float
    origin: Tuple[float, float, float]
    truncation: float

    def level_grid(self, values: np.ndarray, factors: Sequence[int], level: int) -> TUDFGrid:
        scale = cumulative_factor(factors[level - 1:])
        return TUDFGrid(clamp_to_truncation(values, self.truncation), self.voxel_size * scale, self.origin, self.truncation)


def check_models(denoisers: Sequence[Denoiser], codecs: Sequence[LevelCodec]):
    if len(denoisers) != len(codecs):
        raise ShapeMismatchError(f"{len(codecs)} codecs need {len(codecs)} denoisers, got {len(denoisers)}")
    for index, (denoiser, codec) in enumerate(zip(denoisers, codecs)):
        level = index + 1
        if denoiser.config.level != level or codec.config.level != level:
            raise ShapeMismatchError(
                f"position {index}: denoiser level {denoiser.config.level}, codec level {codec.config.level}, "
                f"expected {level}"
            )
        if not codec.config.factorized:
            raise ShapeMismatchError(f"level {level}: synthesis needs factorized codecs, got a cascaded one")
        if denoiser.config.latent_channels != codec.config.latent_channels:
            raise ShapeMismatchError(f"level {level}: denoiser and codec disagree on the latent channel count")
    for index in range(len(denoisers) - 1):
        p, f = denoisers[index].config.patch_size, codecs[index].config.factor
        if p * f != denoisers[index + 1].config.patch_size:
            raise ShapeMismatchError(
                f"patch ladder broken: level {index + 1} patch {p} * factor {f} != level {index + 2} patch "
                f"{denoisers[index + 1].config.patch_size}"
            )


def scene_extent_voxels(extent_m: float, voxel_size: float, multiple: int, minimum: int) -> int:
    """Meters -> root voxels, rounded up to the cumulative factor and to at least one patch"""
    voxels = max(int(math.ceil(extent_m / voxel_size - 1e-9)), minimum)
    return int(math.ceil(voxels / multiple) * multiple)


def _as_mask(mask, device) -> torch.Tensor:
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    return mask.to(device=device, dtype=torch.bool)


@torch.no_grad()
def inpaint_patch(
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    canvas: SceneCanvas,
    placement: PatchPlacement,
    mask,
    c: Optional[torch.Tensor] = None,
    sampler: str = "ddim",
    generator: Optional[torch.Generator] = None,
    num_steps: Optional[int] = None,
) -> torch.Tensor:
    """Sample one patch while keeping the known region unchanged.

    After every reverse step the masked voxels are replaced by the canvas content noised to
    the step's target timestep, and by the canvas content itself at timestep 0. The noise for
    the known region is only drawn when the mask is nonempty.
    """
    device, dtype = model_device_dtype(denoiser)
    m = _as_mask(mask, canvas.device)
    if tuple(m.shape) != tuple(placement.size):
        raise ShapeMismatchError(f"mask {tuple(m.shape)} does not match placement size {placement.size}")
    if bool((m & ~canvas.known_crop(placement)).any()):
        raise ScheduleError(f"placement {placement.index}: mask references voxels not yet on the canvas")
    known = canvas.crop(placement)[None].to(device=device, dtype=dtype)
    if bool(m.all()):
        return known[0].clone()

    has_known = bool(m.any())
    m = m.to(device)[None, None]
    num_steps = num_steps or default_num_steps(schedule, sampler)
    if c is not None:
        c = c.to(device=device, dtype=dtype)
    z = randn(known.shape, generator, device, dtype)
    for t, prev_t in schedule.sampling_timesteps(num_steps):
        z = denoise_step(denoiser, schedule, z, t, c, sampler, generator, prev_t=prev_t)
        if not has_known:
            continue
        if prev_t == 0:
            z_known = known
        else:
            z_known = q_sample(schedule, known, prev_t, randn(known.shape, generator, device, dtype))
        z = torch.where(m, z_known, z)
    return z[0]


def _inpaint_schedule(
    denoiser, schedule, canvas: SceneCanvas, plan: PatchSchedule, options: SynthesisOptions,
    generator, level: int, journal: Optional[SynthesisJournal], condition: Optional[torch.Tensor] = None,
) -> int:
    """Autoregressive inpainting over the placements of `plan`; returns the denoiser call count"""
    num_steps = options.num_steps or default_num_steps(schedule, options.sampler)
    calls = 0
    for placement in tqdm(plan.placements, desc=f"level {level} patches", disable=not options.progress):
        with Stopwatch() as watch:
            mask = canvas.known_crop(placement)
            skipped = bool(mask.all())
            if not skipped:
                c = None if condition is None else condition[(slice(None),) + placement.slices()][None]
                patch = inpaint_patch(
                    denoiser, schedule, canvas, placement, mask, c, options.sampler, generator, num_steps
                )
                canvas.write(placement, patch)
                calls += num_steps
        if journal is not None:
            journal.record(
                PlacementRecord(
                    level=level,
                    placement=placement.index,
                    wave=placement.wave,
                    timesteps=(schedule.num_timesteps, 0),
                    wall_time=watch.elapsed,
                    skipped=skipped,
                )
            )
    return calls


@torch.no_grad()
def fuse_step(
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    z: torch.Tensor,
    c: Optional[torch.Tensor],
    plan: PatchSchedule,
    t: int,
    prev_t: int,
    sampler: str,
    noise: Optional[torch.Tensor] = None,
    max_batch: int = 16,
    feathered: bool = False,
) -> torch.Tensor:
    """One lockstep reverse step of every placement on the [C, X, Y, Z] canvas `z`,
    followed by averaging the per-patch results where placements overlap."""
    canvas = SceneCanvas(z.shape[0], z.shape[1:], device=z.device, dtype=z.dtype, feathered=feathered)
    canvas.begin_fusion()
    placements = plan.placements
    for start in range(0, len(placements), max_batch):
        chunk = placements[start:start + max_batch]
        window = [(slice(None),) + p.slices() for p in chunk]
        z_crops = torch.stack([z[w] for w in window])
        c_crops = None if c is None else torch.stack([c[w] for w in window])
        n_crops = None if noise is None else torch.stack([noise[w] for w in window])
        eps = predict_noise(denoiser, z_crops, t, c_crops)
        updated = reverse_update(schedule, z_crops, eps, t, prev_t, sampler, noise=n_crops)
        for placement, patch in zip(chunk, updated):
            canvas.accumulate(placement, patch)
    return canvas.fuse()


@torch.no_grad()
def fused_sample(
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    plan: PatchSchedule,
    channels: int,
    c: Optional[torch.Tensor],
    options: SynthesisOptions,
    generator: Optional[torch.Generator] = None,
    known: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> torch.Tensor:
    """Parallel synthesis of a whole level canvas. One canvas-wide noise draw per step is
    shared by the overlapping placements."""
    device, dtype = model_device_dtype(denoiser)
    shape = (channels, *plan.extent)
    num_steps = options.num_steps or default_num_steps(schedule, options.sampler)
    if c is not None:
        c = c.to(device=device, dtype=dtype)
    z = randn(shape, generator, device, dtype)
    steps = schedule.sampling_timesteps(num_steps)
    for t, prev_t in tqdm(steps, desc="fused refinement", disable=not options.progress):
        noise = None
        if needs_noise(schedule, options.sampler, t, prev_t):
            noise = randn(shape, generator, device, dtype)
        z = fuse_step(
            denoiser, schedule, z, c, plan, t, prev_t, options.sampler, noise, options.max_batch, options.feathered
        )
        if known is not None:
            values, mask = known
            if prev_t > 0:
                values = q_sample(schedule, values, prev_t, randn(shape, generator, device, dtype))
            z = torch.where(mask[None], values, z)
    return z


def generate_coarse(
    denoiser: Denoiser,
    codec: LevelCodec,
    extent: Sequence[int],
    frame: GridFrame,
    factors: Sequence[int],
    generator: Optional[torch.Generator] = None,
    options: Optional[SynthesisOptions] = None,
    journal: Optional[SynthesisJournal] = None,
    canvas: Optional[SceneCanvas] = None,
) -> Tuple[TUDFGrid, LatentGrid]:
    """Unconditional patch-by-patch synthesis of (L_1, H_1) over an (X, Y) coarse extent.
    A pre-seeded `canvas` turns this into completion."""
    options = options or SynthesisOptions()
    schedule = NoiseSchedule.create(denoiser.config.schedule_family, denoiser.config.num_timesteps)
    patch = denoiser.config.patch_size
    device, dtype = model_device_dtype(denoiser)
    full_extent = (int(extent[0]), int(extent[1]), patch)
    if canvas is None:
        canvas = SceneCanvas(denoiser.config.sample_channels, full_extent, device=device, dtype=dtype)
    plan = plan_patches(full_extent, patch, options.overlap)

    with Stopwatch() as watch:
        calls = _inpaint_schedule(denoiser, schedule, canvas, plan, options, generator, 1, journal)
    if journal is not None:
        journal.record(
            LevelRecord(
                level=1, mode="inpaint", patches=len(plan), timesteps=(schedule.num_timesteps, 0),
                denoiser_calls=calls, wall_time=watch.elapsed,
            )
        )
    geometry, latent = from_model_space(codec, canvas.values[None], level=1)
    return (
        frame.level_grid(geometry[0, 0].float().cpu().numpy(), factors, 1),
        LatentGrid(latent[0].float().cpu().numpy(), level=1),
    )


def refine_level(
    denoiser: Denoiser,
    decoder: LevelCodec,
    codec: LevelCodec,
    geometry_prev: TUDFGrid,
    latent_prev: LatentGrid,
    generator: Optional[torch.Generator] = None,
    options: Optional[SynthesisOptions] = None,
    journal: Optional[SynthesisJournal] = None,
    known: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[TUDFGrid, LatentGrid]:
    """Decode level i from level i-1, then synthesize H_i conditioned on the decoded L_i.

    `decoder` is the level i-1 codec, `codec` the level i codec holding the standardization
    of L_i and H_i. `known` optionally pins raw (H_i, mask) content.
    """
    options = options or SynthesisOptions()
    level = denoiser.config.level
    schedule = NoiseSchedule.create(denoiser.config.schedule_family, denoiser.config.num_timesteps)
    device, dtype = model_device_dtype(denoiser)

    geometry = decode_level(decoder, geometry_prev, latent_prev)
    g = torch.from_numpy(geometry.values).to(device=device, dtype=dtype)[None, None]
    c = codec.standardize_geometry(g)[0]
    plan = plan_patches(geometry.dims, denoiser.config.patch_size, options.overlap)
    channels = denoiser.config.sample_channels

    with Stopwatch() as watch:
        if options.refine_mode == "parallel":
            pinned = None
            if known is not None:
                values = torch.from_numpy(known[0]).to(device=device, dtype=dtype)[None]
                pinned = (codec.standardize_latent(values)[0], _as_mask(known[1], device))
            z = fused_sample(denoiser, schedule, plan, channels, c, options, generator, known=pinned)
            num_steps = options.num_steps or default_num_steps(schedule, options.sampler)
            calls = math.ceil(len(plan) / options.max_batch) * num_steps
        elif options.refine_mode == "sequential":
            canvas = SceneCanvas(channels, plan.extent, device=device, dtype=dtype)
            if known is not None:
                values = torch.from_numpy(known[0]).to(device=device, dtype=dtype)[None]
                canvas.seed(codec.standardize_latent(values)[0], _as_mask(known[1], device))
            calls = _inpaint_schedule(denoiser, schedule, canvas, plan, options, generator, level, journal, c)
            z = canvas.values
        else:
            raise ScheduleError(f"unknown refine mode {options.refine_mode!r}")
    if journal is not None:
        journal.record(
            LevelRecord(
                level=level, mode=options.refine_mode, patches=len(plan), timesteps=(schedule.num_timesteps, 0),
                denoiser_calls=calls, wall_time=watch.elapsed,
            )
        )
    _, latent = from_model_space(codec, z[None], level=level)
    return geometry, LatentGrid(latent[0].float().cpu().numpy(), level=level)


def _snapshot_path(work_dir: str, level: int) -> str:
    return os.path.join(work_dir, f"stage-level{level}.pt")


def _save_snapshot(work_dir: str, level: int, geometry: TUDFGrid, latent: LatentGrid, generator):
    os.makedirs(work_dir, exist_ok=True)
    path = _snapshot_path(work_dir, level)
    state = {
        "level": level,
        "geometry": torch.from_numpy(geometry.values),
        "latent": torch.from_numpy(latent.values),
        "rng_state": generator.get_state() if generator is not None else None,
    }
    tmp = path + ".tmp"
    torch.save(state, tmp)
    os.replace(tmp, path)


def _load_latest_snapshot(work_dir: str, max_level: int):
    levels = []
    for path in glob.glob(os.path.join(work_dir, "stage-level*.pt")):
        name = os.path.basename(path)[len("stage-level"):-len(".pt")]
        if name.isdigit() and int(name) <= max_level:
            levels.append(int(name))
    if not levels:
        return None
    return torch.load(_snapshot_path(work_dir, max(levels)))


def synthesize(
    denoisers: Sequence[Denoiser],
    codecs: Sequence[LevelCodec],
    coarse_extent: Sequence[int],
    frame: GridFrame,
    generator: Optional[torch.Generator] = None,
    options: Optional[SynthesisOptions] = None,
    journal: Optional[SynthesisJournal] = None,
    work_dir: Optional[str] = None,
    resume: bool = False,
    coarse_canvas: Optional[SceneCanvas] = None,
    pinned: Optional[List[Optional[Tuple[np.ndarray, np.ndarray]]]] = None,
) -> TUDFGrid:
    options = options or SynthesisOptions()
    check_models(denoisers, codecs)
    factors = [codec.config.factor for codec in codecs]
    num_levels = len(codecs) + 1

    start_level, geometry, latent = 1, None, None
    if resume and work_dir is not None:
        snapshot = _load_latest_snapshot(work_dir, num_levels - 1)
        if snapshot is not None:
            start_level = snapshot["level"] + 1
            geometry = frame.level_grid(snapshot["geometry"].numpy(), factors, snapshot["level"])
            latent = LatentGrid(snapshot["latent"].numpy(), level=snapshot["level"])
            if generator is not None and snapshot["rng_state"] is not None:
                generator.set_state(snapshot["rng_state"])
            logger.info(f"resuming synthesis after level {snapshot['level']}")

    if start_level == 1:
        geometry, latent = generate_coarse(
            denoisers[0], codecs[0], coarse_extent, frame, factors, generator, options, journal, coarse_canvas
        )
        if work_dir is not None:
            _save_snapshot(work_dir, 1, geometry, latent, generator)
        start_level = 2

    for level in range(start_level, num_levels):
        known = pinned[level - 1] if pinned is not None else None
        geometry, latent = refine_level(
            denoisers[level - 1], codecs[level - 2], codecs[level - 1], geometry, latent,
            generator, options, journal, known,
        )
        if work_dir is not None:
            _save_snapshot(work_dir, level, geometry, latent, generator)

    return decode_level(codecs[-1], geometry, latent)


def generate_scene(
    denoisers: Sequence[Denoiser],
    codecs: Sequence[LevelCodec],
    extent: Sequence[int],
    generator: Optional[torch.Generator] = None,
    voxel_size: float = 0.022,
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0),
    options: Optional[SynthesisOptions] = None,
    journal: Optional[SynthesisJournal] = None,
    work_dir: Optional[str] = None,
    resume: bool = False,
) -> TUDFGrid:
    """Coarse-to-fine, patch-by-patch synthesis of a root TUDF grid.

    Args:
        denoisers: denoisers[i - 1] generates level i
        codecs: codecs[i - 1] maps level i + 1 <-> level i
        extent: (X, Y) root-level extent in voxels, a multiple of the cumulative factor
        generator: the only source of randomness; one seed gives one scene

    Returns:
        TUDFGrid: root grid of dims (X, Y, root patch height)
    """
    check_models(denoisers, codecs)
    scale = cumulative_factor([codec.config.factor for codec in codecs])
    if any(int(e) % scale for e in extent[:2]):
        raise ShapeMismatchError(f"scene extent {tuple(extent[:2])} must be a multiple of the cumulative factor {scale}")
    coarse_extent = tuple(int(e) // scale for e in extent[:2])
    frame = GridFrame(voxel_size, tuple(origin), codecs[0].config.truncation)
    return synthesize(denoisers, codecs, coarse_extent, frame, generator, options, journal, work_dir, resume)


def _pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    x, y, z = (d // factor for d in mask.shape)
    return mask.reshape(x, factor, y, factor, z, factor).all(axis=(1, 3, 5))


def complete_scene(
    denoisers: Sequence[Denoiser],
    codecs: Sequence[LevelCodec],
    partial: TUDFGrid,
    known_mask: np.ndarray,
    extent: Optional[Sequence[int]] = None,
    generator: Optional[torch.Generator] = None,
    options: Optional[SynthesisOptions] = None,
    journal: Optional[SynthesisJournal] = None,
    work_dir: Optional[str] = None,
    resume: bool = False,
) -> TUDFGrid:
    """Complete a partial root grid placed at the minimum corner of an (X, Y) extent.

    The encoded coarse content of fully known windows seeds the level-1 canvas; higher
    levels treat the decoded geometry as their condition unless `pin_known_levels` is set.
    """
    options = options or SynthesisOptions()
    check_models(denoisers, codecs)
    factors = [codec.config.factor for codec in codecs]
    scale = cumulative_factor(factors)
    root_height = denoisers[-1].config.patch_size * factors[-1]

    known_mask = np.asarray(known_mask, dtype=bool)
    if known_mask.shape != partial.dims:
        raise ShapeMismatchError(f"known mask {known_mask.shape} does not match partial grid {partial.dims}")
    if not known_mask.any():
        raise ScheduleError("known mask is empty; use generate for unconditional synthesis")
    if partial.dims[0] % scale or partial.dims[1] % scale or partial.dims[2] != root_height:
        raise ShapeMismatchError(
            f"partial grid dims {partial.dims} are not encodable: x and y must be multiples of {scale} "
            f"and z must equal the root patch height {root_height}"
        )
    extent = tuple(int(e) for e in (extent or partial.dims[:2]))
    if extent[0] < partial.dims[0] or extent[1] < partial.dims[1] or any(e % scale for e in extent):
        raise ShapeMismatchError(f"target extent {extent} must contain {partial.dims[:2]} and be a multiple of {scale}")

    if known_mask.all() and extent == tuple(partial.dims[:2]):
        logger.info("known mask covers the whole extent; reconstructing without sampling")
        return reconstruct(codecs, build_tree(codecs, partial))

    tree = build_tree(codecs, partial)
    device, dtype = model_device_dtype(denoisers[0])
    level1 = tree.levels[0]
    z0, _ = to_model_space(
        codecs[0],
        torch.from_numpy(level1.geometry.values).to(device=device, dtype=dtype)[None, None],
        torch.from_numpy(level1.latent.values).to(device=device, dtype=dtype)[None],
        level=1,
    )
    coarse_extent = (extent[0] // scale, extent[1] // scale, denoisers[0].config.patch_size)
    canvas = SceneCanvas(denoisers[0].config.sample_channels, coarse_extent, device=device, dtype=dtype)
    canvas.seed(z0[0], torch.from_numpy(_pool_mask(known_mask, scale)).to(device))

    pinned = None
    if options.pin_known_levels:
        pinned = [None] * len(codecs)
        for level in range(2, len(codecs) + 1):
            f = cumulative_factor(factors[level - 1:])
            tree_level = tree.levels[level - 1]
            dims = (extent[0] // f, extent[1] // f, tree_level.latent.dims[2])
            values = np.zeros((tree_level.latent.channels, *dims), dtype=np.float32)
            mask = np.zeros(dims, dtype=bool)
            px, py, _ = tree_level.latent.dims
            values[:, :px, :py] = tree_level.latent.values
            mask[:px, :py] = _pool_mask(known_mask, f)
            pinned[level - 1] = (values, mask)

    frame = GridFrame(partial.voxel_size, partial.origin, partial.truncation)
    return synthesize(
        denoisers, codecs, coarse_extent[:2], frame, generator, options, journal, work_dir, resume,
        coarse_canvas=canvas, pinned=pinned,
    )
