import functools
import glob
import logging as pylogging
import os
import time
from typing import List, Optional, Sequence

import numpy as np
import torch
import typer
from transformers.utils import logging

from scenetree.artifacts import (
    atomic_path,
    level_model_dir,
    load_codecs,
    load_denoisers,
    write_json,
    write_manifest,
)
from scenetree.config import RunConfig, validate_config
from scenetree.diffusion.sampling import LatentPatch, from_model_space, sample_patch, save_patch
from scenetree.diffusion.schedule import NoiseSchedule
from scenetree.diffusion.unet import Denoiser
from scenetree.errors import MissingPrerequisiteError, SceneTreeError, ShapeMismatchError
from scenetree.geometry.mesh import extract_mesh, load_mesh, save_mesh
from scenetree.geometry.procedural import generate_scene as generate_procedural_scene
from scenetree.geometry.tudf import TUDFGrid, load_grid, load_mask, pad_to_multiple, save_grid, voxelize_tudf
from scenetree.latent_tree.codec import LatentGrid, decode_level
from scenetree.latent_tree.tree import build_tree, cumulative_factor, load_tree, reconstruct, save_tree
from scenetree.metrics.point_cloud import PointCloud, sample_points
from scenetree.metrics.set_metrics import retrieve_nearest, set_metrics
from scenetree.scene_synth.journal import SynthesisJournal
from scenetree.scene_synth.pipeline import SynthesisOptions, complete_scene, generate_scene, scene_extent_voxels

logger = logging.get_logger(__name__)

app = typer.Typer(
    help="Unbounded indoor scene generation: procedural data, latent codecs, patch denoisers, synthesis and metrics.",
    add_completion=False,
    no_args_is_help=True,
)

MESH_SUFFIXES = (".obj", ".ply")


def configure_logging(verbose: bool):
    package_logger = pylogging.getLogger("scenetree")
    if not package_logger.handlers:
        handler = pylogging.StreamHandler()
        handler.setFormatter(pylogging.Formatter("%(levelname)s %(asctime)s %(name)s: %(message)s", "%m-%d %H:%M:%S"))
        package_logger.addHandler(handler)
        package_logger.propagate = False
    package_logger.setLevel(logging.INFO if verbose else logging.WARNING)
    if verbose:
        logging.set_verbosity_info()


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="log progress at info level")):
    configure_logging(verbose)


def handle_errors(fn):
    """Every package error becomes a one-line message and exit code 1"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SceneTreeError, FileNotFoundError) as e:
            typer.echo(f"error: {e}", err=True)
            raise typer.Exit(code=1)

    return wrapper


def config_option():
    return typer.Option(
        None,
        "--config",
        "-c",
        help="run config YAML. Defaults: N=3 levels (16-32-128 ladder, factors 2, 4), C=4 latent channels, "
        "tau=0.1 m, voxel 0.022 m, overlap 1/2, codec batch 4 / diffusion batch 8, lr 1e-4",
    )


def set_option():
    return typer.Option([], "--set", help="override one config key, e.g. --set diffusion.sampler=ddpm")


def seed_option():
    return typer.Option(None, "--seed", help="overrides the config seed")


def load_run_config(config: Optional[str], overrides: Sequence[str], seed: Optional[int] = None) -> RunConfig:
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    return validate_config(config, overrides)


def inference_device() -> torch.device:
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def list_files(directory: str, suffixes: Sequence[str]) -> List[str]:
    paths = sorted(p for p in glob.glob(os.path.join(directory, "*")) if p.lower().endswith(tuple(suffixes)))
    return paths


def load_models(cfg: RunConfig, models_dir: Optional[str], codecs_dir: Optional[str]):
    device = inference_device()
    denoisers = [d.to(device) for d in load_denoisers(models_dir or cfg.paths.diffusion_dir, cfg.num_levels)]
    codecs = [c.to(device) for c in load_codecs(codecs_dir or cfg.paths.codecs_dir, cfg.num_levels)]
    return denoisers, codecs


def synthesis_options(cfg: RunConfig, sampler: Optional[str], steps: Optional[int], overlap: Optional[float]) -> SynthesisOptions:
    return SynthesisOptions(
        sampler=sampler or cfg.diffusion.sampler,
        num_steps=steps or cfg.diffusion.sampling_steps,
        overlap=cfg.synthesis.overlap if overlap is None else overlap,
        refine_mode=cfg.synthesis.refine_mode,
        max_batch=cfg.synthesis.max_batch,
        feathered=cfg.synthesis.feathered,
        pin_known_levels=cfg.synthesis.pin_known_levels,
        progress=True,
    )


def save_grid_atomic(grid: TUDFGrid, path: str):
    with atomic_path(path) as tmp:
        save_grid(grid, tmp)


def save_mesh_atomic(grid: TUDFGrid, path: str, iso_level: float):
    with atomic_path(path) as tmp:
        save_mesh(extract_mesh(grid, iso_level), tmp)


def stage_paths(out: str):
    """(work dir for level snapshots, journal path) of a synthesis output"""
    stem = os.path.splitext(os.path.abspath(out))[0]
    return f"{stem}.stages", f"{stem}.journal.jsonl"


def open_journal(path: str, resume: bool) -> SynthesisJournal:
    if not resume and os.path.exists(path):
        os.remove(path)
    return SynthesisJournal(path)


def artifact_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


@app.command("make-scenes")
@handle_errors
def make_scenes(
    count: Optional[int] = typer.Option(None, "--count", help="number of scenes (scenes.count)"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="defaults to paths.scenes_dir"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Generate procedural multi-room scenes as OBJ meshes; scene k uses seed + k"""
    started = time.time()
    cfg = load_run_config(config, set_, seed)
    out_dir = out_dir or cfg.paths.scenes_dir
    count = count or cfg.scenes.count
    outputs = []
    for k in range(count):
        spec = cfg.scenes.spec.model_copy(update={"seed": cfg.seed + k})
        path = os.path.join(out_dir, f"scene_{k:04d}.obj")
        with atomic_path(path) as tmp:
            save_mesh(generate_procedural_scene(spec), tmp)
        outputs.append(path)
    write_manifest(out_dir, "make-scenes", cfg, {"seed": cfg.seed}, started, outputs)
    typer.echo(f"wrote {count} scenes to {out_dir}")


@app.command()
@handle_errors
def voxelize(
    in_path: Optional[str] = typer.Option(None, "--in", help="mesh file or directory of meshes (paths.scenes_dir)"),
    out: Optional[str] = typer.Option(None, "--out", help="grid file, or directory when --in is one (paths.grids_dir)"),
    voxel_size: Optional[float] = typer.Option(None, "--voxel-size", help="meters (geometry.voxel_size, 0.022)"),
    truncation: Optional[float] = typer.Option(None, "--truncation", help="meters (geometry.truncation, 0.1)"),
    pad: bool = typer.Option(True, "--pad/--no-pad", help="pad with tau to the ladder's cumulative factor and root patch"),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Voxelize meshes into truncated unsigned distance grids"""
    started = time.time()
    cfg = load_run_config(config, set_)
    in_path = in_path or cfg.paths.scenes_dir
    voxel_size = voxel_size or cfg.geometry.voxel_size
    truncation = truncation or cfg.geometry.truncation
    if os.path.isdir(in_path):
        sources = list_files(in_path, MESH_SUFFIXES)
        if not sources:
            raise MissingPrerequisiteError(f"meshes in {in_path}", "make-scenes")
        out_dir = out or cfg.paths.grids_dir
        targets = [os.path.join(out_dir, artifact_name(s) + ".tudf") for s in sources]
    else:
        if not os.path.exists(in_path):
            raise FileNotFoundError(f"no such mesh: {in_path}")
        sources = [in_path]
        targets = [out or os.path.splitext(in_path)[0] + ".tudf"]
        out_dir = os.path.dirname(os.path.abspath(targets[0]))

    multiple = cumulative_factor(cfg.ladder.factors)
    root_patch = cfg.ladder.resolutions[-1]
    for source, target in zip(sources, targets):
        mesh = load_mesh(source)
        # lateral margin only, so a default-height room stays within one root patch
        bounds = mesh.vertex_bounds() + np.array([[-truncation, -truncation, 0.0], [truncation, truncation, 0.0]])
        grid = voxelize_tudf(mesh, voxel_size, truncation, bounds)
        if pad:
            grid, _ = pad_to_multiple(grid, multiple, min_dims=(root_patch,) * 3)
            if grid.dims[2] > root_patch:
                logger.warning(
                    f"{source}: grid height {grid.dims[2]} exceeds one root patch ({root_patch}); "
                    "fine for training, not encodable as a completion input"
                )
        save_grid_atomic(grid, target)
        logger.info(f"{source} -> {target} {grid.dims}")
    write_manifest(out_dir, "voxelize", cfg, {}, started, targets, name="voxelize")
    typer.echo(f"voxelized {len(targets)} meshes into {out_dir}")


@app.command("train-codecs")
@handle_errors
def train_codecs_command(
    data_dir: Optional[str] = typer.Option(None, "--data-dir", help="directory of root .tudf grids (paths.grids_dir)"),
    out: Optional[str] = typer.Option(None, "--out", help="checkpoint directory (paths.codecs_dir)"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Train one codec per level on random crops (resumes from checkpoint-* when present)"""
    from scenetree.train.datasets import read_scene_grids
    from scenetree.train.train_codecs import train_codecs

    started = time.time()
    cfg = load_run_config(config, set_, seed)
    out = out or cfg.paths.codecs_dir
    grids = read_scene_grids(data_dir or cfg.paths.grids_dir)
    train_codecs(grids, cfg, out)
    write_manifest(out, "train-codecs", cfg, {"seed": cfg.seed}, started, [level_model_dir(out, i) for i in range(1, cfg.num_levels)])
    typer.echo(f"codecs written to {out}")


@app.command("train-diffusion")
@handle_errors
def train_diffusion_command(
    level: Optional[int] = typer.Option(None, "--level", help="level to train; all levels when omitted"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs (paths.codecs_dir)"),
    data_dir: Optional[str] = typer.Option(None, "--data-dir", help="directory of root .tudf grids (paths.grids_dir)"),
    out: Optional[str] = typer.Option(None, "--out", help="checkpoint directory (paths.diffusion_dir)"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Train the per-level denoisers on latents inferred on the fly by the frozen codecs"""
    from scenetree.train.datasets import read_scene_grids
    from scenetree.train.train_diffusion import train_denoiser

    started = time.time()
    cfg = load_run_config(config, set_, seed)
    out = out or cfg.paths.diffusion_dir
    codecs = load_codecs(codecs_dir or cfg.paths.codecs_dir, cfg.num_levels)
    grids = read_scene_grids(data_dir or cfg.paths.grids_dir)
    levels = [level] if level is not None else list(range(1, cfg.num_levels))
    for i in levels:
        train_denoiser(i, codecs, grids, cfg, out)
    name = f"level{level}" if level is not None else None
    write_manifest(out, "train-diffusion", cfg, {"seed": cfg.seed}, started, [level_model_dir(out, i) for i in levels], name=name)
    typer.echo(f"denoisers for levels {levels} written to {out}")


@app.command()
@handle_errors
def encode(
    scene: str = typer.Option(..., "--scene", help="root .tudf grid"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs (paths.codecs_dir)"),
    out: str = typer.Option(..., "--out", help="latent tree file (.ltree)"),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Decompose a scene grid into a latent tree"""
    started = time.time()
    cfg = load_run_config(config, set_)
    codecs = load_codecs(codecs_dir or cfg.paths.codecs_dir, cfg.num_levels)
    tree = build_tree(codecs, load_grid(scene))
    with atomic_path(out) as tmp:
        save_tree(tree, tmp)
    write_manifest(os.path.dirname(os.path.abspath(out)), "encode", cfg, {}, started, [out], name=artifact_name(out))
    typer.echo(f"{scene} -> {out}: {tree.num_levels} levels, {tree.nbytes()} bytes")


@app.command()
@handle_errors
def decode(
    tree_path: str = typer.Option(..., "--tree", help="latent tree file (.ltree)"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs (paths.codecs_dir)"),
    out: str = typer.Option(..., "--out", help="reconstructed root grid (.tudf)"),
    mesh: Optional[str] = typer.Option(None, "--mesh", help="also extract a mesh (.obj/.ply)"),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Reconstruct the root grid of a latent tree"""
    started = time.time()
    cfg = load_run_config(config, set_)
    tree = load_tree(tree_path)
    codecs = load_codecs(codecs_dir or cfg.paths.codecs_dir, tree.num_levels)
    grid = reconstruct(codecs, tree)
    save_grid_atomic(grid, out)
    outputs = [out]
    if mesh:
        save_mesh_atomic(grid, mesh, cfg.geometry.iso_level)
        outputs.append(mesh)
    write_manifest(os.path.dirname(os.path.abspath(out)), "decode", cfg, {}, started, outputs, name=artifact_name(out))
    typer.echo(f"{tree_path} -> {out} {grid.dims}")


@app.command("sample-patch")
@handle_errors
def sample_patch_command(
    models_dir: Optional[str] = typer.Option(None, "--model", help="trained denoisers (paths.diffusion_dir)"),
    level: int = typer.Option(1, "--level", help="tree level of the denoiser"),
    out: str = typer.Option(..., "--out", help="patch file (.lpatch), model-space values"),
    condition: Optional[str] = typer.Option(None, "--condition", help="level-i geometry patch (.tudf), levels > 1"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs, for --condition and --decode-out"),
    decode_out: Optional[str] = typer.Option(None, "--decode-out", help="also decode the patch to a level i+1 grid"),
    sampler: Optional[str] = typer.Option(None, "--sampler", help="ddim (deterministic) or ddpm"),
    steps: Optional[int] = typer.Option(None, "--steps", help="reverse steps (diffusion.sampling_steps, 50)"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Draw one latent patch from a single denoiser"""
    started = time.time()
    cfg = load_run_config(config, set_, seed)
    path = level_model_dir(models_dir or cfg.paths.diffusion_dir, level)
    if not os.path.exists(os.path.join(path, "config.json")):
        raise MissingPrerequisiteError(f"level {level} denoiser checkpoint at {path}", "train-diffusion")
    denoiser = Denoiser.from_pretrained(path).eval().to(inference_device())
    schedule = NoiseSchedule.create(denoiser.config.schedule_family, denoiser.config.num_timesteps)
    p = denoiser.config.patch_size

    codec = None
    if condition is not None or decode_out is not None or denoiser.conditional:
        codec = load_codecs(codecs_dir or cfg.paths.codecs_dir, level + 1)[level - 1].to(inference_device())
    c = None
    if denoiser.conditional:
        if condition is None:
            raise ShapeMismatchError(f"the level {level} denoiser is conditional; pass --condition")
        geometry = load_grid(condition)
        if geometry.dims != (p, p, p):
            raise ShapeMismatchError(f"condition dims {geometry.dims} != patch size {(p, p, p)}")
        g = torch.from_numpy(geometry.values).to(device=codec.device, dtype=codec.dtype)[None, None]
        c = codec.standardize_geometry(g)

    generator = torch.Generator().manual_seed(cfg.seed)
    z = sample_patch(
        denoiser, schedule, (1, denoiser.config.sample_channels, p, p, p), c,
        sampler or cfg.diffusion.sampler, generator, steps or cfg.diffusion.sampling_steps, progress=True,
    )
    with atomic_path(out) as tmp:
        save_patch(LatentPatch(z[0].float().cpu().numpy(), level=level, kind=denoiser.config.kind), tmp)
    outputs = [out]
    if decode_out is not None:
        geometry, latent = from_model_space(codec, z, level)
        if geometry is None:
            coarse = load_grid(condition)
        else:
            coarse = TUDFGrid(
                geometry[0, 0].float().cpu().numpy(), cfg.level_voxel_size(level), (0.0, 0.0, 0.0), codec.config.truncation
            )
        save_grid_atomic(decode_level(codec, coarse, LatentGrid(latent[0].float().cpu().numpy(), level=level)), decode_out)
        outputs.append(decode_out)
    write_manifest(os.path.dirname(os.path.abspath(out)), "sample-patch", cfg, {"seed": cfg.seed}, started, outputs, name=artifact_name(out))
    typer.echo(f"sampled a level {level} {denoiser.config.kind} patch -> {out}")


@app.command()
@handle_errors
def generate(
    models_dir: Optional[str] = typer.Option(None, "--models", help="trained denoisers (paths.diffusion_dir)"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs (paths.codecs_dir)"),
    extent_x: float = typer.Option(..., "--extent-x", help="scene extent along x in meters"),
    extent_y: float = typer.Option(..., "--extent-y", help="scene extent along y in meters"),
    out: str = typer.Option(..., "--out", help="root grid (.tudf)"),
    mesh: Optional[str] = typer.Option(None, "--mesh", help="also extract a mesh (.obj/.ply)"),
    sampler: Optional[str] = typer.Option(None, "--sampler", help="ddim or ddpm (diffusion.sampler)"),
    steps: Optional[int] = typer.Option(None, "--steps", help="reverse steps (diffusion.sampling_steps, 50)"),
    overlap: Optional[float] = typer.Option(None, "--overlap", help="patch overlap fraction (synthesis.overlap, 1/2)"),
    resume: bool = typer.Option(False, "--resume", help="continue from the last finished level"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Unconditional coarse-to-fine scene synthesis"""
    started = time.time()
    cfg = load_run_config(config, set_, seed)
    denoisers, codecs = load_models(cfg, models_dir, codecs_dir)
    factors = [codec.config.factor for codec in codecs]
    scale = cumulative_factor(factors)
    root_patch = denoisers[-1].config.patch_size * factors[-1]
    extent = tuple(scene_extent_voxels(e, cfg.geometry.voxel_size, scale, root_patch) for e in (extent_x, extent_y))
    work_dir, journal_path = stage_paths(out)
    grid = generate_scene(
        denoisers,
        codecs,
        extent,
        generator=torch.Generator().manual_seed(cfg.seed),
        voxel_size=cfg.geometry.voxel_size,
        options=synthesis_options(cfg, sampler, steps, overlap),
        journal=open_journal(journal_path, resume),
        work_dir=work_dir,
        resume=resume,
    )
    save_grid_atomic(grid, out)
    outputs = [out, journal_path]
    if mesh:
        save_mesh_atomic(grid, mesh, cfg.geometry.iso_level)
        outputs.append(mesh)
    write_manifest(os.path.dirname(os.path.abspath(out)), "generate", cfg, {"seed": cfg.seed}, started, outputs, name=artifact_name(out))
    typer.echo(f"generated {grid.dims} scene -> {out}")


@app.command()
@handle_errors
def complete(
    partial: str = typer.Option(..., "--partial", help="partial root grid (.tudf), z = one root patch"),
    mask: str = typer.Option(..., "--mask", help="known-voxel mask of the partial grid"),
    models_dir: Optional[str] = typer.Option(None, "--models", help="trained denoisers (paths.diffusion_dir)"),
    codecs_dir: Optional[str] = typer.Option(None, "--codecs", help="trained codecs (paths.codecs_dir)"),
    out: str = typer.Option(..., "--out", help="completed root grid (.tudf)"),
    extent_x: Optional[float] = typer.Option(None, "--extent-x", help="target extent in meters; defaults to the partial grid"),
    extent_y: Optional[float] = typer.Option(None, "--extent-y", help="target extent in meters; defaults to the partial grid"),
    mesh: Optional[str] = typer.Option(None, "--mesh", help="also extract a mesh (.obj/.ply)"),
    sampler: Optional[str] = typer.Option(None, "--sampler", help="ddim or ddpm (diffusion.sampler)"),
    steps: Optional[int] = typer.Option(None, "--steps", help="reverse steps (diffusion.sampling_steps, 50)"),
    overlap: Optional[float] = typer.Option(None, "--overlap", help="patch overlap fraction (synthesis.overlap, 1/2)"),
    resume: bool = typer.Option(False, "--resume", help="continue from the last finished level"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Complete a partial scene: known voxels are kept, the rest is synthesized"""
    started = time.time()
    cfg = load_run_config(config, set_, seed)
    denoisers, codecs = load_models(cfg, models_dir, codecs_dir)
    grid_in = load_grid(partial)
    scale = cumulative_factor([codec.config.factor for codec in codecs])
    extent = None
    if extent_x is not None or extent_y is not None:
        extent = (
            scene_extent_voxels(extent_x, grid_in.voxel_size, scale, grid_in.dims[0]) if extent_x else grid_in.dims[0],
            scene_extent_voxels(extent_y, grid_in.voxel_size, scale, grid_in.dims[1]) if extent_y else grid_in.dims[1],
        )
    work_dir, journal_path = stage_paths(out)
    grid = complete_scene(
        denoisers,
        codecs,
        grid_in,
        load_mask(mask),
        extent=extent,
        generator=torch.Generator().manual_seed(cfg.seed),
        options=synthesis_options(cfg, sampler, steps, overlap),
        journal=open_journal(journal_path, resume),
        work_dir=work_dir,
        resume=resume,
    )
    save_grid_atomic(grid, out)
    outputs = [out, journal_path]
    if mesh:
        save_mesh_atomic(grid, mesh, cfg.geometry.iso_level)
        outputs.append(mesh)
    write_manifest(os.path.dirname(os.path.abspath(out)), "complete", cfg, {"seed": cfg.seed}, started, outputs, name=artifact_name(out))
    typer.echo(f"completed {partial} -> {out} {grid.dims}")


def read_point_clouds(directory: str, num_points: int, seed: int, source: str, iso_level: float) -> List[PointCloud]:
    """Point clouds of every mesh or grid in `directory`; grids are contoured first.
    File k is sampled with seed + k."""
    paths = list_files(directory, MESH_SUFFIXES + (".tudf",))
    if not paths:
        raise FileNotFoundError(f"no meshes or .tudf grids in {directory}")
    clouds = []
    for k, path in enumerate(paths):
        if path.endswith(".tudf"):
            mesh = extract_mesh(load_grid(path), iso_level)
        else:
            mesh = load_mesh(path)
        clouds.append(sample_points(mesh, n=num_points, seed=seed + k, source=source))
    return clouds


@app.command()
@handle_errors
def evaluate(
    generated_dir: str = typer.Option(..., "--generated-dir", help="generated meshes or .tudf grids"),
    reference_dir: str = typer.Option(..., "--reference-dir", help="reference meshes or .tudf grids"),
    out: str = typer.Option(..., "--out", help="report (.json)"),
    points: Optional[int] = typer.Option(None, "--points", help="points per mesh (metrics.num_points, 8192)"),
    distances: str = typer.Option("cd,emd", "--distances", help="comma-separated subset of cd, emd"),
    fid: Optional[float] = typer.Option(None, "--fid", help="FID from an external renderer, copied into the report"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """MMD, COV and 1-NNA under Chamfer and EMD between generated and reference sets"""
    started = time.time()
    cfg = load_run_config(config, set_, seed)
    num_points = points or cfg.metrics.num_points
    iso = cfg.geometry.iso_level
    generated = read_point_clouds(generated_dir, num_points, cfg.seed, "generated", iso)
    reference = read_point_clouds(reference_dir, num_points, cfg.seed + len(generated), "reference", iso)
    report = set_metrics(
        generated,
        reference,
        distances=[d.strip() for d in distances.split(",") if d.strip()],
        emd_exact_threshold=cfg.metrics.emd_exact_threshold,
        emd_epsilon=cfg.metrics.emd_epsilon,
        num_workers=cfg.metrics.num_workers,
    )
    report.seeds = {"generated": cfg.seed, "reference": cfg.seed + len(generated)}
    report.fid = fid
    write_json(out, report.model_dump(mode="json"))
    write_manifest(os.path.dirname(os.path.abspath(out)), "evaluate", cfg, report.seeds, started, [out], name=artifact_name(out))
    typer.echo(report.model_dump_json(indent=2))


@app.command("extract-mesh")
@handle_errors
def extract_mesh_command(
    grid: str = typer.Option(..., "--grid", help="TUDF grid (.tudf)"),
    out: str = typer.Option(..., "--out", help="mesh (.obj/.ply)"),
    iso_level: Optional[float] = typer.Option(None, "--iso-level", help="meters (geometry.iso_level, one voxel edge)"),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Contour a TUDF grid into a triangle mesh"""
    cfg = load_run_config(config, set_)
    tudf = load_grid(grid)
    save_mesh_atomic(tudf, out, iso_level if iso_level is not None else cfg.geometry.iso_level)
    typer.echo(f"{grid} -> {out}")


@app.command()
@handle_errors
def novelty(
    query: str = typer.Option(..., "--query", help="generated mesh or .tudf patch"),
    training_dir: str = typer.Option(..., "--training-dir", help="training meshes or .tudf patches"),
    out: str = typer.Option(..., "--out", help="retrieval report (.json)"),
    top_k: Optional[int] = typer.Option(None, "--top-k", help="neighbours to report (metrics.novelty_top_k, 3)"),
    points: Optional[int] = typer.Option(None, "--points", help="points per mesh (metrics.num_points, 8192)"),
    seed: Optional[int] = seed_option(),
    config: Optional[str] = config_option(),
    set_: List[str] = set_option(),
):
    """Nearest training samples of a generated one, by Chamfer distance over flips and quarter turns"""
    cfg = load_run_config(config, set_, seed)
    num_points = points or cfg.metrics.num_points
    iso = cfg.geometry.iso_level
    mesh = extract_mesh(load_grid(query), iso) if query.endswith(".tudf") else load_mesh(query)
    query_cloud = sample_points(mesh, n=num_points, seed=cfg.seed, source="generated")
    training_paths = list_files(training_dir, MESH_SUFFIXES + (".tudf",))
    training = read_point_clouds(training_dir, num_points, cfg.seed + 1, "reference", iso)
    matches = retrieve_nearest(query_cloud, training, top_k or cfg.metrics.novelty_top_k)
    payload = {
        "query": os.path.abspath(query),
        "matches": [
            {"path": training_paths[index], "chamfer": distance, "flip_axes": list(flips), "quarter_turns": turns}
            for index, distance, flips, turns in matches
        ],
    }
    write_json(out, payload)
    typer.echo(f"closest training sample: {payload['matches'][0]['path']} (chamfer {payload['matches'][0]['chamfer']:.3e})")


if __name__ == "__main__":
    app()
