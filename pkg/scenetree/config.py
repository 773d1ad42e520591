import hashlib
import json
import os
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from scenetree.errors import ConfigError, ScheduleError
from scenetree.geometry.procedural import SceneSpec
from scenetree.geometry.tudf import DEFAULT_TRUNCATION, DEFAULT_VOXEL_SIZE
from scenetree.scene_synth.planning import overlap_stride


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LadderConfig(Section):
    resolutions: List[int] = Field(
        default=[16, 32, 128],
        description="patch edge per level, coarse to root",
    )
    factors: List[int] = Field(
        default=[2, 4], description="integer upsampling factor from level i to i+1, inferred from the ladder"
    )


class GeometryConfig(Section):
    voxel_size: float = Field(default=DEFAULT_VOXEL_SIZE, gt=0, description="root voxel edge in meters (0.022 m)")
    truncation: float = Field(default=DEFAULT_TRUNCATION, gt=0, description="TUDF truncation tau in meters (0.1 m)")
    iso_level: Optional[float] = Field(default=None, description="mesh extraction level; resolved to voxel_size")


class ScenesConfig(Section):
    count: int = Field(default=16, ge=1)
    spec: SceneSpec = Field(default_factory=SceneSpec)


class CodecConfig(Section):
    latent_channels: int = Field(default=4, ge=1, description="C, latent feature channels (4)")
    hidden_channels: int = Field(default=32, ge=1)
    num_res_blocks: int = Field(default=1, ge=0)
    patch_size: int = Field(default=32, ge=1, description="training crop edge at each level's own resolution")
    factorized: bool = Field(default=True, description="False trains the cascaded-latent baseline")
    tile_size: int = Field(default=16, ge=1)


class DiffusionConfig(Section):
    schedule: Literal["cosine", "linear"] = "cosine"
    num_timesteps: int = Field(default=1000, ge=1)
    sampler: Literal["ddpm", "ddim"] = "ddim"
    sampling_steps: int = Field(default=50, ge=1)
    base_channels: int = Field(default=32, ge=1)
    channel_mults: List[int] = Field(default=[1, 2, 4])
    num_res_blocks: int = Field(default=1, ge=0)
    norm_groups: int = Field(default=8, ge=1)


class OptimConfig(Section):
    codec_batch_size: int = Field(default=4, ge=1, description="batch size 4 for the codecs")
    codec_learning_rate: float = Field(default=1e-4, gt=0)
    codec_max_steps: int = Field(default=2000, ge=1)
    diffusion_batch_size: int = Field(default=8, ge=1, description="batch size 8 for the denoisers")
    diffusion_learning_rate: float = Field(default=1e-4, gt=0)
    diffusion_max_steps: int = Field(default=2000, ge=1)
    save_steps: int = Field(default=500, ge=1)
    logging_steps: int = Field(default=1, ge=1)
    dataloader_num_workers: int = Field(default=0, ge=0)


class SynthesisConfig(Section):
    overlap: float = Field(default=0.5, gt=0, lt=1, description="patch overlap fraction (one half)")
    refine_mode: Literal["parallel", "sequential"] = "parallel"
    max_batch: int = Field(default=16, ge=1, description="patches per denoiser forward pass during fusion")
    feathered: bool = False
    pin_known_levels: bool = False


class MetricsConfig(Section):
    num_points: int = Field(default=8192, ge=1, description="points sampled per mesh (8,192)")
    emd_exact_threshold: int = Field(default=256, ge=1)
    emd_epsilon: float = Field(default=1e-3, gt=0)
    num_workers: int = Field(default=4, ge=1)
    novelty_top_k: int = Field(default=3, ge=1)


class PathsConfig(Section):
    scenes_dir: str = "data/scenes"
    grids_dir: str = "data/grids"
    codecs_dir: str = "runs/codecs"
    diffusion_dir: str = "runs/diffusion"
    output_dir: str = "runs/output"


class RunConfig(Section):
    seed: int = 0
    num_levels: Optional[int] = None
    ladder: LadderConfig = Field(default_factory=LadderConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    scenes: ScenesConfig = Field(default_factory=ScenesConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def resolve_defaults(self):
        if self.num_levels is None:
            self.num_levels = len(self.ladder.resolutions)
        if self.geometry.iso_level is None:
            self.geometry.iso_level = self.geometry.voxel_size
        for name in ("scenes_dir", "grids_dir", "codecs_dir", "diffusion_dir", "output_dir"):
            setattr(self.paths, name, os.path.abspath(getattr(self.paths, name)))
        return self

    def level_voxel_size(self, level: int) -> float:
        """Voxel edge at tree level `level` (the root is level num_levels)"""
        scale = 1
        for f in self.ladder.factors[level - 1:]:
            scale *= f
        return self.geometry.voxel_size * scale


def consistency_violations(cfg: RunConfig) -> List[str]:
    violations = []
    resolutions, factors = cfg.ladder.resolutions, cfg.ladder.factors
    if len(resolutions) < 2:
        violations.append(f"ladder.resolutions: need N >= 2 levels, got {resolutions}")
    if len(factors) != len(resolutions) - 1:
        violations.append(
            f"ladder.factors: {len(resolutions)} resolutions need {len(resolutions) - 1} factors, got {factors}"
        )
    else:
        for i, f in enumerate(factors):
            if f < 1:
                violations.append(f"ladder.factors[{i}]: must be >= 1, got {f}")
            elif resolutions[i] * f != resolutions[i + 1]:
                violations.append(
                    f"ladder: resolutions[{i}] * factors[{i}] = {resolutions[i]} * {f} = "
                    f"{resolutions[i] * f} != resolutions[{i + 1}] = {resolutions[i + 1]}"
                )
    if cfg.num_levels != len(resolutions):
        violations.append(f"num_levels: {cfg.num_levels} != len(ladder.resolutions) = {len(resolutions)}")
    for i, f in enumerate(factors):
        if f >= 1 and cfg.codec.patch_size % f:
            violations.append(f"codec.patch_size: {cfg.codec.patch_size} is not divisible by factors[{i}] = {f}")
    multiple = 2 ** (len(cfg.diffusion.channel_mults) - 1)
    for i, r in enumerate(resolutions[:-1]):
        if r % multiple:
            violations.append(
                f"ladder.resolutions[{i}]: {r} is not divisible by the UNet multiple {multiple} "
                f"({len(cfg.diffusion.channel_mults)} stages)"
            )
    if cfg.diffusion.sampling_steps > cfg.diffusion.num_timesteps:
        violations.append(
            f"diffusion.sampling_steps: {cfg.diffusion.sampling_steps} > num_timesteps {cfg.diffusion.num_timesteps}"
        )
    for r in resolutions[:-1]:
        try:
            overlap_stride(r, cfg.synthesis.overlap)
        except ScheduleError as e:
            violations.append(f"synthesis.overlap: {e}")
    iso = cfg.geometry.iso_level
    if iso is not None and not 0 < iso < cfg.geometry.truncation:
        violations.append(f"geometry.iso_level: {iso} must lie in (0, {cfg.geometry.truncation})")
    return violations


def path_violations(paths: PathsConfig) -> List[str]:
    """Each configured directory must exist or be creatable under its nearest existing ancestor"""
    violations = []
    for name in PathsConfig.model_fields:
        path = getattr(paths, name)
        if os.path.exists(path):
            if not os.path.isdir(path):
                violations.append(f"paths.{name}: {path} exists and is not a directory")
            continue
        ancestor = os.path.dirname(path)
        while not os.path.exists(ancestor):
            ancestor = os.path.dirname(ancestor)
        if not os.path.isdir(ancestor):
            violations.append(f"paths.{name}: cannot create {path}, {ancestor} is not a directory")
        elif not os.access(ancestor, os.W_OK | os.X_OK):
            violations.append(f"paths.{name}: cannot create {path}, {ancestor} is not writable")
    return violations



def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """`section.key=value` assignments, values parsed as YAML"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r}: {part} is not a section"])
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def validate_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load, override and fully resolve a run config. Every violation is reported at once."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError([f"{path}: {e.strerror}"]) from e
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: not valid YAML ({e})"]) from e
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    raw = apply_overrides(raw, overrides)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(
            [f"{'.'.join(str(p) for p in error['loc']) or '<root>'}: {error['msg']}" for error in e.errors()]
        ) from e
    violations = consistency_violations(cfg) + path_violations(cfg.paths)
    if violations:
        raise ConfigError(violations)
    return cfg


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
