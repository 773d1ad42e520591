import contextlib
import json
import os
import platform
import shutil
import subprocess
import time
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import torch
from pydantic import BaseModel, Field
from transformers.utils import logging

from scenetree.config import RunConfig, config_hash, dump_config
from scenetree.diffusion.unet import Denoiser
from scenetree.errors import MissingPrerequisiteError
from scenetree.latent_tree.codec import LevelCodec

logger = logging.get_logger(__name__)

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.yaml"


@contextlib.contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """Yields a temporary sibling of `path` (same suffix, so writers that dispatch on the
    extension still work) and renames it over `path` once the block succeeds."""
    path = os.path.abspath(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    root, ext = os.path.splitext(os.path.basename(path))
    tmp = os.path.join(os.path.dirname(path), f".{root}.tmp-{os.getpid()}{ext}")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_text(path: str, text: str):
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())


def write_json(path: str, payload) -> None:
    write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_pretrained_atomic(model, directory: str):
    """save_pretrained into a temporary directory, then swap it in"""
    directory = os.path.abspath(directory)
    tmp = f"{directory}.tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    model.save_pretrained(tmp)
    if os.path.exists(directory):
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def git_revision() -> Optional[str]:
    root = Path(__file__).resolve().parents[1]
    try:
        result = subprocess.run(["git", "rev-parse", "HEAD"], cwd=root, capture_output=True, text=True, check=False)
    except OSError:
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


class RunManifest(BaseModel):
    subcommand: str
    config_hash: str
    seeds: Dict[str, int] = Field(default_factory=dict)
    git_revision: Optional[str] = None
    python_version: str = Field(default_factory=platform.python_version)
    torch_version: str = Field(default_factory=lambda: torch.__version__)
    started_at: float
    wall_time: float
    outputs: List[str] = Field(default_factory=list)


def write_manifest(
    out_dir: str,
    subcommand: str,
    cfg: RunConfig,
    seeds: Dict[str, int],
    started_at: float,
    outputs: List[str] = (),
    name: Optional[str] = None,
) -> RunManifest:
    """Persist the merged config and a manifest next to the artifacts of one invocation.
    With `name` the files are {name}.config.yaml and {name}.manifest.json."""
    manifest = RunManifest(
        subcommand=subcommand,
        config_hash=config_hash(cfg),
        seeds=dict(seeds),
        git_revision=git_revision(),
        started_at=started_at,
        wall_time=time.time() - started_at,
        outputs=[os.path.abspath(o) for o in outputs],
    )
    prefix = f"{name}." if name else ""
    write_text(os.path.join(out_dir, prefix + CONFIG_NAME), dump_config(cfg))
    write_json(os.path.join(out_dir, prefix + MANIFEST_NAME), manifest.model_dump(mode="json"))
    logger.info(f"{subcommand}: manifest written to {out_dir} (config {manifest.config_hash[:12]})")
    return manifest


def level_model_dir(root: str, level: int) -> str:
    return os.path.join(root, f"level{level}", "model")


def load_codecs(codecs_dir: str, num_levels: int) -> List[LevelCodec]:
    """codecs[i - 1] is the level-i codec, i in [1, num_levels - 1]"""
    codecs = []
    for level in range(1, num_levels):
        path = level_model_dir(codecs_dir, level)
        if not os.path.exists(os.path.join(path, "config.json")):
            raise MissingPrerequisiteError(f"level {level} codec checkpoint at {path}", "train-codecs")
        codecs.append(LevelCodec.from_pretrained(path).eval())
    return codecs


def load_denoisers(diffusion_dir: str, num_levels: int) -> List[Denoiser]:
    """denoisers[i - 1] generates level i, i in [1, num_levels - 1]"""
    denoisers = []
    for level in range(1, num_levels):
        path = level_model_dir(diffusion_dir, level)
        if not os.path.exists(os.path.join(path, "config.json")):
            raise MissingPrerequisiteError(f"level {level} denoiser checkpoint at {path}", "train-diffusion")
        denoisers.append(Denoiser.from_pretrained(path).eval())
    return denoisers
