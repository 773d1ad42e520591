import os
import pathlib
from dataclasses import dataclass, field
from typing import List, Sequence

import torch
import transformers
from transformers import Trainer
from transformers.utils import logging

from scenetree.artifacts import level_model_dir, save_pretrained_atomic, write_json
from scenetree.config import RunConfig
from scenetree.geometry.tudf import TUDFGrid
from scenetree.latent_tree.codec import LevelCodec, LevelCodecConfig
from scenetree.latent_tree.tree import evaluate_reconstruction
from scenetree.train.callbacks import JsonlLoggingCallback, NanGuardCallback, smoothed_plateau
from scenetree.train.datasets import (
    PatchCropDataset,
    collate_patches,
    compute_standardization,
    level_grids,
    split_holdout,
)

logger = logging.get_logger(__name__)

TRAIN_LOG_NAME = "train_log.jsonl"
RECONSTRUCTION_REPORT = "reconstruction.json"


@dataclass
class CodecTrainingArguments(transformers.TrainingArguments):
    level: int = field(default=1, metadata={"help": "coarse level i of the codec; it factorizes L_{i+1} into (L_i, H_i)"})
    patch_size: int = field(
        default=32, metadata={"help": "edge of the random training crops, in voxels of level i+1"}
    )
    augment_patches: bool = field(
        default=True, metadata={"help": "random flips across vertical planes and quarter turns about z"}
    )
    plateau_window: int = field(
        default=50, metadata={"help": "number of final logged losses averaged into the recorded plateau"}
    )


def codec_training_arguments(cfg: RunConfig, level: int, output_dir: str, patch_size: int) -> CodecTrainingArguments:
    return CodecTrainingArguments(
        output_dir=output_dir,
        level=level,
        patch_size=patch_size,
        per_device_train_batch_size=cfg.optim.codec_batch_size,
        learning_rate=cfg.optim.codec_learning_rate,
        max_steps=cfg.optim.codec_max_steps,
        save_steps=cfg.optim.save_steps,
        save_strategy="steps",
        logging_steps=cfg.optim.logging_steps,
        logging_nan_inf_filter=False,
        dataloader_num_workers=cfg.optim.dataloader_num_workers,
        remove_unused_columns=False,
        report_to="none",
        seed=cfg.seed + level,
        data_seed=cfg.seed + level,
    )


def crop_size(grids: Sequence[TUDFGrid], requested: int, factor: int) -> int:
    """Largest crop edge <= requested that fits every grid and divides by the level factor"""
    smallest = min(min(grid.dims) for grid in grids)
    size = min(requested, smallest) // factor * factor
    if size < factor:
        raise ValueError(f"level grids of min dim {smallest} are too small for factor {factor}")
    if size != requested:
        logger.warning(f"codec crops shrunk from {requested} to {size} voxels to fit the level grids")
    return size


def train_level_codec(
    level: int,
    train_grids: Sequence[TUDFGrid],
    cfg: RunConfig,
    out_dir: str,
) -> LevelCodec:
    """Fit the level-i codec on crops of level i+1 scene grids, then store its
    standardization stats and plateau with the checkpoint"""
    factors = cfg.ladder.factors
    factor = factors[level - 1]
    level_dir = os.path.join(out_dir, f"level{level}")
    fine_train = level_grids(train_grids, factors, level + 1)
    patch_size = crop_size(fine_train, cfg.codec.patch_size, factor)
    training_args = codec_training_arguments(cfg, level, level_dir, patch_size)

    transformers.set_seed(training_args.seed)
    model = LevelCodec(
        LevelCodecConfig(
            level=level,
            factor=factor,
            latent_channels=cfg.codec.latent_channels,
            hidden_channels=cfg.codec.hidden_channels,
            num_res_blocks=cfg.codec.num_res_blocks,
            truncation=cfg.geometry.truncation,
            factorized=cfg.codec.factorized,
            tile_size=cfg.codec.tile_size,
        )
    )
    train_dataset = PatchCropDataset(
        fine_train,
        patch_size,
        length=training_args.max_steps * training_args.per_device_train_batch_size,
        seed=training_args.seed,
        augment_patches=training_args.augment_patches,
    )
    logger.info(
        f"level {level} codec: {len(fine_train)} scenes, {patch_size}^3 crops, factor {factor}, "
        f"{sum(p.numel() for p in model.parameters())} parameters"
    )

    journal = JsonlLoggingCallback(os.path.join(level_dir, TRAIN_LOG_NAME), stage="codec", level=level)
    trainer = Trainer(
        model=model,
        args=training_args,
        train_dataset=train_dataset,
        data_collator=collate_patches,
        callbacks=[journal, NanGuardCallback(stage="codec", level=level)],
    )

    if list(pathlib.Path(training_args.output_dir).glob("checkpoint-*")):
        trainer.train(resume_from_checkpoint=True)
    else:
        trainer.train()

    trainer.save_state()

    model = trainer.model.eval()
    model.config.reconstruction_plateau = smoothed_plateau(journal.losses, training_args.plateau_window)
    compute_standardization(model, fine_train)
    save_pretrained_atomic(model, level_model_dir(out_dir, level))
    return model


def train_codecs(grids: Sequence[TUDFGrid], cfg: RunConfig, out_dir: str, holdout_fraction: float = 0.1) -> List[LevelCodec]:
    """One codec per level i in [1, N-1], each trained independently.

    Held-out scenes give the per-level test reconstruction error, written to
    reconstruction.json in `out_dir`.
    """
    train_grids, test_grids = split_holdout(grids, holdout_fraction)
    codecs, report = [], {"factorized": cfg.codec.factorized, "num_test_scenes": len(test_grids), "levels": {}}
    for level in range(1, cfg.num_levels):
        codec = train_level_codec(level, train_grids, cfg, out_dir)
        entry = {"plateau": codec.config.reconstruction_plateau, "test_l2": None}
        if test_grids:
            with torch.no_grad():
                entry["test_l2"] = evaluate_reconstruction(codec, level_grids(test_grids, cfg.ladder.factors, level + 1))
            logger.info(f"level {level} codec: held-out l2 {entry['test_l2']:.3e}")
        report["levels"][str(level)] = entry
        codecs.append(codec)
    write_json(os.path.join(out_dir, RECONSTRUCTION_REPORT), report)
    return codecs
