import os
import pathlib
from dataclasses import dataclass, field
from typing import Sequence

import transformers
from transformers import Trainer
from transformers.utils import logging

from scenetree.artifacts import level_model_dir, save_pretrained_atomic
from scenetree.config import RunConfig
from scenetree.diffusion.schedule import NoiseSchedule
from scenetree.diffusion.unet import Denoiser, DenoiserConfig
from scenetree.errors import ShapeMismatchError
from scenetree.geometry.tudf import TUDFGrid
from scenetree.latent_tree.codec import LevelCodec
from scenetree.train.callbacks import JsonlLoggingCallback, NanGuardCallback
from scenetree.train.datasets import DiffusionCollator, PatchCropDataset, level_grids

logger = logging.get_logger(__name__)

TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass
class DiffusionTrainingArguments(transformers.TrainingArguments):
    level: int = field(default=1, metadata={"help": "tree level the denoiser generates (1 = coarsest, unconditional)"})
    patch_size: int = field(
        default=16, metadata={"help": "latent patch edge in voxels of level i (16 at level 1 for the 16-32-128 ladder)"}
    )
    schedule_family: str = field(default="cosine", metadata={"help": "noise schedule family: cosine or linear"})
    num_timesteps: int = field(default=1000, metadata={"help": "number of forward diffusion steps T"})
    augment_patches: bool = field(
        default=True, metadata={"help": "random flips across vertical planes and quarter turns about z"}
    )


def diffusion_training_arguments(cfg: RunConfig, level: int, output_dir: str) -> DiffusionTrainingArguments:
    return DiffusionTrainingArguments(
        output_dir=output_dir,
        level=level,
        patch_size=cfg.ladder.resolutions[level - 1],
        schedule_family=cfg.diffusion.schedule,
        num_timesteps=cfg.diffusion.num_timesteps,
        per_device_train_batch_size=cfg.optim.diffusion_batch_size,
        learning_rate=cfg.optim.diffusion_learning_rate,
        max_steps=cfg.optim.diffusion_max_steps,
        save_steps=cfg.optim.save_steps,
        save_strategy="steps",
        logging_steps=cfg.optim.logging_steps,
        logging_nan_inf_filter=False,
        # the collator runs the frozen codec, keep it in the main process
        dataloader_num_workers=0,
        remove_unused_columns=False,
        report_to="none",
        seed=cfg.seed + 100 * level,
        data_seed=cfg.seed + 100 * level,
    )


def train_denoiser(level: int, codecs: Sequence[LevelCodec], grids: Sequence[TUDFGrid], cfg: RunConfig, out_dir: str) -> Denoiser:
    """Train the level-i denoiser on latents inferred on the fly from random crops.

    Crops are taken from level i+1 grids and factorized by the frozen level-i codec, so no
    latents are ever stored. Level 1 learns the joint [L_1, H_1] tensor unconditionally,
    higher levels learn H_i conditioned on L_i.
    """
    if not 1 <= level < cfg.num_levels:
        raise ValueError(f"level must lie in [1, {cfg.num_levels - 1}], got {level}")
    codec = codecs[level - 1]
    if codec.config.latent_channels != cfg.codec.latent_channels:
        raise ShapeMismatchError(
            f"level {level} codec has {codec.config.latent_channels} latent channels, config says {cfg.codec.latent_channels}"
        )

    level_dir = os.path.join(out_dir, f"level{level}")
    training_args = diffusion_training_arguments(cfg, level, level_dir)
    fine_patch = training_args.patch_size * codec.config.factor
    fine_grids = level_grids(grids, cfg.ladder.factors, level + 1)

    transformers.set_seed(training_args.seed)
    model = Denoiser(
        DenoiserConfig(
            level=level,
            latent_channels=cfg.codec.latent_channels,
            base_channels=cfg.diffusion.base_channels,
            channel_mults=cfg.diffusion.channel_mults,
            num_res_blocks=cfg.diffusion.num_res_blocks,
            norm_groups=cfg.diffusion.norm_groups,
            schedule_family=training_args.schedule_family,
            num_timesteps=training_args.num_timesteps,
            patch_size=training_args.patch_size,
        )
    )
    schedule = NoiseSchedule.create(training_args.schedule_family, training_args.num_timesteps)
    train_dataset = PatchCropDataset(
        fine_grids,
        fine_patch,
        length=training_args.max_steps * training_args.per_device_train_batch_size,
        seed=training_args.seed,
        augment_patches=training_args.augment_patches,
    )
    collator = DiffusionCollator(codec.to(training_args.device), schedule, level, seed=training_args.seed)
    logger.info(
        f"level {level} denoiser: {len(fine_grids)} scenes, {training_args.patch_size}^3 latent patches "
        f"({model.config.kind}), {sum(p.numel() for p in model.parameters())} parameters"
    )

    trainer = Trainer(
        model=model,
        args=training_args,
        train_dataset=train_dataset,
        data_collator=collator,
        callbacks=[
            JsonlLoggingCallback(os.path.join(level_dir, TRAIN_LOG_NAME), stage="diffusion", level=level),
            NanGuardCallback(stage="diffusion", level=level),
        ],
    )

    if list(pathlib.Path(training_args.output_dir).glob("checkpoint-*")):
        trainer.train(resume_from_checkpoint=True)
    else:
        trainer.train()

    trainer.save_state()

    model = trainer.model.eval()
    save_pretrained_atomic(model, level_model_dir(out_dir, level))
    return model
