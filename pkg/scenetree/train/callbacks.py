import json
import math
import os
from typing import List, Optional

import numpy as np
from transformers import TrainerCallback
from transformers.utils import logging

from scenetree.errors import TrainingDivergedError

logger = logging.get_logger(__name__)


class JsonlLoggingCallback(TrainerCallback):
    """Appends one record per logging step to a newline-delimited journal:
    {"stage", "level", "step", "epoch", "loss", "learning_rate"}.

    When training resumes from a checkpoint, records past the restored step are dropped
    so the journal reads as one continuous curve.
    """

    def __init__(self, path: str, stage: str, level: int):
        self.path = path
        self.stage = stage
        self.level = level
        self.records: List[dict] = []

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    def on_train_begin(self, args, state, control, **kwargs):
        kept = []
        if os.path.exists(self.path):
            with open(self.path, "r") as f:
                for line in f:
                    if line.strip():
                        record = json.loads(line)
                        if record["step"] <= state.global_step:
                            kept.append(record)
        if state.is_world_process_zero:
            os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
            with open(self.path, "w") as f:
                for record in kept:
                    f.write(json.dumps(record) + "\n")
        self.records = kept
        if kept:
            logger.info(f"{self.stage} level {self.level}: continuing {self.path} after step {state.global_step}")

    def on_log(self, args, state, control, logs=None, **kwargs):
        if not logs or "loss" not in logs:
            return
        record = {
            "stage": self.stage,
            "level": self.level,
            "step": state.global_step,
            "epoch": state.epoch,
            "loss": float(logs["loss"]),
            "learning_rate": logs.get("learning_rate"),
        }
        self.records.append(record)
        if state.is_world_process_zero:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


class NanGuardCallback(TrainerCallback):
    """Aborts training on the first non-finite logged loss.

    Needs `logging_nan_inf_filter=False`, otherwise the Trainer silently replaces
    non-finite losses before they are logged.
    """

    def __init__(self, stage: str, level: int):
        self.stage = stage
        self.level = level
        self.last_finite_loss: Optional[float] = None

    def on_log(self, args, state, control, logs=None, **kwargs):
        if not logs or "loss" not in logs:
            return
        loss = float(logs["loss"])
        if not math.isfinite(loss):
            raise TrainingDivergedError(self.stage, self.level, state.global_step, self.last_finite_loss)
        self.last_finite_loss = loss


def smoothed_plateau(losses: List[float], window: int = 50) -> Optional[float]:
    """Mean of the last `window` logged losses"""
    if not losses:
        return None
    return float(np.mean(losses[-window:]))
