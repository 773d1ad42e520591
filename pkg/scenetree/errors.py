class SceneTreeError(Exception):
    """Base class for every error raised by the scenetree package"""


class GeometryError(SceneTreeError):
    pass


class ShapeMismatchError(SceneTreeError):
    pass


class ScheduleError(SceneTreeError):
    pass


class SerializationError(SceneTreeError):
    pass


class ConfigError(SceneTreeError):
    """Raised by validate_config. Carries every violation found, not just the first one"""

    def __init__(self, violations):
        self.violations = list(violations)
        message = "invalid config:\n" + "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(message)


class TrainingDivergedError(SceneTreeError):
    def __init__(self, stage: str, level: int, step: int, last_finite_loss=None):
        self.stage = stage
        self.level = level
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"{stage} training diverged at level {level}, step {step}: loss is NaN/inf "
            f"(last finite loss: {last_finite_loss}). Try a lower learning rate or check the input grids."
        )


class MissingPrerequisiteError(SceneTreeError):
    def __init__(self, missing: str, producer: str):
        self.missing = missing
        self.producer = producer
        super().__init__(f"missing {missing}; run `{producer}` first")
