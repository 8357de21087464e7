"""Typed error hierarchy used across the pipeline."""


class DekanError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DekanError):
    """Invalid, inconsistent or unknown configuration."""


class InputError(DekanError):
    """An argument violates a documented precondition."""


class DataFreenessError(DekanError):
    """Original domain data reached a stage that must only see synthetic data."""


class SynthesisError(DekanError):
    """Image synthesis diverged or produced non-finite losses."""


class TrainingError(DekanError):
    """Model training diverged or missed a required quality gate."""


class PersistenceError(DekanError):
    """An artifact on disk is missing, truncated or inconsistent."""


class StageError(DekanError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
