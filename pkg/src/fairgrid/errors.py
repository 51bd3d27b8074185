"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
anything else that goes wrong at runtime exits with 3.
"""


class FairgridError(Exception):
    """Base class for all package errors."""


class ConfigError(FairgridError):
    """Invalid configuration values or inconsistent settings."""


class InputError(FairgridError):
    """Malformed runtime inputs (non-finite coordinates, bad values)."""


class ShapeError(FairgridError):
    """Tensor or matrix dimensions do not agree."""


class CapacityError(FairgridError):
    """More nodes than the padded capacity allows."""


class GraphValidationError(FairgridError):
    """A graph violates a structural invariant (names the offending entry)."""


class DatasetFormatError(FairgridError):
    """Dataset file cannot be parsed or carries an unsupported version."""


class CheckpointFormatError(FairgridError):
    """Checkpoint file is corrupt or has a mismatched version header."""


class DegenerateInputError(FairgridError):
    """Inputs make the requested quantity undefined (e.g. zero population)."""


class TrainingError(FairgridError):
    """Training diverged or could not proceed."""


class SamplingError(FairgridError):
    """Reverse-process integration failed (reports the step index)."""


class PipelineError(FairgridError):
    """A pipeline stage failed; partial artifacts are retained."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
