"""Exception types shared across the package.

Each failure class gets its own exception so callers (and the CLI exit-code
mapping) can tell schema problems, artifact corruption and training blowups
apart without parsing messages.
"""


class MecError(Exception):
    """Base class for all package errors."""


class SchemaError(MecError):
    """Raw input rows do not match the declared column schema."""


class ConfigError(MecError):
    """A run configuration failed validation."""


class ArtifactError(MecError):
    """Base class for artifact (de)serialization failures."""


class BadMagicError(ArtifactError):
    """File does not start with the expected format tag."""


class TruncatedArtifactError(ArtifactError):
    """File ended before the declared payload was read."""


class ShapeMismatchError(ArtifactError):
    """Declared dimensions are inconsistent with the payload or each other."""


class TrainingDivergedError(MecError):
    """A non-finite loss was observed; carries diagnostic context."""

    def __init__(self, message: str, batch_index: int, param_norms: dict):
        super().__init__(message)
        self.batch_index = batch_index
        self.param_norms = param_norms
