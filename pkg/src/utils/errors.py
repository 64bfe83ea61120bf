"""Exception hierarchy shared by every layer of the package."""

from collections.abc import Sequence


class KDPLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(KDPLError, ValueError):
    """An experiment, template, or component configuration is invalid."""


class ShapeError(KDPLError, ValueError):
    """A tensor does not match the dimensions a model was configured with."""


class DegenerateInputError(KDPLError, ValueError):
    """An input cannot be processed, e.g. a zero-norm embedding."""


class ContractViolation(KDPLError, ValueError):
    """A caller broke an operation's precondition."""


class UnsupportedBackboneError(KDPLError):
    """The requested prompting needs a ViT image encoder."""


class CacheError(KDPLError):
    """Teacher prediction cache failure."""


class CacheCorruptionError(CacheError):
    """Stored cache content does not match its checksum or key."""


class SplitParseError(KDPLError, ValueError):
    """A split file record is malformed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(KDPLError):
    """An input sample could not be decoded."""

    def __init__(self, message: str, path: str | None = None) -> None:
        self.path = path
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)


class GenerationError(KDPLError):
    """The synthetic world cannot satisfy its configuration."""


class ResumeError(KDPLError):
    """A run directory holds artifacts from a different configuration."""


class TrainingDivergedError(KDPLError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(
        self, message: str, batch_ids: Sequence[str], prompt_norm: float
    ) -> None:
        self.batch_ids = list(batch_ids)
        self.prompt_norm = prompt_norm
        preview = ", ".join(self.batch_ids[:8])
        super().__init__(
            f"{message} (last batch: [{preview}], prompt norm: {prompt_norm:.4g})"
        )
