"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (see repfuse.cli).
"""


class RepfuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RepfuseError):
    """Operands have incompatible dimensions."""


class ConfigError(RepfuseError):
    """Invalid configuration value or command usage."""


class PairingError(RepfuseError):
    """Paired sequences, manifests, or hypothesis sets do not line up."""


class FormatError(RepfuseError):
    """A binary file does not follow the expected layout."""


class TruncationError(FormatError):
    """A file header declares more payload than the file contains."""


class ValidationError(RepfuseError):
    """A manifest record violates an invariant (duplicate id, empty text)."""


class ManifestParseError(RepfuseError):
    """A manifest line is not valid JSON or lacks required fields."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DomainError(RepfuseError):
    """Input lies outside the mathematical domain of an operation."""


class SampleSizeError(DomainError):
    """Too few samples for the requested decomposition."""


class NumericalError(RepfuseError):
    """A computation produced non-finite values from finite inputs."""


class TrainingError(RepfuseError):
    """Training cannot proceed (e.g. no feasible sample in the whole set)."""
