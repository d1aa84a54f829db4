"""Exception taxonomy shared by every module.

Exit-code mapping used by the CLI: InvalidInputError -> 2,
ArtifactError -> 3, NumericalError -> 4.
"""


class InvalidInputError(ValueError):
    """Caller passed a value that violates a documented precondition."""


class ArtifactError(RuntimeError):
    """A required on-disk artifact (checkpoint, clip, manifest) is missing or corrupt."""


class NumericalError(RuntimeError):
    """An optimization or integration produced non-finite values."""
