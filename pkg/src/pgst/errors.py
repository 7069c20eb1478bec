"""Exception taxonomy shared across the package."""


class PGSTError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(PGSTError, ValueError):
    """An argument value is outside the documented domain of an operation."""


class ShapeError(PGSTError, ValueError):
    """Tensor arguments have incompatible or unexpected shapes."""


class ConfigError(PGSTError, ValueError):
    """A configuration object or file is inconsistent or unusable."""


class ParseError(PGSTError, ValueError):
    """Serialized data (JSON, checkpoint, dataset) failed validation."""


class DivergedError(PGSTError, RuntimeError):
    """Style optimization produced a non-finite objective.

    ``iteration`` is the first iteration index whose objective was non-finite.
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
