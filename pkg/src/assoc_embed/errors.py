"""Exception types shared across the package.

Each class carries the process exit code the command-line driver maps it to.
"""


class AssocEmbedError(Exception):
    exit_code = 1


class StorageError(AssocEmbedError, OSError):
    """Filesystem failure while reading or writing an artifact."""

    exit_code = 2


class TensorFormatError(AssocEmbedError, ValueError):
    """A tensor file does not follow the AEHM layout (bad magic, version, ...)."""

    exit_code = 3


class TruncatedTensorError(TensorFormatError):
    """Header declares more payload than the file holds."""


class ParameterError(AssocEmbedError, ValueError):
    """Invalid argument: bad shapes, out-of-range settings, inconsistent inputs."""

    exit_code = 4


class DimensionMismatchError(ParameterError):
    pass


class DegenerateInputError(AssocEmbedError, ValueError):
    """The input is well formed but leaves the quantity undefined."""

    exit_code = 5


class GenerationError(DegenerateInputError):
    """Scene constraints could not be satisfied within the retry budget."""


class DivergenceError(AssocEmbedError, ArithmeticError):
    exit_code = 6
