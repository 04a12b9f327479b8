"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (unknown keys, bad overrides, missing extractor weights)."""


class DataError(ValueError):
    """Dataset problems: unpaired files, unreadable or unsupported images, empty inputs."""


class NumericalStabilityError(RuntimeError):
    """A non-finite value appeared mid-computation; message names where."""


class ShapeMismatchError(ValueError):
    """Tensor shapes violate an operation's contract."""


class NonFiniteInputError(ValueError):
    """Input contains NaN or Inf pixels."""
