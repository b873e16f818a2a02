"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument has the wrong shape, range or value."""


class DegenerateInputError(ValueError):
    """Input is well-formed but geometrically degenerate."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class ConfigValidationError(ValueError):
    """A config or checkpoint is inconsistent with the requested operation."""
