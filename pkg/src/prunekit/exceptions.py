"""Exception types raised across prunekit."""


class PrunekitError(Exception):
    """Base class for all prunekit errors."""


class ConfigurationError(PrunekitError, ValueError):
    """Invalid layer chain, schedule or experiment configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(PrunekitError, ValueError):
    """Tensor shapes do not line up."""


class NumericError(PrunekitError, ArithmeticError):
    """A non-finite value showed up where it must not."""


class FormatError(PrunekitError, ValueError):
    """A .pmk container could not be decoded."""

    def __init__(self, message, offset, layer=None):
        self.offset = offset
        self.layer = layer
        where = f"offset {offset}"
        if layer is not None:
            where += f", layer {layer!r}"
        super().__init__(f"{message} ({where})")


class UsageError(PrunekitError, ValueError):
    """A reporting or CLI request cannot be satisfied with the given inputs."""
