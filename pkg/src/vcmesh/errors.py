class VcMeshError(Exception):
    """Base class for errors raised by this package."""


class InputError(VcMeshError, ValueError):
    """Malformed or inconsistent user input (indices, shapes, files)."""


class ParseError(InputError):
    """A text mesh file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigurationError(VcMeshError, ValueError):
    """A structurally valid request that cannot be satisfied (e.g. bad stride/radius)."""


class VerificationError(VcMeshError):
    """A numerical verification (gradient check) failed its tolerance."""
