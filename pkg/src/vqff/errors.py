"""Exception types shared across the package."""


class VqffError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(VqffError, ValueError):
    """A binary or JSON file is malformed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, *, path=None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class BuildError(VqffError, RuntimeError):
    """The quantization pipeline could not complete."""


class NotFoundError(VqffError, KeyError):
    """An image or scale id is not present in a store."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"
