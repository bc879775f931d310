"""Exception hierarchy shared by every subsystem."""


class VaeDiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VaeDiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(VaeDiffError, ValueError):
    """An input lies outside the numeric domain of an operation."""


class ContractError(VaeDiffError, ValueError):
    """A documented precondition was violated by the caller."""


class ValidationError(VaeDiffError, ValueError):
    """Bad configuration or malformed input data, detected before work starts."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where += f"[{key}] "
        if line is not None:
            where += f"(line {line}) "
        super().__init__(where + message)


class FormatError(VaeDiffError):
    """A persisted file could not be decoded."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TensorNameError(VaeDiffError, KeyError):
    """Checkpoint tensor names do not match the model being loaded."""

    def __init__(self, missing=(), unexpected=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts))

    def __str__(self):
        return self.args[0]


class DivergenceError(VaeDiffError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, record=None):
        self.record = record
        super().__init__(message)
