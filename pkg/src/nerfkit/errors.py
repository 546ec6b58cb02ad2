"""Exception hierarchy. The CLI prints `error[<ClassName>]: message` on failure."""


class NerfkitError(Exception):
    pass


class ShapeError(NerfkitError, ValueError):
    pass


class UsageError(NerfkitError, ValueError):
    pass


class ContractError(NerfkitError, ValueError):
    """A documented precondition (unit direction, orthonormal rotation, ...) was violated."""


class BoundsError(NerfkitError, IndexError):
    pass


class TrainingError(NerfkitError, RuntimeError):
    def __init__(self, message, index=None, iteration=None):
        super().__init__(message)
        self.index = index
        self.iteration = iteration


class FormatError(NerfkitError, ValueError):
    """Unsupported or corrupt on-disk data."""


class ParseError(FormatError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


class ValidationError(NerfkitError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class TopologyError(NerfkitError, ValueError):
    pass
