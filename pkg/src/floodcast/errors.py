"""Exception types raised across the package."""


class FloodcastError(Exception):
    """Base class for all package errors."""


class InvalidGraphError(FloodcastError, ValueError):
    pass


class DuplicateEdgeError(InvalidGraphError):
    pass


class DimensionError(FloodcastError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class ContractError(FloodcastError, ValueError):
    """A precondition of an operation was violated."""


class UncoveredPeriodError(FloodcastError, ValueError):
    pass


class BelowOffsetError(FloodcastError, ValueError):
    pass


class DomainError(FloodcastError, ValueError):
    pass


class InsufficientDataError(FloodcastError, ValueError):
    pass


class ParseError(FloodcastError, ValueError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigError(FloodcastError, ValueError):
    pass
