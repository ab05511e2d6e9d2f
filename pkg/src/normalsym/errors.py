"""Exception types shared across the package."""


class NormalSymError(Exception):
    """Base class for all package errors."""


class VectorOutsideRadius(NormalSymError):
    pass


class PointOutsideRadius(NormalSymError):
    pass


class ShootingDiverged(NormalSymError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class JetDepthExceeded(NormalSymError):
    pass


class DepthExceeded(NormalSymError):
    pass


class StepUnderflow(NormalSymError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonDecreasingOrders(NormalSymError):
    pass


class OracleMismatch(NormalSymError):
    def __init__(self, message, discrepancy=None):
        super().__init__(message)
        self.discrepancy = discrepancy


class ShapeMismatch(NormalSymError):
    pass


class ClassMismatch(NormalSymError):
    pass


class ResolutionInsufficient(NormalSymError):
    pass


class NyquistExceeded(NormalSymError):
    pass


class NotElliptic(NormalSymError):
    pass


class NotConverged(NormalSymError):
    def __init__(self, message, residual_orders=None):
        super().__init__(message)
        self.residual_orders = residual_orders


class ParseError(NormalSymError):
    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ScenarioInvalid(NormalSymError):
    def __init__(self, message, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(message + (f" [{', '.join(where)}]" if where else ""))
        self.field = field
        self.line = line
