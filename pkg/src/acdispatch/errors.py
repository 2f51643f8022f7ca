"""Exception hierarchy shared by all modules."""


class DispatchError(Exception):
    """Base class for every error raised by the package."""


class ParseError(DispatchError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        locus = []
        if line is not None:
            locus.append(f"line {line}")
        if field is not None:
            locus.append(field)
        if locus:
            message = f"{message} ({', '.join(locus)})"
        super().__init__(message)


class ValidationError(DispatchError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class IslandingError(DispatchError):
    pass


class DimensionMismatch(DispatchError, ValueError):
    pass


class NonConvergence(DispatchError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class SingularJacobian(DispatchError):
    pass


class NumericallySingular(SingularJacobian):
    """Pivot decay in a Jacobian factorization; carries the suspect rows."""

    def __init__(self, message, rows=()):
        self.rows = tuple(rows)
        super().__init__(message)


class SolvabilityBoundary(DispatchError):
    def __init__(self, message, hour=None, island=None, buses=()):
        self.hour = hour
        self.island = island
        self.buses = tuple(buses)
        super().__init__(message)


class StepFailure(DispatchError):
    def __init__(self, message, weak_locations=()):
        self.weak_locations = tuple(weak_locations)
        super().__init__(message)


class Infeasible(DispatchError):
    def __init__(self, message, rows=()):
        self.rows = tuple(rows)
        super().__init__(message)


class NotConverged(DispatchError):
    pass


class GridTooLarge(DispatchError):
    pass


class NoFeasiblePoint(DispatchError):
    pass
