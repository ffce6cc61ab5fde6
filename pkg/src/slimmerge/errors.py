"""Exception types raised across the package."""


class MergeError(Exception):
    """Base class for all package errors."""


class DimMismatch(MergeError, ValueError):
    def __init__(self, layer, expected=None, got=None):
        self.layer = layer
        msg = f"dimension mismatch in layer {layer!r}"
        if expected is not None:
            msg += f": expected {expected}, got {got}"
        super().__init__(msg)


class MissingLayer(MergeError, KeyError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing layer {name!r}")

    def __str__(self):
        return self.args[0]


class FormatError(MergeError, ValueError):
    def __init__(self, offset, reason):
        self.offset = offset
        super().__init__(f"bad file at byte {offset}: {reason}")


class SpecError(MergeError, ValueError):
    pass


class CoeffLenMismatch(MergeError, ValueError):
    pass


class ConvergenceError(MergeError, RuntimeError):
    pass


class RankOutOfRange(MergeError, ValueError):
    pass


class NonFinite(MergeError, FloatingPointError):
    def __init__(self, iteration, what="loss"):
        self.iteration = iteration
        super().__init__(f"{what} became non-finite at iteration {iteration}")


class MissingFactor(MergeError, KeyError):
    def __init__(self, component, layer):
        self.component = component
        self.layer = layer
        super().__init__(f"no factor pair for ({component!r}, {layer!r})")

    def __str__(self):
        return self.args[0]


class TaskOutOfRange(MergeError, IndexError):
    pass


class InfeasibleBudget(MergeError, ValueError):
    pass


class MissingParam(MergeError, KeyError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing parameter {name!r}")

    def __str__(self):
        return self.args[0]


class ConfigError(MergeError, ValueError):
    def __init__(self, field, constraint):
        self.field = field
        self.constraint = constraint
        super().__init__(f"invalid config field {field!r}: {constraint}")
