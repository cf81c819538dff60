"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shape, range, arity)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during differentiation.

    ``op`` names the graph operation whose gradient first went bad.
    """

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class UnsupportedOpError(NotImplementedError):
    """An op without a second-order rule was hit on a double-backprop path."""

    def __init__(self, op):
        super().__init__(f"op {op!r} has no second-order rule; cannot build a differentiable gradient through it")
        self.op = op


class DegenerateEstimateError(ArithmeticError):
    """Covariance estimate carries no signal (non-positive average diagonal)."""


class CapacityError(MemoryError):
    """Requested dense materialisation exceeds the configured size cap."""


class FormatError(ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid or incomplete configuration. ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
