"""Exception hierarchy shared by all modules."""


class MbpireError(Exception):
    """Base class for every error raised by this package."""


class NonStochastic(MbpireError):
    pass


class EmptyAlphabet(MbpireError):
    pass


class NotErgodic(MbpireError):
    pass


class InvalidTables(MbpireError):
    """Raised when an operation receives law tables that fail validation."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class InvalidMinorization(MbpireError):
    pass


class DominationViolated(MbpireError):
    pass


class CapExceeded(MbpireError):
    pass


class DepthExceeded(MbpireError):
    pass


class Supercritical(MbpireError):
    pass


class DegenerateVariance(MbpireError):
    pass


class CapTooSmall(MbpireError):
    pass


class NoConvergence(MbpireError):
    pass


class ZeroMass(MbpireError):
    pass


class NotSingleType(MbpireError):
    pass


class ConfigParseError(MbpireError):
    pass


class ConfigValidationError(MbpireError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))
