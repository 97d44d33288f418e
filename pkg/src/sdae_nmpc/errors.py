"""Exception hierarchy shared by all solver modules."""


class SdaeError(Exception):
    """Base class for every error raised by this package."""


class NoConvergence(SdaeError):
    """A Newton-type iteration hit its iteration limit."""

    def __init__(self, message, iterations=None, index=None):
        super().__init__(message)
        self.iterations = iterations
        self.index = index


class SingularJacobian(SdaeError):
    pass


class NonFiniteEvaluation(SdaeError):
    pass


class NonFiniteResidual(NonFiniteEvaluation):
    pass


class InconsistentInput(SdaeError):
    """Initial algebraic states do not satisfy the constraint."""


class IntegrationFailure(SdaeError):
    def __init__(self, message, step=None, interval=None):
        super().__init__(message)
        self.step = step
        self.interval = interval


class SingularInnovationCovariance(SdaeError):
    pass


class AlgebraicNoConvergence(NoConvergence):
    pass


class DomainError(SdaeError, ValueError):
    pass


class InfeasibleQP(SdaeError):
    pass


class RankDeficientConstraints(SdaeError):
    pass


class LineSearchFailure(SdaeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class MaxIterations(SdaeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ParseError(SdaeError, ValueError):
    pass


class RunError(SdaeError):
    def __init__(self, message, step=None, log=None):
        super().__init__(message)
        self.step = step
        self.log = log
