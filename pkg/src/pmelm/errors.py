"""Exception hierarchy shared across the package."""


class PMELMError(Exception):
    """Base class for all package errors."""


# data
class PanelFormatError(PMELMError, ValueError):
    pass


class MissingColumn(PanelFormatError):
    pass


class NonIntegerCount(PanelFormatError):
    pass


class NegativeCount(PanelFormatError):
    pass


class DuplicatePeriod(PanelFormatError):
    pass


class SubjectWithMissingPeriods(PanelFormatError):
    pass


class EmptyDesign(PMELMError, ValueError):
    pass


# model
class QuadratureDegenerate(PMELMError, ArithmeticError):
    pass


class LengthMismatch(PMELMError, ValueError):
    pass


class NonFiniteDerivative(PMELMError, ArithmeticError):
    pass


class NonConvergence(PMELMError, RuntimeError):
    def __init__(self, message: str, iterations: int = 0, grad_norm: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.grad_norm = grad_norm


class NonConcaveAtOptimum(PMELMError, RuntimeError):
    pass


# influence
class SingularHessian(PMELMError, ArithmeticError):
    pass


class SingularV(PMELMError, ArithmeticError):
    pass


# simulate
class RateOverflow(PMELMError, OverflowError):
    pass


class BadMethod(PMELMError, ValueError):
    pass


class BadTarget(PMELMError, ValueError):
    pass


# report
class TooFewSubjects(PMELMError, ValueError):
    pass
