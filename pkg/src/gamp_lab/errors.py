"""Exception hierarchy.  Every error raised by the package derives from GampLabError."""


class GampLabError(Exception):
    pass


class InvalidArgumentError(GampLabError, ValueError):
    pass


class InvalidCovarianceError(InvalidArgumentError):
    pass


class NumericalDomainError(GampLabError, ArithmeticError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class BracketingError(GampLabError, RuntimeError):
    pass


class DegeneratePosteriorError(NumericalDomainError):
    """A posterior normalizer vanished even after log-domain rescaling."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DerivativeUnavailableError(NumericalDomainError):
    pass


class ConfigError(GampLabError, ValueError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class EstimatorError(GampLabError, RuntimeError):
    """An estimator failed inside a GAMP iteration."""

    def __init__(self, message, iteration, index=None, trace=None):
        super().__init__(f"iteration {iteration}, component {index}: {message}")
        self.iteration = iteration
        self.index = index
        self.trace = trace


class DivergenceError(GampLabError, RuntimeError):
    def __init__(self, message, iteration, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class SingularUpdateError(GampLabError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
