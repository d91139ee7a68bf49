"""Exception hierarchy shared by all modules."""


class MFGError(Exception):
    """Base class for every error raised by this package."""


class GridMismatchError(MFGError, ValueError):
    """Fields living on different grids were combined."""


class DomainError(MFGError, ValueError):
    """A model was evaluated outside its domain (e.g. nonpositive density)."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class VelocityFixedPointError(MFGError):
    """The velocity fixed point V = D_pH(x, Du, m, V) could not be resolved."""

    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class SingularSystemError(MFGError):
    """A linear solve failed or the assembled system is singular/non-finite."""


class NewtonStalledError(MFGError):
    """Newton iteration did not reach the requested tolerance."""

    def __init__(self, message, best_residual=None, iterations=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


class ContinuationError(MFGError):
    """The continuation path could not reach lambda = 1."""

    def __init__(self, message, trace=None, state=None, lam=None):
        super().__init__(message)
        self.trace = trace
        self.state = state
        self.lam = lam


class OracleError(MFGError):
    """The Picard oracle failed to converge."""


class AdjointError(MFGError):
    """Adjoint evolution produced an invalid density."""


class ConfigError(MFGError):
    """Invalid configuration file or command-line input."""

    def __init__(self, message, key=None, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.key = key
        self.line = line
