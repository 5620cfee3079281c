"""
Exceptions raised across duohash.

The CLI maps ConfigError to exit code 2 and NumericalError to exit code 3.
"""


class DuohashError(Exception):
    pass


class ConfigError(DuohashError, ValueError):
    pass


class ShapeError(DuohashError, ValueError):
    pass


class NumericalError(DuohashError, ArithmeticError):
    """ Non-finite loss or degenerate numerics

    @param message Human readable description
    @param diagnostics Dictionary with whatever context is available
        (epoch, iteration, loss values, ...)
    """
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        msg = super().__str__()
        if self.diagnostics:
            details = ", ".join("{}={}".format(k, v) for k, v in sorted(self.diagnostics.items()))
            msg = "{} ({})".format(msg, details)
        return msg


class DegenerateEmbeddingError(NumericalError):
    pass


class UnachievablePrecisionError(DuohashError, ValueError):
    def __init__(self, target, best_precision):
        super().__init__("target precision {:.4f} is unachievable, best achievable precision is {:.4f}"
                         .format(target, best_precision))
        self.target = target
        self.best_precision = best_precision


class StaleCacheError(DuohashError, RuntimeError):
    pass


class EpochExhausted(DuohashError, StopIteration):
    pass
