"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`KappaError`,
so callers (and the CLI) can catch one type.
"""


class KappaError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(KappaError, ValueError):
    pass


class InvalidOrder(KappaError, ValueError):
    pass


class DegenerateRange(KappaError, ValueError):
    pass


class NoConvergence(KappaError, RuntimeError):
    pass


class Unstable(KappaError, ValueError):
    """Step size at or beyond the leapfrog stability limit ``h >= 2 sigma``."""


class InvalidConfig(KappaError, ValueError):
    pass


class OutOfRange(KappaError, ValueError):
    pass


class RankDeficient(KappaError, ValueError):
    pass


class OmegaTooSmall(KappaError, ValueError):
    pass


class SingularDraw(KappaError, RuntimeError):
    pass


class SingularPreconditioner(KappaError, ValueError):
    pass


class ZeroVariance(KappaError, ValueError):
    pass


class BudgetExhausted(KappaError, RuntimeError):
    """Step-size search ran out of pilot evaluations.

    The best step size seen so far is kept on ``best_h`` (with its acceptance
    on ``best_accept``) so callers can still use it.
    """

    def __init__(self, message, best_h, best_accept):
        super().__init__(message)
        self.best_h = best_h
        self.best_accept = best_accept


class NoRoot(KappaError, ValueError):
    """Burn-in optimality condition has no solution in the search bracket.

    ``s_star`` is 0: the recommendation is to skip preconditioning.
    """

    s_star = 0


class NonFinite(KappaError, FloatingPointError):
    """Objective became non-finite during training; ``trace`` holds the losses."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)
