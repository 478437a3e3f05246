"""Exception types shared across the package."""


class BellCertError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(BellCertError):
    """Operands do not share the required shape or index set."""


class ZeroInputCount(BellCertError):
    """Some input pair was never fed; frequencies are undefined and the data
    must be resampled."""


class UnsupportedLevel(BellCertError):
    """Relaxation level outside the supported range {1, 2}."""


class SolverFailure(BellCertError):
    """The conic backend returned values that must not be trusted."""


class InfeasibleBehaviour(BellCertError):
    """The behaviour admits no moment-matrix completion at the requested
    level (typically un-regularised signalling frequencies)."""


class InfeasibleValue(BellCertError):
    """A Bell-expression value outside the attainable range of the
    relaxation."""


class MissingBounds(BellCertError):
    """An operation needs cached local/quantum bounds that were never
    computed for this expression."""
