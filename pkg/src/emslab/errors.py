"""Exception hierarchy shared by the emslab modules."""


class EmsLabError(Exception):
    """Base class for all emslab errors."""

    exit_code = 1


class PowerLimitExceeded(EmsLabError):
    """The battery cannot deliver the requested terminal power."""

    exit_code = 5


class NoFeasibleInput(EmsLabError):
    """Neither engine-switch value admits a feasible input."""

    exit_code = 5


class ParseError(EmsLabError):
    exit_code = 2


class SchemaError(EmsLabError):
    exit_code = 2


class ValidationError(EmsLabError):
    exit_code = 3


class SpecError(EmsLabError):
    exit_code = 3


class RouteMismatch(EmsLabError):
    exit_code = 3


class InfeasibleTrip(EmsLabError):
    exit_code = 5


class UnknownTrip(EmsLabError):
    exit_code = 3


class CorpusTooSmall(EmsLabError):
    exit_code = 3


class EmptyCorpus(EmsLabError):
    exit_code = 3


class DegenerateBin(EmsLabError):
    exit_code = 3


class BinOutOfRange(EmsLabError):
    exit_code = 3


class ZeroDistance(EmsLabError):
    exit_code = 3


class MissingArtifacts(EmsLabError):
    exit_code = 4
