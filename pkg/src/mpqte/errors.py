"""Exception hierarchy.

Errors fall into three families so that the command-line front end can map
them onto exit codes: configuration problems, bad input data, and numerical
failures.
"""


class MpqteError(Exception):
    """Base class for all package errors."""


class ConfigError(MpqteError):
    """The requested computation is inconsistent with the inputs."""


class DataError(MpqteError):
    """The input data violate the matched-pairs structure or cannot be parsed."""


class NumericalError(MpqteError):
    """A numerical routine could not produce a result."""


class MissingPairs(ConfigError):
    pass


class TooFewDraws(ConfigError):
    pass


class BadSpec(ConfigError):
    pass


class UnbalancedTreatment(DataError):
    pass


class BadPair(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class OddCount(DataError):
    pass


class EmptyInput(DataError):
    pass


class ZeroTotalWeight(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class LeverageOne(NumericalError):
    pass


class AllCandidatesFailed(NumericalError):
    pass


class ZeroSe(NumericalError):
    pass


class QuadratureFailure(NumericalError):
    pass


class ReplicateFailure(NumericalError):
    """A bootstrap replicate raised; ``b`` is the 1-based replicate index."""

    def __init__(self, b, cause):
        self.b = b
        self.cause = cause
        super().__init__(f"replicate {b} failed: {type(cause).__name__}: {cause}")
