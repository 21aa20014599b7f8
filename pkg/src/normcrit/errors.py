"""Exception hierarchy for normcrit."""


class NormcritError(Exception):
    """Base class for all library errors."""


# mesh
class NonPositiveExtent(NormcritError, ValueError):
    pass


class UnsupportedDimension(NormcritError, ValueError):
    pass


class ResolutionTooSmall(NormcritError, ValueError):
    pass


class CenterOutsideDomain(NormcritError, ValueError):
    pass


# spectra
class SolverNoConvergence(NormcritError, RuntimeError):
    pass


class CountExceedsDimension(NormcritError, ValueError):
    pass


class DegenerateBoundaryForm(NormcritError, ValueError):
    pass


class NonDistinctEigenvalue(NormcritError, ValueError):
    pass


# functionals
class SOutOfRange(NormcritError, ValueError):
    pass


class MassAtOrAboveMu(NormcritError, ValueError):
    pass


class InvalidNonlinearity(NormcritError, ValueError):
    pass


# solver
class NoConverge(NormcritError, RuntimeError):
    pass


class CollapsedToZero(NormcritError, RuntimeError):
    pass


class PreconditionError(NormcritError, ValueError):
    pass


class FoundFewer(NormcritError, RuntimeError):
    """Raised by the multiplicity search; ``records`` keeps what was found."""

    def __init__(self, count, records):
        super().__init__(f"found only {count} distinct solutions")
        self.count = count
        self.records = records


# certificates
class ExponentOutOfRange(NormcritError, ValueError):
    pass


class HypothesisViolated(NormcritError, ValueError):
    pass


class NoSolutionsFound(NormcritError, RuntimeError):
    pass


class ModeUnsupported(NormcritError, ValueError):
    pass


class EmptyRecordSet(NormcritError, ValueError):
    pass


# cli
class ConfigInvalid(NormcritError, ValueError):
    pass


class RunFailed(NormcritError, RuntimeError):
    pass
