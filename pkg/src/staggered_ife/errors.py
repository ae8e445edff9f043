"""Exception hierarchy.

Two families matter to callers: :class:`PanelValidationError` (bad input,
CLI exit code 2) and :class:`EstimationError` (the data are fine but a
moment system cannot be solved, CLI exit code 3).
"""


class StaggeredIFEError(Exception):
    """Base class for every error raised by this package."""


class PanelValidationError(StaggeredIFEError, ValueError):
    """Input data do not describe a valid balanced staggered panel."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingCell(PanelValidationError):
    pass


class FirstPeriodTreated(PanelValidationError):
    pass


class GroupOutOfRange(PanelValidationError):
    pass


class EmptyDataset(PanelValidationError):
    pass


class NoFeasibleCells(PanelValidationError):
    """No (g, t) cell satisfies the pre-period and comparison-group counts."""


class InsufficientComparisonGroups(PanelValidationError):
    pass


class EstimationError(StaggeredIFEError):
    """A cell-level or aggregate estimate could not be produced."""

    def __init__(self, message, cell=None):
        if cell is not None:
            message = f"cell (g={cell.g}, t={cell.t}): {message}"
        super().__init__(message)
        self.cell = cell


class InfeasibleCell(EstimationError):
    pass


class SingularDesign(EstimationError):
    """The GMM design matrix is rank deficient or too ill-conditioned."""


class RankDeficientOmega(SingularDesign):
    pass


class DegenerateDenominator(EstimationError):
    pass


class EmptyComparisonGroup(EstimationError):
    pass


class EmptyTreatedGroup(EstimationError):
    pass


class InsufficientPrePeriods(EstimationError):
    pass


class EmptyEventTime(EstimationError):
    pass


class GroupInfeasible(EstimationError):
    pass


class MissingCellEstimate(EstimationError):
    pass


class LengthMismatch(StaggeredIFEError, ValueError):
    pass


class TooFewDraws(StaggeredIFEError, ValueError):
    pass
