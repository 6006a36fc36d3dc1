"""Exception hierarchy shared across the package."""


class NCOTrialError(Exception):
    """Base class for all package errors."""


class DataValidationError(NCOTrialError, ValueError):
    """Input data violate a structural rule (shape, coding, completeness)."""


class OLSError(NCOTrialError, ValueError):
    """A working-model regression cannot be fit as requested."""


class RankDeficientError(OLSError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InsufficientArmError(OLSError):
    """An arm has too few units for the requested number of predictors."""


class LeverageOneError(OLSError):
    """A unit has leverage 1, so HC2/HC3 corrections are undefined."""


class SimulationAborted(NCOTrialError, RuntimeError):
    """Too many replicate-level failures for a scenario to be summarised."""
