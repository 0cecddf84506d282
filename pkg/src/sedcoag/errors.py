"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigurationError -> 2,
NumericalError and subclasses -> 3, verification violations -> 4.
"""


class SedcoagError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SedcoagError):
    """Invalid configuration value or violated parameter constraint."""


class DomainError(SedcoagError):
    """Operation called outside its mathematical domain (e.g. v <= 0)."""


class NumericalError(SedcoagError):
    """Base class for runtime numerical failures."""


class IntegrationError(NumericalError):
    """ODE integration failed; carries the last valid state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class StepRejected(NumericalError):
    """Time step exceeds a stability bound; carries the computed bound."""

    def __init__(self, message, bound):
        super().__init__(message)
        self.bound = bound


class IterationError(NumericalError):
    """Fixed-point or Picard iteration failed to converge."""


class HorizonError(NumericalError):
    """Requested time lies outside the admissible horizon."""


class TuningError(NumericalError):
    """A parameter search (cutoff radius, growth rate) exhausted its budget."""


class SearchError(NumericalError):
    """A bracketed root search found no sign change."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket
