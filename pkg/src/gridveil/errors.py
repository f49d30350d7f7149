"""Exception taxonomy shared across the package."""


class GridveilError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(GridveilError):
    """A configuration value violates its contract (bad rating, unknown id, ...)."""


class SchemaError(InvalidConfigError):
    """Scenario file violates the schema; carries the offending field name."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class InvalidInputError(GridveilError):
    """Runtime input violates an operation precondition (dimension mismatch, ...)."""


class DivergenceError(GridveilError):
    """Simulation or training produced a non-finite quantity."""

    def __init__(self, message, *, dg_index=None, quantity=None, epoch=None):
        self.dg_index = dg_index
        self.quantity = quantity
        self.epoch = epoch
        super().__init__(message)


class NoSolutionError(GridveilError):
    """The network node equation is singular (no path from any source to the bus)."""


class NumericalError(GridveilError):
    """A linear-algebra step failed; carries a condition estimate when available."""

    def __init__(self, message, condition=None):
        self.condition = condition
        super().__init__(message)


class InsufficientDataError(GridveilError):
    """Not enough samples to proceed; carries the required minimum."""

    def __init__(self, message, required=None):
        self.required = required
        super().__init__(message)


class InvalidQueryError(GridveilError):
    """A prediction query is inconsistent with the trained model."""


class StealthViolationError(GridveilError):
    """An attack vector exceeds the calibrated evasion bound."""


class InfeasibleObjectiveError(GridveilError):
    """No reachable agent combination can achieve the requested objective."""


class CapabilityError(GridveilError):
    """The infection set lacks the access required by the requested action."""


class InvalidPlanError(GridveilError):
    """An attack plan is internally inconsistent (window, mode requirements)."""
