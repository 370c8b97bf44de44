"""Exception types shared across the package."""


class CifsError(Exception):
    """Base class for errors raised by cifslab."""


class DomainError(CifsError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class CapacityError(CifsError):
    """A request would exceed the configured atom budget."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class RefinementError(CifsError):
    """The approximation is too coarse for the requested scale."""

    def __init__(self, message, required_depth=None):
        super().__init__(message)
        self.required_depth = required_depth


class InvariantError(CifsError):
    """An internal consistency check failed; results cannot be trusted."""
