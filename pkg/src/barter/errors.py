"""Exception types shared across the package.

The CLI maps these onto its exit codes: invalid input -> 1,
non-convergence -> 2, resource limits -> 3.
"""


class InvalidInstanceError(ValueError):
    """An instance or allocation violates a structural requirement."""


class NotConvergedError(RuntimeError):
    """An iterative method stopped before meeting its tolerances."""


class ResourceLimitError(RuntimeError):
    """A guard on enumeration size, node count or wave count was hit."""
