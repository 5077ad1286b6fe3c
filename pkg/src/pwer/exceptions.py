"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input failed a structural or range check."""


class SolverError(RuntimeError):
    """A numerical routine could not produce a result (bracket, factorization)."""
