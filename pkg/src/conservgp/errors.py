"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Structural or configuration input that violates a documented invariant."""


class SchemaError(ValidationError):
    """Persisted file that is malformed or carries an unsupported schema tag."""


class NumericalError(RuntimeError):
    """Numerical failure (factorization breakdown, non-finite loss, ...).

    ``context`` carries the offending element (edge id, epoch index, ...) so the
    failure can be reported with its origin attached.
    """

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})
