"""Exception hierarchy.

Every error raised by the package derives from :class:`ConnectomeIdError`.
Validation problems (bad input, bad config) derive from :class:`ValidationError`
and numerical failures from :class:`NumericalFailure`; the CLI maps these to
exit codes 2 and 3.
"""


class ConnectomeIdError(Exception):
    """Base class for all package errors.

    ``stage`` names the pipeline step that failed, when known.
    """

    stage = None

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ValidationError(ConnectomeIdError):
    """Input or configuration does not satisfy a precondition."""


class NumericalFailure(ConnectomeIdError):
    """A numerical routine failed to produce a valid result."""


class IoError(ConnectomeIdError, OSError):
    """A file could not be read or written."""


class FormatError(ValidationError):
    """A file or matrix does not follow the expected layout."""


class ConfigError(ValidationError):
    pass


class DomainError(ValidationError):
    """An argument lies outside the domain where the operation is defined."""


class AtlasError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DegenerateRowError(ValidationError):
    """Zero-variance rows make Pearson correlation undefined.

    The offending row indices are available as ``rows``.
    """

    def __init__(self, rows, message=None):
        self.rows = [int(r) for r in rows]
        super().__init__(message or f"zero-variance rows: {self.rows}")


class DegenerateColumnError(ValidationError):
    def __init__(self, columns, message=None):
        self.columns = [int(c) for c in columns]
        super().__init__(message or f"zero-variance columns: {self.columns}")


class RankError(NumericalFailure):
    pass


class ConvergenceError(NumericalFailure):
    """An iterative routine did not converge.

    ``diagnostics`` holds whatever the routine could report about the failure
    (offending point, last objective value, iteration count, ...).
    """

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        super().__init__(message)


class NumericalError(NumericalFailure):
    pass
