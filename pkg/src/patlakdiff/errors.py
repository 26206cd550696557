"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DivergenceError -> 3,
FormatError (and OS-level I/O failures) -> 4.
"""


class PatlakError(Exception):
    """Base class for package-specific errors."""


class ConfigError(PatlakError):
    """Invalid configuration, specification, or argument combination."""


class FormatError(PatlakError):
    """Malformed or inconsistent volume/series file."""


class DivergenceError(PatlakError):
    """Numeric blow-up inside an iterative solver.

    Carries the partial trace (if any) in the ``trace`` attribute.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
