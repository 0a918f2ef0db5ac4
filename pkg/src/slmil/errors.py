"""Exception hierarchy shared across the package.

Each family maps to a distinct CLI exit status (see ``EXIT_CODES``).
"""


class SlmilError(Exception):
    exit_code = 1


class ConfigError(SlmilError, ValueError):
    """Inconsistent or invalid configuration."""

    exit_code = 2


class ShapeError(ConfigError):
    """Operand shapes do not agree."""


class CompatibilityError(ConfigError):
    """A checkpoint does not fit the data it is applied to."""

    def __init__(self, mismatches):
        self.fields = sorted(mismatches)
        detail = "; ".join(f"{k}: checkpoint {a!r} vs data {b!r}" for k, (a, b) in sorted(mismatches.items()))
        super().__init__(f"checkpoint incompatible ({detail})")


class InputIOError(SlmilError, OSError):
    """A file or directory could not be read or written."""

    exit_code = 3


class ValidationError(SlmilError, ValueError):
    """Input data violates a domain invariant."""

    exit_code = 4


class ParseError(ValidationError):
    def __init__(self, message, path=None, row=None, col=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if row is not None:
            loc.append(f"row {row}")
        if col is not None:
            loc.append(f"col {col}")
        prefix = f"{': '.join([', '.join(loc)])}: " if loc else ""
        super().__init__(prefix + message)
        self.path, self.row, self.col = path, row, col


class MetricUndefinedError(ValidationError):
    """A metric was requested on data where it has no value (e.g. one class)."""


class EvaluationError(ValidationError):
    """A function produced a non-finite value."""


class DivergenceError(SlmilError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


EXIT_CODES = {
    "config": ConfigError.exit_code,
    "io": InputIOError.exit_code,
    "validation": ValidationError.exit_code,
    "divergence": DivergenceError.exit_code,
}
