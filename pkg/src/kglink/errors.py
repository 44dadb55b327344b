"""Exception types shared across the package."""


class KGLinkError(Exception):
    """Base class for all package errors."""


class ParseError(KGLinkError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ConfigError(KGLinkError, ValueError):
    """One or more configuration problems; ``issues`` holds them all."""

    def __init__(self, issues):
        if isinstance(issues, str):
            issues = [issues]
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class NumericError(KGLinkError, ArithmeticError):
    pass


class TrainingDiverged(NumericError):
    pass


class FormatError(KGLinkError, ValueError):
    """Malformed or incompatible checkpoint/rules file."""


class UndefinedMetricError(KGLinkError, ValueError):
    pass


class SamplingExhausted(KGLinkError, RuntimeError):
    pass
