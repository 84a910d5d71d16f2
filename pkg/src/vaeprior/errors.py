"""Exception hierarchy shared across the package."""


class VaePriorError(Exception):
    """Base class; ``kind`` is the machine-readable error name used by the CLI."""

    kind = "error"


class InvalidArgumentError(VaePriorError, ValueError):
    kind = "invalid-argument"


class DimensionMismatchError(VaePriorError, ValueError):
    kind = "dimension-mismatch"


class DomainError(VaePriorError, ValueError):
    kind = "domain-error"


class NumericError(VaePriorError, ArithmeticError):
    kind = "numeric-error"

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ParseError(VaePriorError, ValueError):
    kind = "parse-error"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class VersionMismatchError(VaePriorError):
    kind = "version-mismatch"


class FingerprintMismatchError(VaePriorError):
    kind = "fingerprint-mismatch"


class SamplerError(NumericError):
    """MCMC could not run (no finite start, or every warmup proposal rejected)."""

    kind = "sampler-failure"
