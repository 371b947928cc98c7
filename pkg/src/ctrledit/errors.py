"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation is defined on."""


class NoObjectError(DomainError):
    """A control frame has no active pixels."""


class DegenerateScaleError(DomainError):
    """A scale ratio cannot be estimated from a zero-extent box."""


class TrainingDiverged(RuntimeError):
    """Customization produced a non-finite or runaway loss."""


class StageOrderError(RuntimeError):
    """A pipeline stage ran before the artifacts it consumes exist."""


class ConfigError(ValueError):
    """A key=value file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
