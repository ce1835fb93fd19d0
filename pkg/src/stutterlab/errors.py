"""Shared exception types."""


class ValidationError(ValueError):
    """A config or domain object violates one of its invariants."""


class SchemaError(ValueError):
    """A serialized record does not match the expected schema."""


class CorpusParseError(ValueError):
    """A corpus file line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, corrupt, or version-incompatible."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite during training."""


class GradCheckError(AssertionError):
    """Finite-difference verification could not be completed."""
